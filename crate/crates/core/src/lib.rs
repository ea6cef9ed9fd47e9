//! Personalized showcase engine.
//!
//! Pipeline stages, each its own module:
//!
//! - [`store`]: precomputed embedding matrices and cosine primitives
//! - [`graph`] / [`tensor`] / [`optim`]: dense math with reverse-mode
//!   differentiation and AdamW
//! - [`distill`]: image-sentence alignment classifier and explanation
//!   corpus distillation
//! - [`dpp`]: relevance-weighted determinantal point process selection of
//!   diverse personalized image sets
//! - [`model`]: multi-modal encoder-decoder explanation generator
//! - [`contrast`]: projection heads and the contrastive training
//!   objectives (cross-modal with entity-swap negatives, personalized
//!   history-weighted)
//! - [`metrics`]: n-gram, diversity, and embedding-alignment evaluation
//! - [`fixture`]: seeded synthetic dataset generator for end-to-end runs

pub mod contrast;
pub mod dataset;
pub mod distill;
pub mod dpp;
pub mod error;
pub mod fixture;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod store;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
