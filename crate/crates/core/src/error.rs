use std::path::PathBuf;

/// Errors surfaced by the showcase engine.
///
/// Variants are grouped so the CLI can map them onto exit codes:
/// data problems (missing files, malformed inputs, id mismatches) versus
/// numerical failures (non-finite values, degenerate inputs).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Malformed { what: String, detail: String },

    #[error("row count mismatch: manifest declares {declared} rows, data file holds {actual}")]
    RowCountMismatch { declared: usize, actual: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("duplicate id {id}")]
    DuplicateId { id: String },

    #[error("unknown id {id} (kind {kind})")]
    UnknownId { id: String, kind: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },

    #[error("zero-norm vector passed to {op}")]
    ZeroNorm { op: String },

    #[error("degenerate labels: training data contains a single class")]
    DegenerateLabels,

    #[error("empty input: {what}")]
    EmptyInput { what: String },

    #[error("invalid argument: {detail}")]
    InvalidArgument { detail: String },
}

impl Error {
    pub fn malformed(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Malformed {
            what: what.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad numerics rather than bad input data.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::ZeroNorm { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
