//! Central finite-difference gradient checking.
//!
//! The checker only ever calls the forward path of a builder closure, so it
//! stays independent of the reverse-mode implementation it verifies.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-4;
pub const DEFAULT_REL_TOL: f64 = 1e-3;
pub const DEFAULT_ABS_TOL: f64 = 1e-6;

/// Worst observed agreement between analytic and numeric gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    /// An element passes when it is close in absolute terms or in relative
    /// terms; the report passes when every element did.
    pub fn passes(&self) -> bool {
        self.max_rel_err < DEFAULT_REL_TOL
    }
}

fn element_errors(analytic: f64, numeric: f64) -> (f64, f64) {
    let abs = (analytic - numeric).abs();
    let denom = analytic.abs().max(numeric.abs());
    let rel = if abs <= DEFAULT_ABS_TOL {
        0.0
    } else {
        abs / denom.max(1e-12)
    };
    (abs, rel)
}

/// Compare analytic gradients of a scalar-valued builder against central
/// finite differences over every element of every input.
///
/// `build` receives leaf vars in the order of `inputs` and must return the
/// scalar loss var.
pub fn check_scalar_fn<F>(build: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| g.param(t.clone()))
            .collect::<Result<_>>()?;
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    // Analytic gradients.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<_>>()?;
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport {
        checked: 0,
        max_abs_err: 0.0,
        max_rel_err: 0.0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, tensor) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[ti], tensor.shape());
        for ei in 0..tensor.len() {
            let orig = tensor.data()[ei];
            work[ti].data_mut()[ei] = orig + eps;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - eps;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let (abs, rel) = element_errors(analytic.data()[ei], numeric);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_checks_out() {
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let report = check_scalar_fn(
            |g, vars| {
                let sq = g.mul(vars[0], vars[0])?;
                g.sum(sq)
            },
            &[x],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(report.passes(), "{report:?}");
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn linear_gradient_is_exact() {
        let x = Tensor::vector(vec![0.3]);
        let report = check_scalar_fn(
            |g, vars| {
                let y = g.scale(vars[0], 2.0)?;
                g.sum(y)
            },
            &[x],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(report.passes());
        assert!(report.max_abs_err < 1e-8);
    }
}
