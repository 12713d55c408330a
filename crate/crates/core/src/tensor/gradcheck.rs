use thiserror::Error;

use super::{Graph, Tensor, TensorError, Var};

/// Default central-difference step.
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("non-finite {which} gradient at flat index {index}")]
    NonFinite { which: &'static str, index: usize },
    #[error("function under check failed: {0}")]
    Forward(String),
}

/// Compares the tape gradient of a scalar function against central finite
/// differences and returns the largest relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` over all elements.
pub fn grad_check<F, E>(f: F, x: &Tensor, eps: f64) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, E>,
    E: std::fmt::Display,
{
    let forward = |e: E| GradCheckError::Forward(e.to_string());
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let out = f(&mut g, xv).map_err(forward)?;
    g.backward(out)
        .map_err(|e: TensorError| GradCheckError::Forward(e.to_string()))?;
    let analytic = g.grad(xv).expect("leaf gradient");

    let eval = |probe: &Tensor| -> Result<f64, GradCheckError> {
        let mut g = Graph::new();
        let v = g.constant(probe.clone());
        let out = f(&mut g, v).map_err(forward)?;
        Ok(g.value(out).item())
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;

        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        if !a.is_finite() {
            return Err(GradCheckError::NonFinite {
                which: "analytic",
                index: i,
            });
        }
        if !numeric.is_finite() {
            return Err(GradCheckError::NonFinite {
                which: "numeric",
                index: i,
            });
        }
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
