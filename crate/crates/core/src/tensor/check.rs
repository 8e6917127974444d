//! Central-difference gradient checking, the oracle behind every training
//! loop in this crate.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares the analytic gradient of a scalar function against central
/// finite differences and returns the worst relative error over all
/// coordinates of all parameters.
///
/// `f` evaluates the loss at the given parameters and also returns the
/// analytic gradient per parameter (same layout as the parameter data).
/// Relative error per coordinate is |analytic - central| / (|analytic| + 1e-12).
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<(f64, Vec<Vec<f64>>)>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Contract(format!("eps {eps} outside (0, 1e-2]")));
    }
    let (_, analytic) = f(params)?;
    if analytic.len() != params.len() {
        return Err(Error::Contract(format!(
            "function returned {} gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut worst = 0.0f64;
    for (pi, param) in params.iter().enumerate() {
        if analytic[pi].len() != param.numel() {
            return Err(Error::Contract(format!(
                "gradient {} has {} entries for a parameter of {} elements",
                pi,
                analytic[pi].len(),
                param.numel()
            )));
        }
        for ci in 0..param.numel() {
            let probe = |delta: f64| -> Result<f64> {
                let mut shifted: Vec<Tensor> = params.to_vec();
                shifted[pi].data_mut()[ci] += delta;
                Ok(f(&shifted)?.0)
            };
            let plus = probe(eps)?;
            let minus = probe(-eps)?;
            let central = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][ci];
            let rel = (a - central).abs() / (a.abs() + 1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
