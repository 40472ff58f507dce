//! Gradient verification against central finite differences.

use crate::error::{Error, Result};

/// Max relative error between the analytic gradient reported by `f` and a
/// central finite difference of its value, over all coordinates of `x`.
///
/// `f` evaluates a scalar function at a parameter vector and returns
/// `(value, analytic gradient)`; only the value is used for the finite
/// differences, so the two routes stay independent.
pub fn finite_difference_check<F>(mut f: F, x: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument("step must be positive".into()));
    }
    let (value, analytic) = f(x)?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "finite_difference_check base value".into(),
        });
    }
    if analytic.len() != x.len() {
        return Err(Error::InvalidArgument(format!(
            "gradient length {} != parameter length {}",
            analytic.len(),
            x.len()
        )));
    }
    let mut xs = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        xs[i] = x[i] + step;
        let (fp, _) = f(&xs)?;
        xs[i] = x[i] - step;
        let (fm, _) = f(&xs)?;
        xs[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                context: format!("finite_difference_check perturbed value at index {i}"),
            });
        }
        let central = (fp - fm) / (2.0 * step);
        let err = (analytic[i] - central).abs() / (central.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
