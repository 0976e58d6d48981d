//! Central finite-difference verification of hand-derived gradients.

use crate::error::{Error, Result};

/// Compare an analytic gradient against central differences of `loss_fn`
/// around `point`. Returns the max over parameters of
/// `|analytic − central| / max(1, |analytic|)`.
///
/// `loss_fn` must be deterministic; any non-finite loss evaluation is an
/// error rather than a silently huge ratio.
pub fn grad_check<F>(mut loss_fn: F, point: &[f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(point.len(), analytic.len(), "grad_check length mismatch");
    assert!(
        (1e-7..=1e-4).contains(&eps),
        "grad_check eps {eps} outside [1e-7, 1e-4]"
    );
    let mut probe = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        probe[i] = point[i] + eps;
        let plus = loss_fn(&probe);
        probe[i] = point[i] - eps;
        let minus = loss_fn(&probe);
        probe[i] = point[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite loss in grad_check at parameter {i}: f+={plus}, f-={minus}"
            )));
        }
        let central = (plus - minus) / (2.0 * eps);
        let rel = (analytic[i] - central).abs() / analytic[i].abs().max(1.0);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
