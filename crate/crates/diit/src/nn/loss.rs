//! Scalar loss helpers shared by training and evaluation.
//!
//! The training cross-entropy reported per batch and the evaluation logloss
//! both go through [`mean_bce`], so the two are bitwise identical on the same
//! prediction vector by construction rather than by tolerance.

/// Floor for any probability entering a log. Keeps saturated predictions
/// finite without changing well-conditioned values.
pub const LOG_CLAMP: f64 = 1e-12;

fn safe_ln(p: f64) -> f64 {
    p.max(LOG_CLAMP).ln()
}

/// Mean binary cross-entropy of predicted probabilities against 0/1 targets.
pub fn mean_bce(preds: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(preds.len(), targets.len(), "mean_bce length mismatch");
    assert!(!preds.is_empty(), "mean_bce over empty slice");
    let mut sum = 0.0;
    for (&p, &y) in preds.iter().zip(targets.iter()) {
        sum -= y * safe_ln(p) + (1.0 - y) * safe_ln(1.0 - p);
    }
    sum / preds.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        // p=0.5 carries ln 2 regardless of the label.
        assert!((mean_bce(&[0.5], &[1.0]) - 2.0f64.ln()).abs() < 1e-15);
        assert!((mean_bce(&[0.5], &[0.0]) - 2.0f64.ln()).abs() < 1e-15);
        // Confident correct pair: mean of −ln 0.9 twice.
        let v = mean_bce(&[0.9, 0.1], &[1.0, 0.0]);
        assert!((v + 0.9f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_predictions_stay_finite() {
        let v = mean_bce(&[0.0, 1.0], &[1.0, 0.0]);
        assert!(v.is_finite());
        assert!((v + LOG_CLAMP.ln()).abs() < 1e-9);
    }

    #[test]
    fn matches_finite_difference_in_p() {
        // d/dp of −[y ln p + (1−y) ln(1−p)] is (p−y)/(p(1−p)).
        for &(p, y) in &[(0.3, 1.0), (0.7, 0.0), (0.5, 1.0)] {
            let eps = 1e-7;
            let fd = (mean_bce(&[p + eps], &[y]) - mean_bce(&[p - eps], &[y])) / (2.0 * eps);
            let analytic = (p - y) / (p * (1.0 - p));
            assert!((fd - analytic).abs() < 1e-5, "p={p} y={y}: {fd} vs {analytic}");
        }
    }

    #[test]
    fn label_flip_symmetry() {
        let a = mean_bce(&[0.2], &[1.0]);
        let b = mean_bce(&[0.8], &[0.0]);
        assert!((a - b).abs() < 1e-12);
    }
}
