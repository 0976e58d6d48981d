//! Multi-spot knowledge distillation losses: middle-layer MSE and
//! high-temperature logit KL, plus their exact gradients.
//!
//! Loss values are paired with hand-derived gradient functions; the trainer
//! scales them with β₁/β₂ when accumulating. Teacher-side gradients (d_source)
//! stop at the aggregated source outputs: they flow back into the gate,
//! mapper, and projection, never into source-model parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_softmax, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KDConfig {
    /// Softmax temperature for the logit loss. No τ² rescaling is applied to
    /// the loss or its gradient.
    pub tau: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Trunk-layer indices distilled as middle spots. The default single spot
    /// is the last hidden layer.
    pub spots: Vec<usize>,
}

impl KDConfig {
    pub fn default_for_trunk(trunk_len: usize) -> Self {
        KDConfig { tau: 10.0, beta1: 0.1, beta2: 0.1, spots: vec![trunk_len - 1] }
    }

    pub fn validate(&self, trunk_len: usize) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("hyper.tau", format!("must be > 0, got {}", self.tau)));
        }
        for (key, v) in [("hyper.beta1", self.beta1), ("hyper.beta2", self.beta2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("must be ≥ 0, got {v}")));
            }
        }
        for &s in &self.spots {
            if s >= trunk_len {
                return Err(Error::config(
                    "hyper.spots",
                    format!("spot {s} outside trunk of {trunk_len} layers"),
                ));
            }
        }
        let mut sorted = self.spots.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.spots.len() {
            return Err(Error::config("hyper.spots", "duplicate spots"));
        }
        Ok(())
    }

    pub fn num_spots(&self) -> usize {
        self.spots.len()
    }
}

fn project(e_s: &Matrix, w_kd: Option<&Matrix>) -> Result<Matrix> {
    match w_kd {
        Some(p) => {
            e_s.expect_cols(p.cols(), "distillation projection")?;
            Ok(e_s.matmul_nt(p))
        }
        None => Ok(e_s.clone()),
    }
}

/// Mean over samples of the squared Euclidean distance `‖W_KD·e_s − e_T‖²`
/// (summed over dimensions, averaged over the batch only).
pub fn middle_distill_loss(e_s: &Matrix, e_t: &Matrix, w_kd: Option<&Matrix>) -> Result<f64> {
    let proj = project(e_s, w_kd)?;
    if proj.shape() != e_t.shape() {
        return Err(Error::dimension(
            "middle distillation",
            format!("{}x{}", proj.rows(), proj.cols()),
            format!("{}x{}", e_t.rows(), e_t.cols()),
        ));
    }
    let n = proj.rows() as f64;
    let sum: f64 = proj
        .data()
        .iter()
        .zip(e_t.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n)
}

#[derive(Debug)]
pub struct MiddleGrads {
    pub loss: f64,
    /// dL/d(e_s), already through the projection.
    pub d_source: Matrix,
    pub d_target: Matrix,
    pub d_projection: Option<Matrix>,
}

pub fn middle_distill_grads(e_s: &Matrix, e_t: &Matrix, w_kd: Option<&Matrix>) -> Result<MiddleGrads> {
    let proj = project(e_s, w_kd)?;
    if proj.shape() != e_t.shape() {
        return Err(Error::dimension(
            "middle distillation",
            format!("{}x{}", proj.rows(), proj.cols()),
            format!("{}x{}", e_t.rows(), e_t.cols()),
        ));
    }
    let n = proj.rows() as f64;
    let mut loss = 0.0;
    let mut d_proj = Matrix::zeros(proj.rows(), proj.cols());
    for (d, (a, b)) in d_proj
        .data_mut()
        .iter_mut()
        .zip(proj.data().iter().zip(e_t.data()))
    {
        let m = a - b;
        loss += m * m;
        *d = 2.0 * m / n;
    }
    loss /= n;
    let mut d_target = d_proj.clone();
    d_target.scale(-1.0);
    let (d_source, d_projection) = match w_kd {
        Some(p) => (d_proj.matmul_nn(p), Some(d_proj.matmul_tn(e_s))),
        None => (d_proj, None),
    };
    Ok(MiddleGrads { loss, d_source, d_target, d_projection })
}

/// Mean over samples of `Σ_c σ(Z_S/τ)·(log σ(Z_S/τ) − log σ(Z_T/τ))`,
/// computed via log-softmax. No τ² rescaling.
pub fn logit_distill_loss(z_s: &Matrix, z_t: &Matrix, tau: f64) -> Result<f64> {
    logit_distill_grads(z_s, z_t, tau).map(|g| g.loss)
}

#[derive(Debug)]
pub struct LogitGrads {
    pub loss: f64,
    pub d_source: Matrix,
    pub d_target: Matrix,
}

pub fn logit_distill_grads(z_s: &Matrix, z_t: &Matrix, tau: f64) -> Result<LogitGrads> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
    }
    if z_s.shape() != z_t.shape() {
        return Err(Error::dimension(
            "logit distillation",
            format!("{}x{}", z_s.rows(), z_s.cols()),
            format!("{}x{}", z_t.rows(), z_t.cols()),
        ));
    }
    let b = z_s.rows();
    let c = z_s.cols();
    let mut loss = 0.0;
    let mut d_source = Matrix::zeros(b, c);
    let mut d_target = Matrix::zeros(b, c);
    let inv = 1.0 / (b as f64 * tau);
    for i in 0..b {
        let soft_s: Vec<f64> = z_s.row(i).iter().map(|&z| z / tau).collect();
        let soft_t: Vec<f64> = z_t.row(i).iter().map(|&z| z / tau).collect();
        let log_p = log_softmax(&soft_s);
        let log_q = log_softmax(&soft_t);
        let p: Vec<f64> = log_p.iter().map(|&l| l.exp()).collect();
        let q: Vec<f64> = log_q.iter().map(|&l| l.exp()).collect();
        let kl: f64 = (0..c).map(|j| p[j] * (log_p[j] - log_q[j])).sum();
        loss += kl;
        let ds = d_source.row_mut(i);
        let dt = d_target.row_mut(i);
        for j in 0..c {
            let r = log_p[j] - log_q[j];
            ds[j] = inv * p[j] * (r - kl);
            dt[j] = inv * (q[j] - p[j]);
        }
    }
    loss /= b as f64;
    Ok(LogitGrads { loss, d_source, d_target })
}

/// Overall distillation loss: `β₁·Σᵢ L_MSEᵢ + β₂·L_KL`.
pub fn kd_total(middle_losses: &[f64], l_kl: f64, beta1: f64, beta2: f64) -> f64 {
    beta1 * middle_losses.iter().sum::<f64>() + beta2 * l_kl
}
