//! Adam over a flat parameter slice, with bias correction.
//!
//! Models expose their parameters as one flattened buffer; the optimizer keeps
//! first/second moment estimates of the same length plus a shared step count.
//! State serializes with the checkpoint so training can resume mid-stream
//! without resetting the moments.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, param_len: usize) -> Self {
        AdamState { config, m: vec![0.0; param_len], v: vec![0.0; param_len], step: 0 }
    }

    pub fn param_len(&self) -> usize {
        self.m.len()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over the full parameter vector. `params` and `grads` must
    /// both match the length this state was built for.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "Adam param length mismatch");
        assert_eq!(grads.len(), self.m.len(), "Adam grad length mismatch");
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut state = AdamState::new(AdamConfig::default(), 3);
        let mut params = vec![1.0, -2.0, 0.5];
        let before = params.clone();
        state.step(&mut params, &[0.0, 0.0, 0.0]);
        assert_eq!(params, before);
    }

    #[test]
    fn first_step_is_signed_lr() {
        // With bias correction the first update is lr·g/(|g|+eps), i.e. very
        // nearly lr in the direction of −sign(g), independent of |g|.
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut state = AdamState::new(cfg, 2);
        let mut params = vec![0.0, 0.0];
        state.step(&mut params, &[3.0, -0.004]);
        assert!((params[0] + 0.1).abs() < 1e-6, "{}", params[0]);
        assert!((params[1] - 0.1).abs() < 1e-4, "{}", params[1]);
    }

    #[test]
    fn two_steps_match_hand_computation() {
        let cfg = AdamConfig { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut state = AdamState::new(cfg, 1);
        let mut params = vec![1.0];
        let (g1, g2) = (0.5, -0.25);

        // Hand recurrence with the same constants.
        let mut m = 0.0f64;
        let mut v = 0.0f64;
        let mut p = 1.0f64;
        for (t, g) in [(1, g1), (2, g2)] {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            p -= 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        }

        state.step(&mut params, &[g1]);
        state.step(&mut params, &[g2]);
        assert!((params[0] - p).abs() < 1e-15, "{} vs {}", params[0], p);
        assert_eq!(state.step_count(), 2);
    }

    #[test]
    fn converges_on_a_quadratic() {
        // minimize (x-3)², gradient 2(x-3)
        let cfg = AdamConfig { lr: 0.05, ..AdamConfig::default() };
        let mut state = AdamState::new(cfg, 1);
        let mut params = vec![0.0];
        for _ in 0..2000 {
            let g = 2.0 * (params[0] - 3.0);
            state.step(&mut params, &[g]);
        }
        assert!((params[0] - 3.0).abs() < 1e-3, "{}", params[0]);
    }

    #[test]
    fn state_round_trips_through_json() {
        let mut state = AdamState::new(AdamConfig::default(), 4);
        let mut params = vec![1.0; 4];
        state.step(&mut params, &[0.1, 0.2, 0.3, 0.4]);
        let json = serde_json::to_string(&state).unwrap();
        let back: AdamState = serde_json::from_str(&json).unwrap();
        assert_eq!(state, back);

        // Continuing from the restored state is bit-identical.
        let mut p1 = params.clone();
        let mut p2 = params.clone();
        let mut s1 = state.clone();
        let mut s2 = back;
        s1.step(&mut p1, &[0.5, 0.5, 0.5, 0.5]);
        s2.step(&mut p2, &[0.5, 0.5, 0.5, 0.5]);
        assert_eq!(p1, p2);
    }
}
