//! Fully connected layer with a fused activation, plus the exact backward pass.
//!
//! Convention throughout the crate: activations are row vectors, weights are
//! stored `[out × in]`, and a layer computes `act(x·Wᵀ + b)`. Backward takes
//! `dL/d(out)` and the cached forward tensors, accumulates `dL/dW` and `dL/db`
//! into a gradient buffer, and returns `dL/d(in)`.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    /// Row-wise softmax. Its Jacobian couples the whole row, so backward
    /// handles it separately from the pointwise activations.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Matrix, // [out × in]
    pub bias: Vec<f64>, // [out]
    pub activation: Activation,
}

/// Forward tensors needed by backward: the input and the post-activation
/// output. Pre-activation values are recoverable from the output for every
/// activation we use, so they are not stored.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub input: Matrix,
    pub output: Matrix,
}

/// Gradient buffer mirroring a layer's parameters.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Self {
        assert_eq!(weight.rows(), bias.len(), "bias length must match output width");
        DenseLayer { weight, bias, activation }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    pub fn zero_grad(&self) -> LayerGrad {
        LayerGrad {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    pub fn forward(&self, input: &Matrix) -> Result<Matrix> {
        input.expect_cols(self.in_dim(), "dense layer forward")?;
        let mut out = input.matmul_nt(&self.weight);
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            for (v, &b) in row.iter_mut().zip(self.bias.iter()) {
                *v += b;
            }
        }
        apply_activation(self.activation, &mut out);
        Ok(out)
    }

    pub fn forward_cached(&self, input: &Matrix) -> Result<(Matrix, LayerCache)> {
        let output = self.forward(input)?;
        let cache = LayerCache { input: input.clone(), output: output.clone() };
        Ok((output, cache))
    }

    /// Accumulate parameter gradients and return `dL/d(input)`.
    pub fn backward(&self, cache: &LayerCache, d_out: &Matrix, grad: &mut LayerGrad) -> Matrix {
        let d_pre = activation_backward(self.activation, &cache.output, d_out);
        self.backward_pre(cache, &d_pre, grad)
    }

    /// Backward from a gradient already expressed at the pre-activation,
    /// skipping the activation derivative. Losses fused with the final
    /// activation (sigmoid + cross-entropy) use this for exact, saturation-
    /// proof gradients.
    pub fn backward_pre(&self, cache: &LayerCache, d_pre: &Matrix, grad: &mut LayerGrad) -> Matrix {
        // dW += d_preᵀ · input ; db += column sums of d_pre ; d_in = d_pre · W
        grad.weight.add_scaled(&d_pre.matmul_tn(&cache.input), 1.0);
        for i in 0..d_pre.rows() {
            for (g, &d) in grad.bias.iter_mut().zip(d_pre.row(i)) {
                *g += d;
            }
        }
        d_pre.matmul_nn(&self.weight)
    }
}

pub fn apply_activation(activation: Activation, m: &mut Matrix) {
    match activation {
        Activation::Identity => {}
        Activation::Relu => {
            for v in m.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        Activation::Sigmoid => {
            for v in m.data_mut() {
                *v = sigmoid(*v);
            }
        }
        Activation::Softmax => {
            for i in 0..m.rows() {
                softmax_in_place(m.row_mut(i));
            }
        }
    }
}

/// `dL/d(pre-activation)` from the cached post-activation output.
pub fn activation_backward(activation: Activation, output: &Matrix, d_out: &Matrix) -> Matrix {
    assert_eq!(output.shape(), d_out.shape(), "activation backward shape mismatch");
    let mut d_pre = d_out.clone();
    match activation {
        Activation::Identity => {}
        Activation::Relu => {
            for (d, &o) in d_pre.data_mut().iter_mut().zip(output.data()) {
                if o <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        Activation::Sigmoid => {
            for (d, &o) in d_pre.data_mut().iter_mut().zip(output.data()) {
                *d *= o * (1.0 - o);
            }
        }
        Activation::Softmax => {
            // d_pre_j = p_j (d_out_j − Σ_k d_out_k p_k), row-wise.
            for i in 0..d_pre.rows() {
                let p = output.row(i);
                let row = d_pre.row_mut(i);
                let dot: f64 = row.iter().zip(p.iter()).map(|(&d, &o)| d * o).sum();
                for (d, &o) in row.iter_mut().zip(p.iter()) {
                    *d = o * (*d - dot);
                }
            }
        }
    }
    d_pre
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax over a slice (max subtraction before exp).
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Stable `log(softmax(row))`: shift by max, subtract log-sum-exp.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v - max - log_sum).collect()
}
