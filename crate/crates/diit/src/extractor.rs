//! Domain-invariant information extractors.
//!
//! Two cooperating pieces sit between the frozen source models and the
//! target model:
//! - domain-level: a gating network conditioned on the target representation
//!   produces per-sample softmax weights over the N sources; representations
//!   and logits are aggregated with the same scalar weight per source;
//! - representation-level: a square, identity-initialized mapper transforms
//!   the aggregate, and a small MLP discriminator predicts the domain
//!   indicator. The discriminator is trained to tell domains apart; the
//!   mapper is trained against flipped labels to make them inseparable.
//!
//! Teacher outputs are detached: gradients reach the gate and mapper but
//! never the source models' own parameters.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{dense_cost, init_dense, Backbone, ForwardCache, ForwardOutput, Instrument};
use crate::data::Sample;
use crate::error::Result;
use crate::nn::{mean_bce, Activation, DenseLayer, LayerCache, LayerGrad, Matrix};

/// Hidden width of the gate's two-layer MLP.
pub const GATE_HIDDEN: usize = 16;
/// Hidden width of the discriminator's two-layer MLP.
pub const DISC_HIDDEN: usize = 16;
/// Damping applied to the gate readout weights at init. Keeps the softmax
/// input near zero so the source mix starts effectively uniform and departs
/// from it only as the gate actually learns, rather than by init noise.
pub const GATE_READOUT_DAMP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingMode {
    Learned,
    /// Ablation: fixed g = 1/N, gate parameters untouched.
    Uniform,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatingNetwork {
    pub l1: DenseLayer,
    pub l2: DenseLayer,
    #[serde(skip, default)]
    pub instrument: Arc<Instrument>,
}

#[derive(Debug, Clone)]
pub struct GateCache {
    c1: LayerCache,
    c2: LayerCache,
}

#[derive(Debug, Clone)]
pub struct GateGrad {
    pub l1: LayerGrad,
    pub l2: LayerGrad,
}

impl GatingNetwork {
    pub fn init(repr_width: usize, hidden: usize, n_sources: usize, rng: &mut impl Rng) -> Self {
        let l1 = init_dense(rng, hidden, repr_width, Activation::Relu);
        let mut l2 = init_dense(rng, n_sources, hidden, Activation::Softmax);
        for w in l2.weight.data_mut() {
            *w *= GATE_READOUT_DAMP;
        }
        GatingNetwork { l1, l2, instrument: Arc::default() }
    }

    pub fn n_sources(&self) -> usize {
        self.l2.out_dim()
    }

    /// Per-sample softmax weights over the sources, given target representations.
    pub fn gate_weights(&self, e_t: &Matrix) -> Result<Matrix> {
        self.forward_cached(e_t).map(|(g, _)| g)
    }

    pub fn forward_cached(&self, e_t: &Matrix) -> Result<(Matrix, GateCache)> {
        let (h, c1) = self.l1.forward_cached(e_t)?;
        let (g, c2) = self.l2.forward_cached(&h)?;
        let b = e_t.rows();
        let (r1, f1) = dense_cost(&self.l1, b);
        let (r2, f2) = dense_cost(&self.l2, b);
        self.instrument.add(r1 + r2, f1 + f2);
        Ok((g, GateCache { c1, c2 }))
    }

    /// Accumulate gate-parameter gradients and return `dL/d(e_T)`.
    pub fn backward(&self, cache: &GateCache, d_g: &Matrix, grad: &mut GateGrad) -> Matrix {
        let d_h = self.l2.backward(&cache.c2, d_g, &mut grad.l2);
        self.l1.backward(&cache.c1, &d_h, &mut grad.l1)
    }

    pub fn zero_grad(&self) -> GateGrad {
        GateGrad { l1: self.l1.zero_grad(), l2: self.l2.zero_grad() }
    }

    pub fn param_count(&self) -> usize {
        self.l1.param_count() + self.l2.param_count()
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.l1.weight.data());
        out.extend_from_slice(&self.l1.bias);
        out.extend_from_slice(self.l2.weight.data());
        out.extend_from_slice(&self.l2.bias);
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.write_flat(&mut out);
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut pos = 0;
        for layer in [&mut self.l1, &mut self.l2] {
            let wlen = layer.weight.data().len();
            layer.weight.data_mut().copy_from_slice(&flat[pos..pos + wlen]);
            pos += wlen;
            let blen = layer.bias.len();
            layer.bias.copy_from_slice(&flat[pos..pos + blen]);
            pos += blen;
        }
    }
}

impl GateGrad {
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.l1.weight.data());
        out.extend_from_slice(&self.l1.bias);
        out.extend_from_slice(self.l2.weight.data());
        out.extend_from_slice(&self.l2.bias);
    }
}

/// Square linear map on representations; identity at initialization so the
/// transfer path starts as a no-op.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mapper {
    pub weight: Matrix,
    #[serde(skip, default)]
    pub instrument: Arc<Instrument>,
}

impl Mapper {
    pub fn identity(width: usize) -> Self {
        Mapper { weight: Matrix::identity(width), instrument: Arc::default() }
    }

    pub fn width(&self) -> usize {
        self.weight.rows()
    }

    pub fn map(&self, e: &Matrix) -> Result<Matrix> {
        e.expect_cols(self.weight.cols(), "mapper")?;
        let w = self.weight.rows() as u64;
        self.instrument.add(w * w, 2 * e.rows() as u64 * w * w);
        Ok(e.matmul_nt(&self.weight))
    }

    /// Accumulate `dL/dW` and return `dL/d(input)`; `input` is the matrix the
    /// forward mapped.
    pub fn backward(&self, input: &Matrix, d_out: &Matrix, grad: &mut Matrix) -> Matrix {
        grad.add_scaled(&d_out.matmul_tn(input), 1.0);
        d_out.matmul_nn(&self.weight)
    }

    pub fn zero_grad(&self) -> Matrix {
        Matrix::zeros(self.weight.rows(), self.weight.cols())
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.weight.data().to_vec()
    }

    pub fn load_flat(&mut self, flat: &[f64]) {
        self.weight.data_mut().copy_from_slice(flat);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Discriminator {
    pub l1: DenseLayer,
    pub l2: DenseLayer,
    #[serde(skip, default)]
    pub instrument: Arc<Instrument>,
}

#[derive(Debug, Clone)]
pub struct DiscCache {
    c1: LayerCache,
    c2: LayerCache,
}

#[derive(Debug, Clone)]
pub struct DiscGrad {
    pub l1: LayerGrad,
    pub l2: LayerGrad,
}

impl Discriminator {
    pub fn init(repr_width: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Discriminator {
            l1: init_dense(rng, hidden, repr_width, Activation::Relu),
            l2: init_dense(rng, 1, hidden, Activation::Sigmoid),
            instrument: Arc::default(),
        }
    }

    /// d̂ ∈ (0,1) per sample.
    pub fn discriminate(&self, e: &Matrix) -> Result<Vec<f64>> {
        self.forward_cached(e).map(|(d, _)| d)
    }

    pub fn forward_cached(&self, e: &Matrix) -> Result<(Vec<f64>, DiscCache)> {
        let (h, c1) = self.l1.forward_cached(e)?;
        let (out, c2) = self.l2.forward_cached(&h)?;
        let b = e.rows();
        let (r1, f1) = dense_cost(&self.l1, b);
        let (r2, f2) = dense_cost(&self.l2, b);
        self.instrument.add(r1 + r2, f1 + f2);
        Ok((out.data().to_vec(), DiscCache { c1, c2 }))
    }

    /// Fused backward of `scale · mean_bce(d̂, targets)` through the sigmoid:
    /// the final-layer pre-activation gradient is `scale·(d̂ − t)/b`, which is
    /// exact and stable even for saturated outputs. Parameter gradients are
    /// only written when `grad` is given (step 2 freezes the discriminator and
    /// passes None); the input gradient is always returned.
    pub fn backward_bce(
        &self,
        cache: &DiscCache,
        d_hat: &[f64],
        targets: &[f64],
        scale: f64,
        grad: Option<&mut DiscGrad>,
    ) -> Matrix {
        let b = d_hat.len();
        assert_eq!(b, targets.len());
        let mut d_pre = Matrix::zeros(b, 1);
        for i in 0..b {
            d_pre.row_mut(i)[0] = scale * (d_hat[i] - targets[i]) / b as f64;
        }
        match grad {
            Some(g) => {
                let d_h = self.l2.backward_pre(&cache.c2, &d_pre, &mut g.l2);
                self.l1.backward(&cache.c1, &d_h, &mut g.l1)
            }
            None => {
                let mut scratch = self.zero_grad();
                let d_h = self.l2.backward_pre(&cache.c2, &d_pre, &mut scratch.l2);
                self.l1.backward(&cache.c1, &d_h, &mut scratch.l1)
            }
        }
    }

    pub fn zero_grad(&self) -> DiscGrad {
        DiscGrad { l1: self.l1.zero_grad(), l2: self.l2.zero_grad() }
    }

    pub fn param_count(&self) -> usize {
        self.l1.param_count() + self.l2.param_count()
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.l1.weight.data());
        out.extend_from_slice(&self.l1.bias);
        out.extend_from_slice(self.l2.weight.data());
        out.extend_from_slice(&self.l2.bias);
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.write_flat(&mut out);
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut pos = 0;
        for layer in [&mut self.l1, &mut self.l2] {
            let wlen = layer.weight.data().len();
            layer.weight.data_mut().copy_from_slice(&flat[pos..pos + wlen]);
            pos += wlen;
            let blen = layer.bias.len();
            layer.bias.copy_from_slice(&flat[pos..pos + blen]);
            pos += blen;
        }
    }
}

impl DiscGrad {
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.l1.weight.data());
        out.extend_from_slice(&self.l1.bias);
        out.extend_from_slice(self.l2.weight.data());
        out.extend_from_slice(&self.l2.bias);
    }
}

/// e_s = Σ_n g_n·e_n and Z_s = Σ_n g_n·Z_n, the same scalar weight per
/// source applied to both.
pub fn aggregate_sources(
    e_list: &[Matrix],
    z_list: &[Matrix],
    g: &Matrix,
) -> (Matrix, Matrix) {
    let n = g.cols();
    assert_eq!(e_list.len(), n, "gate width vs source count");
    assert_eq!(z_list.len(), n, "gate width vs source count");
    let b = g.rows();
    let e_width = e_list[0].cols();
    let z_width = z_list[0].cols();
    let mut e_s = Matrix::zeros(b, e_width);
    let mut z_s = Matrix::zeros(b, z_width);
    for i in 0..b {
        let weights = g.row(i);
        for (src, &w) in weights.iter().enumerate() {
            assert_eq!(e_list[src].rows(), b, "batch size mismatch in source {src}");
            let er = e_list[src].row(i);
            let out = e_s.row_mut(i);
            for j in 0..e_width {
                out[j] += w * er[j];
            }
            let zr = z_list[src].row(i);
            let out = z_s.row_mut(i);
            for j in 0..z_width {
                out[j] += w * zr[j];
            }
        }
    }
    (e_s, z_s)
}

/// Gate gradient of a weighted aggregate: given `dL/d(agg)` and the per-source
/// parts, accumulates `dL/dg[i][n] += dot(d_agg[i], part_n[i])`. The parts
/// themselves are teacher outputs and receive no gradient.
pub fn aggregation_gate_grad(d_agg: &Matrix, parts: &[Matrix], d_g: &mut Matrix) {
    assert_eq!(parts.len(), d_g.cols());
    for i in 0..d_agg.rows() {
        let d = d_agg.row(i);
        let out = d_g.row_mut(i);
        for (n, part) in parts.iter().enumerate() {
            let p = part.row(i);
            let mut acc = 0.0;
            for j in 0..d.len() {
                acc += d[j] * p[j];
            }
            out[n] += acc;
        }
    }
}

/// Cross-entropy the discriminator minimizes in step 1.
pub fn discriminator_loss(d_hat: &[f64], d: &[f64]) -> f64 {
    mean_bce(d_hat, d)
}

/// Flipped-label cross-entropy minimized by the mapper side in step 2;
/// identical to `discriminator_loss(d̂, 1−d)`.
pub fn confusion_loss(d_hat: &[f64], d: &[f64]) -> f64 {
    let flipped: Vec<f64> = d.iter().map(|&v| 1.0 - v).collect();
    mean_bce(d_hat, &flipped)
}

/// Everything computed on the way from a batch to the mapped aggregate:
/// the target forward (whose representation conditions the gate), the gate,
/// every source forward, the aggregation, and the mapper output. Used for
/// both the distillation path (target batch) and the adversarial path (mixed
/// batch); the caches feed the hand-written backward in the trainer.
#[derive(Debug)]
pub struct SourcePath {
    pub target_out: ForwardOutput,
    pub target_cache: ForwardCache,
    pub gate: Matrix,
    /// None when the gate is uniform (ablation) — nothing to backprop.
    pub gate_cache: Option<GateCache>,
    pub e_list: Vec<Matrix>,
    pub z_list: Vec<Matrix>,
    pub e_agg: Matrix,
    pub z_agg: Matrix,
    pub e_mapped: Matrix,
}

pub fn source_path(
    sources: &[Backbone],
    target: &Backbone,
    gating: &GatingNetwork,
    mode: GatingMode,
    mapper: &Mapper,
    batch: &[Sample],
) -> Result<SourcePath> {
    assert!(!sources.is_empty(), "source_path needs at least one source model");
    let (target_out, target_cache) = target.forward_cached(batch)?;
    let n = sources.len();
    let (gate, gate_cache) = match mode {
        GatingMode::Learned => {
            let (g, c) = gating.forward_cached(&target_out.representation)?;
            assert_eq!(g.cols(), n, "gate output width vs source count");
            (g, Some(c))
        }
        GatingMode::Uniform => {
            let mut g = Matrix::zeros(batch.len(), n);
            let w = 1.0 / n as f64;
            for v in g.data_mut() {
                *v = w;
            }
            (g, None)
        }
    };
    let mut e_list = Vec::with_capacity(n);
    let mut z_list = Vec::with_capacity(n);
    for src in sources {
        let out = src.forward(batch)?;
        e_list.push(out.representation);
        z_list.push(out.logits);
    }
    let (e_agg, z_agg) = aggregate_sources(&e_list, &z_list, &gate);
    let e_mapped = mapper.map(&e_agg)?;
    Ok(SourcePath {
        target_out,
        target_cache,
        gate,
        gate_cache,
        e_list,
        z_list,
        e_agg,
        z_agg,
        e_mapped,
    })
}
