//! Incremental training orchestration: independent per-period source-model
//! updates, a warm-started target model, and the paired two-step transfer
//! optimization that distills gated, adversarially aligned source knowledge
//! into the target.
//!
//! Each optimization iteration draws one target batch and one mixed batch of
//! equal size. Step 1 updates only the discriminator on the mixed batch;
//! step 2 recomputes every forward and updates the target model plus the
//! gate/mapper/projection group against
//! `λ·L_CE + α·L_adv2 + β₁·ΣL_MSE + β₂·L_KL`. Source models are never
//! handed to an optimizer after their own cross-entropy update, so they are
//! bitwise invariant under transfer steps by construction.
//!
//! The aligner (discriminator step, confusion term, and mapper routing) is
//! active only when the adversarial flag is set AND α > 0; setting α to zero
//! therefore reproduces the no-adversarial ablation exactly.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    build_backbone, xavier_matrix, Backbone, BackboneGrad, BackboneKind, FeatureSchema,
    ForwardCache, ForwardOutput,
};
use crate::data::{
    build_mixed, generate_period_with, GenConfig, GroundTruth, PeriodDataset, Sample,
    TARGET_DOMAIN,
};
use crate::error::{Error, Result};
use crate::eval::{self, MetricsRecord};
use crate::extractor::{
    aggregate_sources, aggregation_gate_grad, confusion_loss, discriminator_loss, source_path,
    DiscCache, Discriminator, GateGrad, GatingMode, GatingNetwork, Mapper, SourcePath,
    DISC_HIDDEN, GATE_HIDDEN,
};
use crate::migrator::{logit_distill_grads, middle_distill_grads, KDConfig, LogitGrads, MiddleGrads};
use crate::nn::{mean_bce, AdamConfig, AdamState, Matrix};
use crate::rng;

/// Loss weights and optimization knobs for one run: `lambda` scales the CTR
/// cross-entropy, `alpha` the confusion loss, and the distillation
/// temperature/weights/spots live in `kd`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub lambda: f64,
    pub alpha: f64,
    pub kd: KDConfig,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs_per_period: usize,
}

impl HyperParams {
    /// Desk-scale defaults: λ=1, α=0.05, β₁=β₂=0.1, τ=10, lr=1e-3,
    /// batch 256, one epoch per period, one spot at the last hidden layer.
    pub fn desk_default(trunk_len: usize) -> Self {
        HyperParams {
            lambda: 1.0,
            alpha: 0.05,
            kd: KDConfig::default_for_trunk(trunk_len),
            optimizer: AdamConfig::default(),
            batch_size: 256,
            epochs_per_period: 1,
        }
    }

    pub fn validate(&self, trunk_len: usize) -> Result<()> {
        for (key, v) in [("hyper.lambda", self.lambda), ("hyper.alpha", self.alpha)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(key, format!("must be finite and ≥ 0, got {v}")));
            }
        }
        if !self.optimizer.lr.is_finite() || self.optimizer.lr <= 0.0 {
            return Err(Error::config(
                "hyper.lr",
                format!("must be finite and > 0, got {}", self.optimizer.lr),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("hyper.batch_size", "must be ≥ 1"));
        }
        if self.epochs_per_period == 0 {
            return Err(Error::config("hyper.epochs_per_period", "must be ≥ 1"));
        }
        self.kd.validate(trunk_len)
    }
}

/// Which representations stand in for target-domain rows on the adversarial
/// path. `SourceEnsemble` feeds every mixed row through the gated source
/// ensemble; `TargetRows` instead uses the target backbone's representation
/// for rows whose indicator is 1. The latter is exploratory, requires equal
/// source/target widths, and is not used by the shipped experiment configs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvRoute {
    #[default]
    SourceEnsemble,
    TargetRows,
}

/// The trainable transfer apparatus attached at the plug period: gate,
/// mapper, discriminator, and one optional projection per distillation spot
/// (`None` when source and target widths already agree at that spot).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferModules {
    pub gating: GatingNetwork,
    pub mapper: Mapper,
    pub discriminator: Discriminator,
    pub projections: Vec<Option<Matrix>>,
}

impl TransferModules {
    /// Parameter count of the step-2 auxiliary group (everything here except
    /// the discriminator).
    pub fn aux_param_count(&self) -> usize {
        let proj: usize = self.projections.iter().flatten().map(|p| p.data().len()).sum();
        self.gating.param_count() + self.mapper.param_count() + proj
    }

    /// Step-2 auxiliary parameters flattened in a fixed order: gate, mapper,
    /// projections (spot order). [`AuxGrad::write_flat`] mirrors this layout.
    pub fn aux_flatten(&self) -> Vec<f64> {
        let mut flat = self.gating.flatten();
        flat.extend_from_slice(&self.mapper.flatten());
        for p in self.projections.iter().flatten() {
            flat.extend_from_slice(p.data());
        }
        flat
    }

    pub fn aux_load_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.aux_param_count(), "aux parameter count mismatch");
        let mut offset = self.gating.param_count();
        self.gating.load_flat(&flat[..offset]);
        let m = self.mapper.param_count();
        self.mapper.load_flat(&flat[offset..offset + m]);
        offset += m;
        for p in self.projections.iter_mut().flatten() {
            let len = p.data().len();
            p.data_mut().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
    }
}

/// Gradient accumulator matching [`TransferModules::aux_flatten`].
pub struct AuxGrad {
    pub gate: GateGrad,
    pub mapper: Matrix,
    pub projections: Vec<Option<Matrix>>,
}

impl AuxGrad {
    fn zeros(transfer: &TransferModules) -> Self {
        AuxGrad {
            gate: transfer.gating.zero_grad(),
            mapper: transfer.mapper.zero_grad(),
            projections: transfer
                .projections
                .iter()
                .map(|p| p.as_ref().map(|m| Matrix::zeros(m.rows(), m.cols())))
                .collect(),
        }
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        self.gate.write_flat(out);
        out.extend_from_slice(self.mapper.data());
        for p in self.projections.iter().flatten() {
            out.extend_from_slice(p.data());
        }
    }
}

/// Everything that evolves across periods. The freeze invariants hold by
/// construction: step 1 only ever hands the discriminator group to its
/// optimizer, step 2 only the target and auxiliary groups, and source models
/// receive updates solely from their own fine-tune stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerState {
    pub sources: Vec<Backbone>,
    /// Domain id of each entry in `sources` (ablations may restrict the set).
    pub source_domains: Vec<u32>,
    pub target: Backbone,
    pub transfer: Option<TransferModules>,
    pub opt_sources: Vec<AdamState>,
    pub opt_target: AdamState,
    /// Adam over [gate | mapper | projections], created at plug time.
    pub opt_aux: Option<AdamState>,
    pub opt_disc: Option<AdamState>,
    pub period: u32,
    pub plug_period: u32,
    pub seed: u64,
    pub gating_mode: GatingMode,
    /// When false (or when α = 0) the aligner is disabled: no discriminator
    /// step, no confusion term, and the mapper stays pinned at identity.
    pub adversarial: bool,
    pub adv_route: AdvRoute,
    pub hyper: HyperParams,
}

/// Component values from one paired step. `adv1` is the discriminator's own
/// step-1 loss; the other four are the step-2 terms. A component whose path
/// was skipped (zero weight or disabled aligner) reports 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub period: u32,
    pub ce: f64,
    pub adv1: f64,
    pub adv2: f64,
    /// Sum of the per-spot middle losses.
    pub middle: f64,
    pub logit: f64,
}

impl LossRecord {
    /// The step-2 total `λ·ce + α·adv2 + β₁·middle + β₂·logit`.
    pub fn total(&self, hyper: &HyperParams) -> f64 {
        hyper.lambda * self.ce
            + hyper.alpha * self.adv2
            + hyper.kd.beta1 * self.middle
            + hyper.kd.beta2 * self.logit
    }
}

/// A fully resolved run description; every experiment entry point consumes
/// one of these. All randomness inside the run derives from `seed` through
/// named streams, so two runs with equal specs are bitwise identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub gen: GenConfig,
    pub schema: FeatureSchema,
    pub kind: BackboneKind,
    pub trunk_widths: Vec<usize>,
    /// Source-model trunk widths; `None` means same as the target. Must have
    /// the same layer count so distillation spots line up.
    pub source_trunk_widths: Option<Vec<usize>>,
    pub hyper: HyperParams,
    /// First period with transfer attached; set ≥ `gen.num_periods` for a
    /// pure fine-tune run.
    pub plug_period: u32,
    pub gating_mode: GatingMode,
    pub adversarial: bool,
    pub adv_route: AdvRoute,
    pub source_domains: Vec<u32>,
    pub seed: u64,
    pub variant: String,
}

impl RunSpec {
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.schema.validate()?;
        if self.trunk_widths.is_empty() {
            return Err(Error::config("model.trunk_widths", "need at least one hidden layer"));
        }
        if let Some(widths) = &self.source_trunk_widths {
            if widths.len() != self.trunk_widths.len() {
                return Err(Error::config(
                    "model.source_trunk_widths",
                    format!(
                        "source trunk has {} layers but target has {}; spots must line up",
                        widths.len(),
                        self.trunk_widths.len()
                    ),
                ));
            }
            if widths.iter().any(|&w| w == 0) {
                return Err(Error::config("model.source_trunk_widths", "widths must be ≥ 1"));
            }
        }
        if self.trunk_widths.iter().any(|&w| w == 0) {
            return Err(Error::config("model.trunk_widths", "widths must be ≥ 1"));
        }
        self.hyper.validate(self.trunk_widths.len())?;
        for &d in &self.source_domains {
            if d == TARGET_DOMAIN {
                return Err(Error::config(
                    "sources.domains",
                    format!("domain {TARGET_DOMAIN} is the target and cannot be a source"),
                ));
            }
            if d >= self.gen.num_domains {
                return Err(Error::config(
                    "sources.domains",
                    format!("domain {d} outside 0..{}", self.gen.num_domains),
                ));
            }
        }
        let mut seen = self.source_domains.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.source_domains.len() {
            return Err(Error::config("sources.domains", "duplicate source domain"));
        }
        if self.plug_period < self.gen.num_periods && self.source_domains.is_empty() {
            return Err(Error::config(
                "plug_period",
                "transfer is scheduled but no source domains are configured",
            ));
        }
        if self.adv_route == AdvRoute::TargetRows {
            let src_last = self
                .source_trunk_widths
                .as_ref()
                .unwrap_or(&self.trunk_widths)
                .last()
                .copied();
            if src_last != self.trunk_widths.last().copied() {
                return Err(Error::config(
                    "adv_route",
                    "target_rows requires equal source and target representation widths",
                ));
            }
        }
        Ok(())
    }
}

impl TrainerState {
    /// Fresh period-0 state: seeded target and source backbones, one Adam
    /// group per model, no transfer attached yet.
    pub fn new(spec: &RunSpec) -> Result<Self> {
        spec.validate()?;
        let target = build_backbone(
            spec.kind,
            &spec.schema,
            &spec.trunk_widths,
            rng::derive_seed(spec.seed, "target-init"),
        )?;
        let src_widths =
            spec.source_trunk_widths.as_deref().unwrap_or(&spec.trunk_widths);
        // Same-architecture sources share the target's initialization, the
        // desk-scale analogue of every per-domain model descending from one
        // production checkpoint. A shared starting point keeps the models'
        // representation coordinates mutually aligned, which is what lets an
        // identity-projection distillation target mean anything; models with
        // different trunk shapes cannot share parameters and get their own
        // per-domain streams.
        let shared_init = src_widths == spec.trunk_widths.as_slice();
        let mut sources = Vec::with_capacity(spec.source_domains.len());
        for &d in &spec.source_domains {
            let init_seed = if shared_init {
                rng::derive_seed(spec.seed, "target-init")
            } else {
                rng::derive_seed(spec.seed, &format!("source-init/{d}"))
            };
            sources.push(build_backbone(spec.kind, &spec.schema, src_widths, init_seed)?);
        }
        let opt_sources = sources
            .iter()
            .map(|s| AdamState::new(spec.hyper.optimizer, s.param_count()))
            .collect();
        let opt_target = AdamState::new(spec.hyper.optimizer, target.param_count());
        Ok(TrainerState {
            sources,
            source_domains: spec.source_domains.clone(),
            target,
            transfer: None,
            opt_sources,
            opt_target,
            opt_aux: None,
            opt_disc: None,
            period: 0,
            plug_period: spec.plug_period,
            seed: spec.seed,
            gating_mode: spec.gating_mode,
            adversarial: spec.adversarial,
            adv_route: spec.adv_route,
            hyper: spec.hyper.clone(),
        })
    }

    /// First-plug initialization, run once when the period reaches
    /// `plug_period`: mapper starts as identity (the transfer path is a
    /// no-op), gate and discriminator are seeded random, and a projection is
    /// created only for spots whose source/target widths differ. Later
    /// periods carry all of these over — the warm start applies to the
    /// transfer modules exactly as it does to the models.
    pub fn plug_if_due(&mut self) -> Result<()> {
        if self.period < self.plug_period || self.transfer.is_some() {
            return Ok(());
        }
        if self.sources.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot attach transfer modules without source models".into(),
            ));
        }
        let w_src = self.sources[0].representation_width();
        let w_tgt = self.target.representation_width();
        let mut gate_rng = rng::stream(self.seed, "gate-init");
        let gating = GatingNetwork::init(w_tgt, GATE_HIDDEN, self.sources.len(), &mut gate_rng);
        let mapper = Mapper::identity(w_src);
        let mut disc_rng = rng::stream(self.seed, "disc-init");
        let discriminator = Discriminator::init(w_src, DISC_HIDDEN, &mut disc_rng);
        let mut projections = Vec::with_capacity(self.hyper.kd.spots.len());
        for &spot in &self.hyper.kd.spots {
            let sw = self.sources[0].trunk[spot].out_dim();
            let tw = self.target.trunk[spot].out_dim();
            projections.push(if sw == tw {
                None
            } else {
                let mut rng = rng::stream(self.seed, &format!("projection-init/{spot}"));
                Some(xavier_matrix(&mut rng, tw, sw, tw, sw))
            });
        }
        let transfer = TransferModules { gating, mapper, discriminator, projections };
        self.opt_aux = Some(AdamState::new(self.hyper.optimizer, transfer.aux_param_count()));
        self.opt_disc =
            Some(AdamState::new(self.hyper.optimizer, transfer.discriminator.param_count()));
        self.transfer = Some(transfer);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::save_json(path, self)
    }

    pub fn load(path: &Path) -> Result<TrainerState> {
        crate::io::load_json(path)
    }
}

/// Flattened [target | gate | mapper | projections] — exactly the parameter
/// set step 2 updates — for finite-difference checks and freeze assertions.
pub fn step2_params(state: &TrainerState) -> Vec<f64> {
    let mut flat = state.target.flatten();
    if let Some(t) = &state.transfer {
        flat.extend_from_slice(&t.aux_flatten());
    }
    flat
}

pub fn load_step2_params(state: &mut TrainerState, flat: &[f64]) {
    let n = state.target.param_count();
    state.target.load_flat(&flat[..n]);
    if let Some(t) = &mut state.transfer {
        t.aux_load_flat(&flat[n..]);
    } else {
        assert_eq!(flat.len(), n, "no transfer attached but extra parameters given");
    }
}

/// Discriminator parameters (empty before the plug).
pub fn disc_params(state: &TrainerState) -> Vec<f64> {
    state.transfer.as_ref().map(|t| t.discriminator.flatten()).unwrap_or_default()
}

/// All source-model parameters concatenated, for bitwise freeze checks.
pub fn source_params(state: &TrainerState) -> Vec<f64> {
    let mut flat = Vec::new();
    for s in &state.sources {
        flat.extend_from_slice(&s.flatten());
    }
    flat
}

/// Mean binary cross-entropy of predicted click probabilities — the training
/// objective of every plain CE update and, scaled by λ, the first step-2
/// term. Identical formula to the evaluation logloss.
pub fn ce_loss(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("ce_loss: empty batch".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "ce_loss: {} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(mean_bce(preds, labels))
}

/// `dL_CE/dZ = scale·(softmax(Z) − onehot(y))/b` for the 2-logit head.
fn ce_logit_grad(out: &ForwardOutput, labels: &[f64], scale: f64) -> Matrix {
    let b = labels.len();
    let mut d = Matrix::zeros(b, 2);
    for i in 0..b {
        let p = out.predictions[i];
        let row = d.row_mut(i);
        row[0] = scale * ((1.0 - p) - (1.0 - labels[i])) / b as f64;
        row[1] = scale * (p - labels[i]) / b as f64;
    }
    d
}

fn apply_backbone_step(model: &mut Backbone, opt: &mut AdamState, grad: &BackboneGrad) {
    let mut params = model.flatten();
    let mut gflat = Vec::with_capacity(params.len());
    grad.write_flat(&mut gflat);
    opt.step(&mut params, &gflat);
    model.load_flat(&params);
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

fn gather(data: &PeriodDataset, idx: &[usize]) -> Vec<Sample> {
    idx.iter().map(|&i| data.samples[i].clone()).collect()
}

/// One cross-entropy update on one batch.
fn ce_step(
    model: &mut Backbone,
    opt: &mut AdamState,
    batch: &[Sample],
    period: u32,
) -> Result<f64> {
    let (out, cache) = model.forward_cached(batch)?;
    let labels: Vec<f64> = batch.iter().map(|s| f64::from(s.label)).collect();
    let loss = ce_loss(&out.predictions, &labels)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { component: "ce".into(), value: loss, period });
    }
    let d_logits = ce_logit_grad(&out, &labels, 1.0);
    let mut grad = model.zero_grad();
    model.backward(&cache, None, Some(&d_logits), &mut grad);
    apply_backbone_step(model, opt, &grad);
    Ok(loss)
}

/// Plain cross-entropy training on one period of data — the incremental
/// baseline for the target before the plug, and the only update source
/// models ever receive. Shuffles once per epoch from the given stream and
/// returns the per-batch losses.
pub fn fine_tune_period(
    model: &mut Backbone,
    opt: &mut AdamState,
    data: &PeriodDataset,
    hyper: &HyperParams,
    shuffle: &mut ChaCha8Rng,
    period: u32,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("fine_tune_period: empty dataset".into()));
    }
    let mut losses = Vec::new();
    for _ in 0..hyper.epochs_per_period {
        let order = shuffled_indices(data.len(), shuffle);
        for chunk in order.chunks(hyper.batch_size) {
            let batch = gather(data, chunk);
            losses.push(ce_step(model, opt, &batch, period)?);
        }
    }
    Ok(losses)
}

/// Mixed-batch forward up to the discriminator output: ensemble (or routed)
/// representations through the mapper, plus the ground-truth indicators.
struct AdvPath {
    sp: SourcePath,
    /// Post-route, pre-mapper representations (mapper backward input).
    e_pre: Matrix,
    d_hat: Vec<f64>,
    disc_cache: DiscCache,
    d: Vec<f64>,
}

fn adv_path(
    sources: &[Backbone],
    target: &Backbone,
    transfer: &TransferModules,
    mode: GatingMode,
    route: AdvRoute,
    mixed: &[Sample],
) -> Result<AdvPath> {
    let sp = source_path(sources, target, &transfer.gating, mode, &transfer.mapper, mixed)?;
    let d: Vec<f64> = mixed.iter().map(|s| f64::from(s.domain_indicator)).collect();
    let (e_pre, e_mapped) = match route {
        AdvRoute::SourceEnsemble => (sp.e_agg.clone(), sp.e_mapped.clone()),
        AdvRoute::TargetRows => {
            let mut pre = sp.e_agg.clone();
            for (i, &di) in d.iter().enumerate() {
                if di == 1.0 {
                    pre.row_mut(i).copy_from_slice(sp.target_out.representation.row(i));
                }
            }
            let mapped = transfer.mapper.map(&pre)?;
            (pre, mapped)
        }
    };
    let (d_hat, disc_cache) = transfer.discriminator.forward_cached(&e_mapped)?;
    Ok(AdvPath { sp, e_pre, d_hat, disc_cache, d })
}

/// Target-batch forward through the frozen source ensemble: gate, per-spot
/// aggregates with their distillation gradients, and the softened-logit
/// gradients. Shared by the training step and the pure loss evaluator.
struct KdPath {
    gate_cache: Option<crate::extractor::GateCache>,
    /// `[spot][source]` trunk activations (gate-gradient parts).
    spot_parts: Vec<Vec<Matrix>>,
    /// Aggregate per spot — the mapper input where `mapped_spot` is set.
    spot_aggs: Vec<Matrix>,
    spot_grads: Vec<MiddleGrads>,
    mapped_spot: Vec<bool>,
    z_list: Vec<Matrix>,
    logit_grads: Option<LogitGrads>,
    middle_sum: f64,
}

#[allow(clippy::too_many_arguments)]
fn kd_path(
    sources: &[Backbone],
    transfer: &TransferModules,
    mode: GatingMode,
    aligner_on: bool,
    hyper: &HyperParams,
    t_out: &ForwardOutput,
    t_cache: &ForwardCache,
    batch: &[Sample],
    final_spot: usize,
    period: u32,
) -> Result<KdPath> {
    let (gate, gate_cache) = match mode {
        GatingMode::Learned => {
            let (g, c) = transfer.gating.forward_cached(&t_out.representation)?;
            (g, Some(c))
        }
        GatingMode::Uniform => {
            let mut g = Matrix::zeros(batch.len(), sources.len());
            let w = 1.0 / sources.len() as f64;
            for v in g.data_mut() {
                *v = w;
            }
            (g, None)
        }
    };
    let mut caches = Vec::with_capacity(sources.len());
    let mut z_list = Vec::with_capacity(sources.len());
    for src in sources {
        let (out, cache) = src.forward_cached(batch)?;
        z_list.push(out.logits);
        caches.push(cache);
    }
    let logit_grads = if hyper.kd.beta2 > 0.0 {
        let (_, z_agg) = aggregate_sources(&z_list, &z_list, &gate);
        let lg = logit_distill_grads(&z_agg, &t_out.logits, hyper.kd.tau)?;
        if !lg.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                component: "logit".into(),
                value: lg.loss,
                period,
            });
        }
        Some(lg)
    } else {
        None
    };
    let mut spot_parts = Vec::new();
    let mut spot_aggs = Vec::new();
    let mut spot_grads = Vec::new();
    let mut mapped_spot = Vec::new();
    let mut middle_sum = 0.0;
    if hyper.kd.beta1 > 0.0 {
        for (k, &spot) in hyper.kd.spots.iter().enumerate() {
            let parts: Vec<Matrix> =
                caches.iter().map(|c| c.trunk_activation(spot).clone()).collect();
            let (agg, _) = aggregate_sources(&parts, &parts, &gate);
            // The last hidden layer's aggregate is what the aligner operates
            // on, so only that spot routes through the mapper.
            let use_mapper = aligner_on && spot == final_spot;
            let chain_in =
                if use_mapper { transfer.mapper.map(&agg)? } else { agg.clone() };
            let mg = middle_distill_grads(
                &chain_in,
                t_cache.trunk_activation(spot),
                transfer.projections[k].as_ref(),
            )?;
            if !mg.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    component: "middle".into(),
                    value: mg.loss,
                    period,
                });
            }
            middle_sum += mg.loss;
            spot_parts.push(parts);
            spot_aggs.push(agg);
            spot_grads.push(mg);
            mapped_spot.push(use_mapper);
        }
    }
    Ok(KdPath {
        gate_cache,
        spot_parts,
        spot_aggs,
        spot_grads,
        mapped_spot,
        z_list,
        logit_grads,
        middle_sum,
    })
}

/// The full step-2 objective evaluated with no side effects. Finite
/// differences of `record.total(&hyper)` over [`step2_params`] are the
/// independent check of the hand-written gradients.
pub fn step2_losses(
    state: &TrainerState,
    target_batch: &[Sample],
    mixed_batch: &[Sample],
) -> Result<LossRecord> {
    let transfer = state
        .transfer
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("step2_losses before transfer plug".into()))?;
    let hyper = &state.hyper;
    let (t_out, t_cache) = state.target.forward_cached(target_batch)?;
    let labels: Vec<f64> = target_batch.iter().map(|s| f64::from(s.label)).collect();
    let ce = ce_loss(&t_out.predictions, &labels)?;
    let mut middle = 0.0;
    let mut logit = 0.0;
    if kd_active(hyper) {
        let kd = kd_path(
            &state.sources,
            transfer,
            state.gating_mode,
            adv_enabled(state),
            hyper,
            &t_out,
            &t_cache,
            target_batch,
            state.target.trunk.len() - 1,
            state.period,
        )?;
        middle = kd.middle_sum;
        logit = kd.logit_grads.map_or(0.0, |lg| lg.loss);
    }
    let mut adv2 = 0.0;
    if adv_enabled(state) {
        let path = adv_path(
            &state.sources,
            &state.target,
            transfer,
            state.gating_mode,
            state.adv_route,
            mixed_batch,
        )?;
        adv2 = confusion_loss(&path.d_hat, &path.d);
    }
    Ok(LossRecord { period: state.period, ce, adv1: 0.0, adv2, middle, logit })
}

fn kd_active(hyper: &HyperParams) -> bool {
    (hyper.kd.beta1 > 0.0 && !hyper.kd.spots.is_empty()) || hyper.kd.beta2 > 0.0
}

fn adv_enabled(state: &TrainerState) -> bool {
    state.adversarial && state.hyper.alpha > 0.0
}

struct Step2Grads {
    record: LossRecord,
    target: BackboneGrad,
    aux: AuxGrad,
    target_touched: bool,
    aux_touched: bool,
}

/// Hand-written backward of the step-2 objective. Zero-weight components are
/// skipped outright rather than multiplied by zero, so a degenerate
/// configuration (α=β₁=β₂=0) executes exactly the plain fine-tune compute
/// path and stays bit-identical to it.
fn step2_compute(
    state: &TrainerState,
    target_batch: &[Sample],
    mixed_batch: &[Sample],
) -> Result<Step2Grads> {
    let transfer = state
        .transfer
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("step 2 before transfer plug".into()))?;
    let hyper = &state.hyper;
    let period = state.period;
    let b1 = hyper.kd.beta1;
    let b2 = hyper.kd.beta2;

    let (t_out, t_cache) = state.target.forward_cached(target_batch)?;
    let labels: Vec<f64> = target_batch.iter().map(|s| f64::from(s.label)).collect();
    let ce = ce_loss(&t_out.predictions, &labels)?;
    if !ce.is_finite() {
        return Err(Error::NonFiniteLoss { component: "ce".into(), value: ce, period });
    }

    let mut target_grad = state.target.zero_grad();
    let mut aux = AuxGrad::zeros(transfer);
    let mut d_logits: Option<Matrix> =
        (hyper.lambda > 0.0).then(|| ce_logit_grad(&t_out, &labels, hyper.lambda));
    let mut d_repr: Option<Matrix> = None;
    let mut d_spots: Vec<(usize, Matrix)> = Vec::new();
    let mut middle_sum = 0.0;
    let mut logit_loss = 0.0;
    let mut adv2 = 0.0;
    let mut target_touched = false;

    if kd_active(hyper) {
        let kd = kd_path(
            &state.sources,
            transfer,
            state.gating_mode,
            adv_enabled(state),
            hyper,
            &t_out,
            &t_cache,
            target_batch,
            state.target.trunk.len() - 1,
            period,
        )?;
        middle_sum = kd.middle_sum;
        let mut d_g = Matrix::zeros(target_batch.len(), state.sources.len());
        let mut gate_fed = false;
        if let Some(lg) = kd.logit_grads {
            logit_loss = lg.loss;
            let mut dz_t = lg.d_target;
            dz_t.scale(b2);
            match &mut d_logits {
                Some(m) => m.add_scaled(&dz_t, 1.0),
                None => d_logits = Some(dz_t),
            }
            let mut dz_s = lg.d_source;
            dz_s.scale(b2);
            aggregation_gate_grad(&dz_s, &kd.z_list, &mut d_g);
            gate_fed = true;
        }
        if b1 > 0.0 {
            for (k, mg) in kd.spot_grads.into_iter().enumerate() {
                let spot = hyper.kd.spots[k];
                let mut dt = mg.d_target;
                dt.scale(b1);
                d_spots.push((spot, dt));
                let mut ds = mg.d_source;
                ds.scale(b1);
                let d_agg = if kd.mapped_spot[k] {
                    transfer.mapper.backward(&kd.spot_aggs[k], &ds, &mut aux.mapper)
                } else {
                    ds
                };
                aggregation_gate_grad(&d_agg, &kd.spot_parts[k], &mut d_g);
                if let Some(mut dp) = mg.d_projection {
                    dp.scale(b1);
                    aux.projections[k]
                        .as_mut()
                        .expect("projection grad slot for a projected spot")
                        .add_scaled(&dp, 1.0);
                }
                gate_fed = true;
            }
        }
        if gate_fed && state.gating_mode == GatingMode::Learned {
            let cache = kd.gate_cache.as_ref().expect("learned gate keeps its cache");
            d_repr = Some(transfer.gating.backward(cache, &d_g, &mut aux.gate));
        }
    }

    if adv_enabled(state) {
        let path = adv_path(
            &state.sources,
            &state.target,
            transfer,
            state.gating_mode,
            state.adv_route,
            mixed_batch,
        )?;
        adv2 = confusion_loss(&path.d_hat, &path.d);
        if !adv2.is_finite() {
            return Err(Error::NonFiniteLoss { component: "adv2".into(), value: adv2, period });
        }
        let flipped: Vec<f64> = path.d.iter().map(|&v| 1.0 - v).collect();
        // Discriminator frozen: scratch parameter grads, input grad only.
        let d_mapped = transfer.discriminator.backward_bce(
            &path.disc_cache,
            &path.d_hat,
            &flipped,
            hyper.alpha,
            None,
        );
        let mut d_pre = transfer.mapper.backward(&path.e_pre, &d_mapped, &mut aux.mapper);
        let mut d_repr_mix: Option<Matrix> = None;
        if state.adv_route == AdvRoute::TargetRows {
            // Target-domain rows bypassed the ensemble: their gradient lands
            // on the target representation, not the aggregation.
            let mut dm =
                Matrix::zeros(mixed_batch.len(), state.target.representation_width());
            for (i, &di) in path.d.iter().enumerate() {
                if di == 1.0 {
                    dm.row_mut(i).copy_from_slice(d_pre.row(i));
                    for v in d_pre.row_mut(i) {
                        *v = 0.0;
                    }
                }
            }
            d_repr_mix = Some(dm);
        }
        if state.gating_mode == GatingMode::Learned {
            let mut d_g_mix = Matrix::zeros(mixed_batch.len(), state.sources.len());
            aggregation_gate_grad(&d_pre, &path.sp.e_list, &mut d_g_mix);
            let cache = path.sp.gate_cache.as_ref().expect("learned gate keeps its cache");
            let dgc = transfer.gating.backward(cache, &d_g_mix, &mut aux.gate);
            match &mut d_repr_mix {
                Some(m) => m.add_scaled(&dgc, 1.0),
                None => d_repr_mix = Some(dgc),
            }
        }
        if let Some(dm) = &d_repr_mix {
            state.target.backward(&path.sp.target_cache, Some(dm), None, &mut target_grad);
            target_touched = true;
        }
    }

    if d_logits.is_some() || d_repr.is_some() || !d_spots.is_empty() {
        state.target.backward_with_spots(
            &t_cache,
            d_repr.as_ref(),
            d_logits.as_ref(),
            &d_spots,
            &mut target_grad,
        );
        target_touched = true;
    }
    let aux_touched = kd_active(hyper) || adv_enabled(state);
    let record =
        LossRecord { period, ce, adv1: 0.0, adv2, middle: middle_sum, logit: logit_loss };
    Ok(Step2Grads { record, target: target_grad, aux, target_touched, aux_touched })
}

/// Analytic step-2 gradient flattened in [`step2_params`] order, with no
/// update applied — the object under finite-difference test.
pub fn step2_gradient(
    state: &TrainerState,
    target_batch: &[Sample],
    mixed_batch: &[Sample],
) -> Result<(LossRecord, Vec<f64>)> {
    let grads = step2_compute(state, target_batch, mixed_batch)?;
    let mut flat = Vec::with_capacity(step2_params(state).len());
    grads.target.write_flat(&mut flat);
    grads.aux.write_flat(&mut flat);
    Ok((grads.record, flat))
}

/// Analytic discriminator gradient of the step-1 loss, no update applied.
pub fn step1_gradient(state: &TrainerState, mixed_batch: &[Sample]) -> Result<(f64, Vec<f64>)> {
    let transfer = state
        .transfer
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("step 1 before transfer plug".into()))?;
    let path = adv_path(
        &state.sources,
        &state.target,
        transfer,
        state.gating_mode,
        state.adv_route,
        mixed_batch,
    )?;
    let loss = discriminator_loss(&path.d_hat, &path.d);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            component: "adv1".into(),
            value: loss,
            period: state.period,
        });
    }
    let mut grad = transfer.discriminator.zero_grad();
    transfer.discriminator.backward_bce(&path.disc_cache, &path.d_hat, &path.d, 1.0, Some(&mut grad));
    let mut flat = Vec::new();
    grad.write_flat(&mut flat);
    Ok((loss, flat))
}

/// Step 1 of the paired update: one Adam step on the discriminator against
/// its domain-classification loss on the mixed batch. No other optimizer
/// group is invoked, so every non-discriminator parameter is untouched by
/// construction.
pub fn step1_update(state: &mut TrainerState, mixed_batch: &[Sample]) -> Result<f64> {
    if mixed_batch.is_empty() {
        return Err(Error::InvalidArgument("step 1: empty mixed batch".into()));
    }
    let (loss, gflat) = step1_gradient(state, mixed_batch)?;
    let transfer = state.transfer.as_mut().expect("step1_gradient checked the plug");
    let opt = state.opt_disc.as_mut().expect("plug created the disc optimizer");
    let mut params = transfer.discriminator.flatten();
    opt.step(&mut params, &gflat);
    transfer.discriminator.load_flat(&params);
    Ok(loss)
}

/// Step 2 of the paired update: recompute every forward and apply the full
/// objective to the target and auxiliary groups. The discriminator only ever
/// receives scratch gradients here, and optimizer groups are stepped only
/// when some active loss component actually fed them.
pub fn step2_update(
    state: &mut TrainerState,
    target_batch: &[Sample],
    mixed_batch: &[Sample],
) -> Result<LossRecord> {
    if target_batch.is_empty() || mixed_batch.is_empty() {
        return Err(Error::InvalidArgument("step 2: empty batch".into()));
    }
    let grads = step2_compute(state, target_batch, mixed_batch)?;
    if grads.target_touched {
        apply_backbone_step(&mut state.target, &mut state.opt_target, &grads.target);
    }
    if grads.aux_touched {
        let transfer = state.transfer.as_mut().expect("step2_compute checked the plug");
        let opt = state.opt_aux.as_mut().expect("plug created the aux optimizer");
        let mut params = transfer.aux_flatten();
        let mut gflat = Vec::with_capacity(params.len());
        grads.aux.write_flat(&mut gflat);
        opt.step(&mut params, &gflat);
        transfer.aux_load_flat(&params);
    }
    Ok(grads.record)
}

/// One paired two-step update: step 1 when the aligner is enabled, then
/// step 2 against the freshly updated discriminator.
pub fn diit_step(
    state: &mut TrainerState,
    target_batch: &[Sample],
    mixed_batch: &[Sample],
) -> Result<LossRecord> {
    if state.transfer.is_none() {
        return Err(Error::InvalidArgument("diit_step before transfer plug".into()));
    }
    let adv1 = if adv_enabled(state) { step1_update(state, mixed_batch)? } else { 0.0 };
    let mut record = step2_update(state, target_batch, mixed_batch)?;
    record.adv1 = adv1;
    Ok(record)
}

/// Metrics plus every per-batch loss record and the final state of a run.
#[derive(Debug)]
pub struct RunOutput {
    pub state: TrainerState,
    pub metrics: Vec<MetricsRecord>,
    pub losses: Vec<LossRecord>,
}

/// A complete multi-period run. Per period: sources fine-tune on their own
/// streams first, then the target either fine-tunes (before the plug) or
/// runs paired two-step updates over equal-size target/mixed batches; the
/// model is then scored on the next period's target stream. Shuffle streams
/// are named per (role, period), so a fine-tune run and a transfer run
/// consume identical target batch sequences — the degeneracy and
/// plug-prefix guarantees rest on that.
pub fn run_incremental(spec: &RunSpec, checkpoint_dir: Option<&Path>) -> Result<RunOutput> {
    let state = TrainerState::new(spec)?;
    run_incremental_from(spec, checkpoint_dir, state, 0)
}

/// Continue a run from a period boundary: `state` is the checkpoint saved
/// after period `start − 1`; periods before `start` are skipped entirely.
pub fn run_incremental_from(
    spec: &RunSpec,
    checkpoint_dir: Option<&Path>,
    mut state: TrainerState,
    start: u32,
) -> Result<RunOutput> {
    spec.validate()?;
    let truth = GroundTruth::build(&spec.schema, &spec.gen);
    let mut metrics = Vec::new();
    let mut losses = Vec::new();
    for t in start..spec.gen.num_periods {
        state.period = t;
        state.plug_if_due()?;

        let target_data = generate_period_with(&spec.schema, &spec.gen, &truth, TARGET_DOMAIN, t)?;
        let mut source_data = Vec::with_capacity(state.source_domains.len());
        for &d in &state.source_domains {
            source_data.push(generate_period_with(&spec.schema, &spec.gen, &truth, d, t)?);
        }

        for (i, data) in source_data.iter().enumerate() {
            let mut shuffle =
                rng::stream(spec.seed, &format!("source-shuffle/{}/{t}", state.source_domains[i]));
            fine_tune_period(
                &mut state.sources[i],
                &mut state.opt_sources[i],
                data,
                &spec.hyper,
                &mut shuffle,
                t,
            )?;
        }

        if state.transfer.is_some() {
            let mixed = build_mixed(
                &source_data.iter().collect::<Vec<_>>(),
                &target_data,
                rng::derive_seed(spec.seed, &format!("mixed-build/{t}")),
            )?;
            let mut t_shuffle = rng::stream(spec.seed, &format!("target-shuffle/{t}"));
            let mut m_shuffle = rng::stream(spec.seed, &format!("mixed-shuffle/{t}"));
            for _ in 0..spec.hyper.epochs_per_period {
                let t_order = shuffled_indices(target_data.len(), &mut t_shuffle);
                let m_order = shuffled_indices(mixed.len(), &mut m_shuffle);
                for (tc, mc) in
                    t_order.chunks(spec.hyper.batch_size).zip(m_order.chunks(spec.hyper.batch_size))
                {
                    let tb = gather(&target_data, tc);
                    let mb = gather(&mixed, mc);
                    losses.push(diit_step(&mut state, &tb, &mb)?);
                }
            }
        } else {
            let mut t_shuffle = rng::stream(spec.seed, &format!("target-shuffle/{t}"));
            let ce = fine_tune_period(
                &mut state.target,
                &mut state.opt_target,
                &target_data,
                &spec.hyper,
                &mut t_shuffle,
                t,
            )?;
            losses.extend(ce.into_iter().map(|ce| LossRecord {
                period: t,
                ce,
                adv1: 0.0,
                adv2: 0.0,
                middle: 0.0,
                logit: 0.0,
            }));
        }

        if t + 1 < spec.gen.num_periods {
            let eval_data =
                generate_period_with(&spec.schema, &spec.gen, &truth, TARGET_DOMAIN, t + 1)?;
            let (auc, logloss) =
                eval::evaluate_model(&state.target, &eval_data, spec.hyper.batch_size)?;
            metrics.push(MetricsRecord {
                period: t,
                variant: spec.variant.clone(),
                seed: spec.seed,
                auc,
                logloss,
            });
        }

        if let Some(dir) = checkpoint_dir {
            state.save(&dir.join(format!("state-period-{t}.json")))?;
            state.target.save(&dir.join(format!("target-period-{t}.json")))?;
            for (i, &d) in state.source_domains.iter().enumerate() {
                state.sources[i].save(&dir.join(format!("source-{d}-period-{t}.json")))?;
            }
        }
    }
    Ok(RunOutput { state, metrics, losses })
}

/// Resume from the checkpoint written after `boundary` and run the remaining
/// periods; metrics cover only the resumed span.
pub fn resume(spec: &RunSpec, checkpoint_dir: &Path, boundary: u32) -> Result<RunOutput> {
    let state = TrainerState::load(&checkpoint_dir.join(format!("state-period-{boundary}.json")))?;
    run_incremental_from(spec, Some(checkpoint_dir), state, boundary + 1)
}
