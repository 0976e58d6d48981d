//! Ranking/calibration metrics and the experiment runners built on them:
//! ablations over the transfer modules, hyper-parameter sweeps, the
//! plug-at-period study, and representation export for external
//! visualization. All tabular output is CSV with fixed column order and
//! 6-decimal fixed-point floats, so equal runs produce byte-equal files.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::data::{PeriodDataset, Sample};
use crate::error::{Error, Result};
use crate::extractor::{source_path, GatingMode};
use crate::nn::{mean_bce, Matrix};
use crate::rng;
use crate::trainer::{run_incremental, RunSpec, TrainerState};

/// One evaluation row: the model after training period `period`, scored on
/// the next period's target stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub period: u32,
    pub variant: String,
    pub seed: u64,
    pub auc: f64,
    pub logloss: f64,
}

/// Area under the ROC curve via the rank statistic: sort by score, give tied
/// scores their average rank, and count positive-over-negative wins from the
/// positive rank sum. Exactly equal to pairwise win counting (the test
/// oracle), at O(n log n).
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "auc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::InvalidArgument("auc: empty input".into()));
    }
    let mut pos = 0u64;
    let mut neg = 0u64;
    for (&s, &y) in scores.iter().zip(labels) {
        if !s.is_finite() {
            return Err(Error::InvalidArgument(format!("auc: non-finite score {s}")));
        }
        match y {
            v if v == 0.0 => neg += 1,
            v if v == 1.0 => pos += 1,
            v => {
                return Err(Error::InvalidArgument(format!("auc: label {v} outside {{0,1}}")));
            }
        }
    }
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument("auc: needs both classes".into()));
    }
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share the tie group's average.
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1.0 {
                pos_rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Mean binary cross-entropy of probabilities against labels — the same
/// formula (and bit pattern) as the training loss.
pub fn logloss(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("logloss: empty input".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "logloss: {} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(mean_bce(preds, labels))
}

/// Score a model on one dataset: batched predict, then (AUC, LogLoss).
/// Chunking cannot change the result — each row's forward is independent.
pub fn evaluate_model(
    model: &Backbone,
    data: &PeriodDataset,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluate_model: empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("evaluate_model: batch_size must be ≥ 1".into()));
    }
    let mut scores = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(batch_size) {
        scores.extend(model.predict(chunk)?);
    }
    let labels = data.labels();
    Ok((auc(&scores, &labels)?, logloss(&scores, &labels)?))
}

/// The experiment grid around the full method: drop one module at a time,
/// restrict to a single source, or fall back to plain fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    Full,
    /// Keep only the given source domain.
    OnlySource(u32),
    /// Uniform 1/N weights instead of the learned gate.
    NoGating,
    /// Aligner off: no discriminator training, no confusion loss, identity
    /// mapper bypassed.
    NoAdversarial,
    /// β₁ = 0: no middle-layer distillation.
    NoMiddle,
    /// β₂ = 0: no softened-logit distillation.
    NoLogit,
    /// Incremental fine-tuning only; transfer never plugs.
    Base,
}

impl AblationVariant {
    pub fn name(&self) -> String {
        match self {
            AblationVariant::Full => "full".into(),
            AblationVariant::OnlySource(k) => format!("only-src-{k}"),
            AblationVariant::NoGating => "no-gating".into(),
            AblationVariant::NoAdversarial => "no-adversarial".into(),
            AblationVariant::NoMiddle => "no-middle".into(),
            AblationVariant::NoLogit => "no-logit".into(),
            AblationVariant::Base => "base".into(),
        }
    }

    /// The canonical experiment battery for an N-source setup: the full
    /// method, one single-source variant per source, the four module
    /// removals, and the fine-tune base.
    pub fn battery(source_domains: &[u32]) -> Vec<AblationVariant> {
        let mut v = vec![AblationVariant::Full];
        v.extend(source_domains.iter().map(|&k| AblationVariant::OnlySource(k)));
        v.extend([
            AblationVariant::NoGating,
            AblationVariant::NoAdversarial,
            AblationVariant::NoMiddle,
            AblationVariant::NoLogit,
            AblationVariant::Base,
        ]);
        v
    }

    /// Derive this variant's run spec from the full-method base spec.
    pub fn apply(&self, base: &RunSpec) -> RunSpec {
        let mut spec = base.clone();
        spec.variant = self.name();
        match *self {
            AblationVariant::Full => {}
            AblationVariant::OnlySource(k) => spec.source_domains = vec![k],
            AblationVariant::NoGating => spec.gating_mode = GatingMode::Uniform,
            AblationVariant::NoAdversarial => {
                spec.adversarial = false;
                spec.hyper.alpha = 0.0;
            }
            AblationVariant::NoMiddle => spec.hyper.kd.beta1 = 0.0,
            AblationVariant::NoLogit => spec.hyper.kd.beta2 = 0.0,
            AblationVariant::Base => {
                spec.plug_period = spec.gen.num_periods;
                spec.source_domains = Vec::new();
            }
        }
        spec
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AblationVariant::Full),
            "no-gating" => Ok(AblationVariant::NoGating),
            "no-adversarial" => Ok(AblationVariant::NoAdversarial),
            "no-middle" => Ok(AblationVariant::NoMiddle),
            "no-logit" => Ok(AblationVariant::NoLogit),
            "base" => Ok(AblationVariant::Base),
            other => match other.strip_prefix("only-src-").map(str::parse) {
                Some(Ok(k)) => Ok(AblationVariant::OnlySource(k)),
                _ => Err(Error::InvalidArgument(format!(
                    "unknown ablation variant `{other}` (expected full|only-src-K|no-gating|\
                     no-adversarial|no-middle|no-logit|base)"
                ))),
            },
        }
    }
}

/// Per-variant aggregate over seeds: mean and sample standard deviation of
/// the per-run mean metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub mean_logloss: f64,
    pub std_logloss: f64,
}

#[derive(Debug, Clone)]
pub struct AblationOutput {
    /// Every per-period row, grouped by (variant, seed) in call order.
    pub rows: Vec<MetricsRecord>,
    pub summary: Vec<SummaryRow>,
}

/// Rebase a spec onto one experiment seed. The data stream gets its own
/// derived seed, so every variant at the same experiment seed sees identical
/// data and identical model-init draws — comparisons are paired.
pub fn seeded(spec: &RunSpec, seed: u64) -> RunSpec {
    let mut s = spec.clone();
    s.seed = seed;
    s.gen.seed = rng::derive_seed(seed, "data");
    s
}

/// Run a list of specs, possibly in parallel, merging results in input
/// order. Each run owns a private state, so parallelism cannot change any
/// value.
fn run_jobs(jobs: &[RunSpec]) -> Result<Vec<Vec<MetricsRecord>>> {
    jobs.par_iter().map(|spec| run_incremental(spec, None).map(|out| out.metrics)).collect()
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.sum::<f64>() / n as f64
}

fn run_mean(rows: &[MetricsRecord]) -> (f64, f64) {
    let n = rows.len();
    (mean(rows.iter().map(|r| r.auc), n), mean(rows.iter().map(|r| r.logloss), n))
}

fn sample_std(values: &[f64], m: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// One full run per (variant, seed); the base spec is never mutated.
pub fn run_ablation(
    base: &RunSpec,
    variants: &[AblationVariant],
    seeds: &[u64],
) -> Result<AblationOutput> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("run_ablation: empty variant or seed list".into()));
    }
    let mut jobs = Vec::with_capacity(variants.len() * seeds.len());
    for variant in variants {
        let spec = variant.apply(base);
        for &seed in seeds {
            jobs.push(seeded(&spec, seed));
        }
    }
    let per_run = run_jobs(&jobs)?;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (vi, variant) in variants.iter().enumerate() {
        let runs = &per_run[vi * seeds.len()..(vi + 1) * seeds.len()];
        let mut aucs = Vec::with_capacity(seeds.len());
        let mut lls = Vec::with_capacity(seeds.len());
        for run in runs {
            let (a, l) = run_mean(run);
            aucs.push(a);
            lls.push(l);
            rows.extend(run.iter().cloned());
        }
        let mean_auc = mean(aucs.iter().copied(), aucs.len());
        let mean_logloss = mean(lls.iter().copied(), lls.len());
        summary.push(SummaryRow {
            variant: variant.name(),
            mean_auc,
            std_auc: sample_std(&aucs, mean_auc),
            mean_logloss,
            std_logloss: sample_std(&lls, mean_logloss),
        });
    }
    Ok(AblationOutput { rows, summary })
}

/// The four loss knobs a sweep can scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Tau,
    Alpha,
    Beta1,
    Beta2,
}

impl SweepParam {
    fn apply(&self, spec: &mut RunSpec, value: f64) {
        match self {
            SweepParam::Tau => spec.hyper.kd.tau = value,
            SweepParam::Alpha => spec.hyper.alpha = value,
            SweepParam::Beta1 => spec.hyper.kd.beta1 = value,
            SweepParam::Beta2 => spec.hyper.kd.beta2 = value,
        }
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tau" => Ok(SweepParam::Tau),
            "alpha" => Ok(SweepParam::Alpha),
            "beta1" => Ok(SweepParam::Beta1),
            "beta2" => Ok(SweepParam::Beta2),
            other => Err(Error::InvalidArgument(format!(
                "unknown sweep parameter `{other}` (expected tau|alpha|beta1|beta2)"
            ))),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SweepParam::Tau => "tau",
            SweepParam::Alpha => "alpha",
            SweepParam::Beta1 => "beta1",
            SweepParam::Beta2 => "beta2",
        };
        f.write_str(s)
    }
}

/// One sweep cell: per-run mean metrics at one grid value and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub seed: u64,
    pub auc: f64,
    pub logloss: f64,
}

/// One run per (grid value, seed); row count is exactly |grid|·|seeds|.
/// Grid values are validated through the spec validator, so e.g. τ ≤ 0 is
/// rejected with its config key before any run starts.
pub fn sweep(
    base: &RunSpec,
    param: SweepParam,
    grid: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("sweep: empty grid or seed list".into()));
    }
    let mut jobs = Vec::with_capacity(grid.len() * seeds.len());
    for &value in grid {
        let mut spec = base.clone();
        param.apply(&mut spec, value);
        spec.variant = format!("{param}-{value}");
        spec.validate()?;
        for &seed in seeds {
            jobs.push(seeded(&spec, seed));
        }
    }
    let per_run = run_jobs(&jobs)?;
    let mut rows = Vec::with_capacity(jobs.len());
    for (i, run) in per_run.iter().enumerate() {
        let (auc, logloss) = run_mean(run);
        rows.push(SweepRow {
            param: param.to_string(),
            value: grid[i / seeds.len()],
            seed: seeds[i % seeds.len()],
            auc,
            logloss,
        });
    }
    Ok(rows)
}

/// Per-period curves for the fine-tune base plus one run per plug period;
/// variants are named `base` and `plug-{p}`. With a shared seed, a plug-P
/// curve is bit-equal to base for every period before P.
pub fn plug_study(base: &RunSpec, plug_periods: &[u32], seeds: &[u64]) -> Result<Vec<MetricsRecord>> {
    if plug_periods.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("plug_study: empty plug or seed list".into()));
    }
    for &p in plug_periods {
        if p >= base.gen.num_periods {
            return Err(Error::config(
                "plug_study.plug_periods",
                format!("plug period {p} outside horizon 0..{}", base.gen.num_periods),
            ));
        }
    }
    let mut jobs = Vec::new();
    let base_spec = AblationVariant::Base.apply(base);
    for &seed in seeds {
        jobs.push(seeded(&base_spec, seed));
    }
    for &p in plug_periods {
        let mut spec = base.clone();
        spec.plug_period = p;
        spec.variant = format!("plug-{p}");
        for &seed in seeds {
            jobs.push(seeded(&spec, seed));
        }
    }
    Ok(run_jobs(&jobs)?.into_iter().flatten().collect())
}

/// Which side of the mapper to export.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReprStage {
    PreMapper,
    PostMapper,
}

impl FromStr for ReprStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre-mapper" => Ok(ReprStage::PreMapper),
            "post-mapper" => Ok(ReprStage::PostMapper),
            other => Err(Error::InvalidArgument(format!(
                "unknown representation stage `{other}` (expected pre-mapper|post-mapper)"
            ))),
        }
    }
}

/// Gated-ensemble representations of a (typically mixed) batch, tagged with
/// each row's domain indicator: the aggregate itself, or the mapper's output.
/// Requires the transfer modules to be attached.
pub fn export_representations(
    state: &TrainerState,
    batch: &[Sample],
    stage: ReprStage,
) -> Result<(Matrix, Vec<f64>)> {
    let transfer = state
        .transfer
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("representation export before transfer plug".into()))?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("representation export: empty batch".into()));
    }
    let sp = source_path(
        &state.sources,
        &state.target,
        &transfer.gating,
        state.gating_mode,
        &transfer.mapper,
        batch,
    )?;
    let reps = match stage {
        ReprStage::PreMapper => sp.e_agg,
        ReprStage::PostMapper => sp.e_mapped,
    };
    let d = batch.iter().map(|s| f64::from(s.domain_indicator)).collect();
    Ok((reps, d))
}

const PROBE_ITERS: usize = 500;
const PROBE_LR: f64 = 0.1;

/// Held-out accuracy of a freshly trained linear domain probe on fixed
/// representations: shuffle, split 80/20, fit a logistic regression by
/// full-batch gradient descent, and score the holdout at threshold 0.5.
/// Near-0.5 accuracy means the representations no longer carry linearly
/// decodable domain identity — the standard probing protocol, and the kind
/// of decoder a linear mapper can actually defeat.
pub fn probe_separability(reps: &Matrix, indicators: &[f64], seed: u64) -> Result<f64> {
    let n = reps.rows();
    if n != indicators.len() {
        return Err(Error::InvalidArgument(format!(
            "probe: {n} representation rows vs {} indicators",
            indicators.len()
        )));
    }
    if n < 10 {
        return Err(Error::InvalidArgument("probe: need at least 10 samples".into()));
    }
    if indicators.iter().any(|&d| d != 0.0 && d != 1.0) {
        return Err(Error::InvalidArgument("probe: indicators must be 0 or 1".into()));
    }
    let mut rng = rng::stream(seed, "probe");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let split = n * 4 / 5;
    let (train, test) = order.split_at(split);

    let width = reps.cols();
    let mut w = vec![0.0f64; width];
    let mut b = 0.0f64;
    let logit = |w: &[f64], b: f64, i: usize| -> f64 {
        let mut z = b;
        for (j, wj) in w.iter().enumerate() {
            z += wj * reps.get(i, j);
        }
        z
    };
    let inv = 1.0 / split as f64;
    for _ in 0..PROBE_ITERS {
        let mut gw = vec![0.0f64; width];
        let mut gb = 0.0;
        for &i in train {
            let p = 1.0 / (1.0 + (-logit(&w, b, i)).exp());
            let e = p - indicators[i];
            for (j, gj) in gw.iter_mut().enumerate() {
                *gj += e * reps.get(i, j);
            }
            gb += e;
        }
        for (wj, gj) in w.iter_mut().zip(&gw) {
            *wj -= PROBE_LR * gj * inv;
        }
        b -= PROBE_LR * gb * inv;
    }
    let correct = test
        .iter()
        .filter(|&&i| (logit(&w, b, i) > 0.0) == (indicators[i] == 1.0))
        .count();
    Ok(correct as f64 / test.len() as f64)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub const METRICS_HEADER: &str = "period,variant,seed,auc,logloss";

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRecord]) -> Result<()> {
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            r.period, r.variant, r.seed, r.auc, r.logloss
        ));
    }
    write_file(path, &text)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) =
        lines.next().ok_or_else(|| Error::csv(1, "empty file (header row required)"))?;
    if header != METRICS_HEADER {
        return Err(Error::csv(1, format!("header `{header}` != `{METRICS_HEADER}`")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::csv(lineno, format!("expected 5 fields, got {}", fields.len())));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::csv(lineno, format!("bad {what} `{s}`: {e}")))
        };
        rows.push(MetricsRecord {
            period: fields[0]
                .parse()
                .map_err(|e| Error::csv(lineno, format!("bad period `{}`: {e}", fields[0])))?,
            variant: fields[1].to_string(),
            seed: fields[2]
                .parse()
                .map_err(|e| Error::csv(lineno, format!("bad seed `{}`: {e}", fields[2])))?,
            auc: num(fields[3], "auc")?,
            logloss: num(fields[4], "logloss")?,
        });
    }
    Ok(rows)
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut text = String::from("variant,mean_auc,std_auc,mean_logloss,std_logloss\n");
    for r in rows {
        text.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            r.variant, r.mean_auc, r.std_auc, r.mean_logloss, r.std_logloss
        ));
    }
    write_file(path, &text)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut text = String::from("param,value,seed,auc,logloss\n");
    for r in rows {
        text.push_str(&format!(
            "{},{:.6},{},{:.6},{:.6}\n",
            r.param, r.value, r.seed, r.auc, r.logloss
        ));
    }
    write_file(path, &text)
}

/// Representation CSV: `d,dim0..dimK`, one row per sample.
pub fn write_representations_csv(path: &Path, reps: &Matrix, indicators: &[f64]) -> Result<()> {
    if reps.rows() != indicators.len() {
        return Err(Error::InvalidArgument(format!(
            "representation csv: {} rows vs {} indicators",
            reps.rows(),
            indicators.len()
        )));
    }
    let mut text = String::from("d");
    for k in 0..reps.cols() {
        text.push_str(&format!(",dim{k}"));
    }
    text.push('\n');
    for i in 0..reps.rows() {
        text.push_str(&format!("{}", indicators[i] as u8));
        for v in reps.row(i) {
            text.push_str(&format!(",{v:.6}"));
        }
        text.push('\n');
    }
    write_file(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_backbone, BackboneKind, CategoricalField, FeatureSchema};
    use crate::data::{build_mixed, generate_period_with, GenConfig, GroundTruth, TARGET_DOMAIN};
    use crate::trainer::{self, AdvRoute, HyperParams};
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    /// Pairwise win counting: every (positive, negative) pair scores 1 for a
    /// win, 1/2 for a tie.
    fn auc_brute_force(scores: &[f64], labels: &[f64]) -> f64 {
        let mut wins = 0u64;
        let mut ties = 0u64;
        let mut pairs = 0u64;
        for (i, (&si, &yi)) in scores.iter().zip(labels).enumerate() {
            if yi != 1.0 {
                continue;
            }
            for (j, (&sj, &yj)) in scores.iter().zip(labels).enumerate() {
                if i == j || yj != 0.0 {
                    continue;
                }
                pairs += 1;
                if si > sj {
                    wins += 1;
                } else if si == sj {
                    ties += 1;
                }
            }
        }
        (wins as f64 + 0.5 * ties as f64) / pairs as f64
    }

    #[test]
    fn auc_handles_the_textbook_cases() {
        assert_eq!(auc(&[0.9, 0.1], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.9], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(auc(&[0.4, 0.4, 0.4, 0.4], &[1.0, 0.0, 1.0, 0.0]).unwrap(), 0.5);
        assert!(auc(&[], &[]).is_err());
        assert!(auc(&[0.5], &[1.0]).is_err(), "single class");
        assert!(auc(&[0.5, 0.2], &[1.0, 1.0]).is_err(), "single class");
        assert!(auc(&[0.5, f64::NAN], &[1.0, 0.0]).is_err());
        assert!(auc(&[0.5, 0.4], &[1.0, 0.5]).is_err(), "non-binary label");
        assert!(auc(&[0.5], &[1.0, 0.0]).is_err(), "length mismatch");
    }

    #[test]
    fn auc_matches_pairwise_oracle_on_200_instances() {
        let mut rng = rng::stream(41, "auc-oracle");
        for case in 0..200 {
            let n = rng.gen_range(2..=50);
            // Quantized scores force plenty of exact ties.
            let scores: Vec<f64> =
                (0..n).map(|_| f64::from(rng.gen_range(0..16u32)) / 16.0).collect();
            let mut labels: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..2u32))).collect();
            labels[0] = 1.0;
            labels[n - 1] = 0.0;
            let fast = auc(&scores, &labels).unwrap();
            let slow = auc_brute_force(&scores, &labels);
            assert_eq!(fast.to_bits(), slow.to_bits(), "case {case}: {fast} vs {slow}");
        }
    }

    #[test]
    fn auc_invariances_hold() {
        let mut rng = rng::stream(42, "auc-invariance");
        for _ in 0..50 {
            let n = rng.gen_range(4..=40);
            // Multiples of 1/64: +10 and ×2 stay exact, preserving ties.
            let scores: Vec<f64> =
                (0..n).map(|_| f64::from(rng.gen_range(0..64u32)) / 64.0).collect();
            let mut labels: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..2u32))).collect();
            labels[0] = 1.0;
            labels[1] = 0.0;
            let base = auc(&scores, &labels).unwrap();
            let shifted: Vec<f64> = scores.iter().map(|s| 2.0 * s + 10.0).collect();
            assert_eq!(auc(&shifted, &labels).unwrap().to_bits(), base.to_bits());
            // Complement flips the ranking.
            let flipped: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
            assert!((auc(&flipped, &labels).unwrap() - (1.0 - base)).abs() < 1e-12);
        }
    }

    #[test]
    fn logloss_matches_training_ce_bitwise() {
        let preds = [1.0 - 1e-15, 1e-15, 0.73, 0.21, 0.5];
        let labels = [1.0, 0.0, 1.0, 0.0, 1.0];
        assert!(logloss(&preds[..2], &labels[..2]).unwrap() < 1e-10);
        assert!((logloss(&[0.5; 3], &[1.0, 0.0, 1.0]).unwrap() - (2f64).ln()).abs() < 1e-15);
        assert!(logloss(&[], &[]).is_err());
        let a = logloss(&preds, &labels).unwrap();
        let b = trainer::ce_loss(&preds, &labels).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    fn tiny_schema() -> FeatureSchema {
        FeatureSchema {
            categorical: vec![
                CategoricalField { name: "c0".into(), cardinality: 7 },
                CategoricalField { name: "c1".into(), cardinality: 5 },
            ],
            dense: vec!["n0".into(), "n1".into()],
            embedding_dim: 3,
        }
    }

    fn tiny_base_spec() -> RunSpec {
        let mut hyper = HyperParams::desk_default(2);
        hyper.batch_size = 32;
        RunSpec {
            gen: GenConfig {
                num_domains: 3,
                num_periods: 3,
                samples_per_domain: 180,
                target_fraction: 0.5,
                invariant_strength: 1.0,
                specific_strength: 0.5,
                drift_magnitude: 0.02,
                seed: 0,
            },
            schema: tiny_schema(),
            kind: BackboneKind::Dnn,
            trunk_widths: vec![10, 8],
            source_trunk_widths: None,
            hyper,
            plug_period: 1,
            gating_mode: GatingMode::Learned,
            adversarial: true,
            adv_route: AdvRoute::SourceEnsemble,
            source_domains: vec![1, 2],
            seed: 0,
            variant: "full".into(),
        }
    }

    #[test]
    fn evaluate_model_is_chunking_invariant() {
        let spec = tiny_base_spec();
        let truth = GroundTruth::build(&spec.schema, &spec.gen);
        let data = generate_period_with(&spec.schema, &spec.gen, &truth, 1, 0).unwrap();
        let model = build_backbone(spec.kind, &spec.schema, &spec.trunk_widths, 9).unwrap();
        let (a7, l7) = evaluate_model(&model, &data, 7).unwrap();
        let (a_all, l_all) = evaluate_model(&model, &data, data.len()).unwrap();
        assert_eq!(a7.to_bits(), a_all.to_bits());
        assert_eq!(l7.to_bits(), l_all.to_bits());
        assert!(evaluate_model(&model, &data, 0).is_err());
    }

    #[test]
    fn variants_map_to_the_right_overrides() {
        let base = tiny_base_spec();
        assert_eq!(AblationVariant::OnlySource(2).name(), "only-src-2");
        assert_eq!(AblationVariant::OnlySource(1).apply(&base).source_domains, vec![1]);
        assert_eq!(AblationVariant::NoGating.apply(&base).gating_mode, GatingMode::Uniform);
        let na = AblationVariant::NoAdversarial.apply(&base);
        assert!(!na.adversarial);
        assert_eq!(na.hyper.alpha, 0.0);
        assert_eq!(AblationVariant::NoMiddle.apply(&base).hyper.kd.beta1, 0.0);
        assert_eq!(AblationVariant::NoLogit.apply(&base).hyper.kd.beta2, 0.0);
        let b = AblationVariant::Base.apply(&base);
        assert_eq!(b.plug_period, base.gen.num_periods);
        assert!(b.source_domains.is_empty());
        assert!(b.validate().is_ok());
        assert_eq!(AblationVariant::Full.apply(&base), {
            let mut f = base.clone();
            f.variant = "full".into();
            f
        });

        // Name strings round-trip through the parser.
        for v in AblationVariant::battery(&[1, 2]) {
            assert_eq!(v.name().parse::<AblationVariant>().unwrap(), v);
        }
        assert!("only-src-x".parse::<AblationVariant>().is_err());
        assert!("everything".parse::<AblationVariant>().is_err());
    }

    #[test]
    fn ablation_runner_leaves_base_untouched_and_reproduces_base_variant() {
        let base = tiny_base_spec();
        let before = base.clone();
        let out = run_ablation(&base, &[AblationVariant::Full, AblationVariant::Base], &[5, 6])
            .unwrap();
        assert_eq!(base, before, "runner mutated the base spec");
        // 2 variants × 2 seeds × (periods − 1) evaluation rows.
        assert_eq!(out.rows.len(), 2 * 2 * (base.gen.num_periods - 1) as usize);
        assert_eq!(out.summary.len(), 2);
        assert!(out.summary.iter().all(|s| s.std_auc >= 0.0));

        // The base-variant rows are exactly a direct fine-tune-only run.
        let direct =
            run_incremental(&seeded(&AblationVariant::Base.apply(&base), 5), None).unwrap();
        let from_ablation: Vec<_> =
            out.rows.iter().filter(|r| r.variant == "base" && r.seed == 5).collect();
        assert_eq!(from_ablation.len(), direct.metrics.len());
        for (a, d) in from_ablation.iter().zip(&direct.metrics) {
            assert_eq!(a.auc.to_bits(), d.auc.to_bits());
            assert_eq!(a.logloss.to_bits(), d.logloss.to_bits());
        }
    }

    #[test]
    fn sweep_emits_grid_times_seeds_rows_and_rejects_bad_params() {
        let base = tiny_base_spec();
        let rows = sweep(&base, SweepParam::Tau, &[1.0, 10.0], &[3, 4, 5]).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.param == "tau"));
        assert_eq!(rows[0].value, 1.0);
        assert_eq!(rows[0].seed, 3);
        assert_eq!(rows[5].value, 10.0);
        assert_eq!(rows[5].seed, 5);

        assert!("tau".parse::<SweepParam>().is_ok());
        assert!("gamma".parse::<SweepParam>().is_err());
        let err = sweep(&base, SweepParam::Tau, &[-1.0], &[3]).unwrap_err().to_string();
        assert!(err.contains("hyper.tau"), "{err}");
    }

    #[test]
    fn alpha_zero_sweep_row_equals_no_adversarial_variant() {
        let base = tiny_base_spec();
        let rows = sweep(&base, SweepParam::Alpha, &[0.0], &[11]).unwrap();
        let na = run_incremental(&seeded(&AblationVariant::NoAdversarial.apply(&base), 11), None)
            .unwrap();
        let (mean_auc, mean_ll) = run_mean(&na.metrics);
        assert_eq!(rows[0].auc.to_bits(), mean_auc.to_bits());
        assert_eq!(rows[0].logloss.to_bits(), mean_ll.to_bits());
    }

    #[test]
    fn plug_study_prefixes_match_base() {
        let base = tiny_base_spec();
        let rows = plug_study(&base, &[1, 2], &[8]).unwrap();
        let variants: Vec<_> = rows.iter().map(|r| r.variant.as_str()).collect();
        assert!(variants.contains(&"base"));
        assert!(variants.contains(&"plug-1"));
        assert!(variants.contains(&"plug-2"));
        for plug in [1u32, 2] {
            let name = format!("plug-{plug}");
            for r in rows.iter().filter(|r| r.variant == name && r.period < plug) {
                let b = rows
                    .iter()
                    .find(|x| x.variant == "base" && x.period == r.period && x.seed == r.seed)
                    .unwrap();
                assert_eq!(r.auc.to_bits(), b.auc.to_bits(), "{name} period {}", r.period);
                assert_eq!(r.logloss.to_bits(), b.logloss.to_bits());
            }
        }
        assert!(plug_study(&base, &[99], &[8]).is_err(), "plug outside horizon");
    }

    #[test]
    fn representation_export_tags_rows_and_respects_the_mapper() {
        let spec = tiny_base_spec();
        let truth = GroundTruth::build(&spec.schema, &spec.gen);
        let mut state = trainer::TrainerState::new(&spec).unwrap();
        let target = generate_period_with(&spec.schema, &spec.gen, &truth, TARGET_DOMAIN, 0).unwrap();
        let s1 = generate_period_with(&spec.schema, &spec.gen, &truth, 1, 0).unwrap();
        let s2 = generate_period_with(&spec.schema, &spec.gen, &truth, 2, 0).unwrap();
        let mixed = build_mixed(&[&s1, &s2], &target, 3).unwrap();
        let batch = &mixed.samples[..24];

        assert!(export_representations(&state, batch, ReprStage::PreMapper).is_err());
        state.period = spec.plug_period;
        state.plug_if_due().unwrap();

        let (pre, d) = export_representations(&state, batch, ReprStage::PreMapper).unwrap();
        let (post, d2) = export_representations(&state, batch, ReprStage::PostMapper).unwrap();
        assert_eq!(pre.rows(), batch.len());
        assert_eq!(d, d2);
        let expect: Vec<f64> = batch.iter().map(|s| f64::from(s.domain_indicator)).collect();
        assert_eq!(d, expect);
        // Post-mapper is the mapper applied to pre-mapper.
        let mapped = state.transfer.as_ref().unwrap().mapper.map(&pre).unwrap();
        for (a, b) in mapped.data().iter().zip(post.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!("pre-mapper".parse::<ReprStage>().is_ok());
        assert!("sideways".parse::<ReprStage>().is_err());
    }

    #[test]
    fn probe_separates_planted_blobs_but_not_identical_ones() {
        let mut rng = rng::stream(17, "probe-data");
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = 400;
        let dim = 6;
        let mut separable = Matrix::zeros(n, dim);
        let mut identical = Matrix::zeros(n, dim);
        let mut d = Vec::with_capacity(n);
        for i in 0..n {
            let di = f64::from(i as u32 % 2);
            d.push(di);
            for k in 0..dim {
                let v: f64 = normal.sample(&mut rng);
                // Blobs offset by 2σ along every axis are easily separable.
                separable.row_mut(i)[k] = v + 2.0 * di;
                identical.row_mut(i)[k] = v;
            }
        }
        let acc_sep = probe_separability(&separable, &d, 7).unwrap();
        assert!(acc_sep > 0.9, "separable blobs only reached {acc_sep}");
        let acc_same = probe_separability(&identical, &d, 7).unwrap();
        assert!((acc_same - 0.5).abs() < 0.15, "identical blobs reached {acc_same}");
        // Deterministic under a fixed seed.
        assert_eq!(probe_separability(&separable, &d, 7).unwrap(), acc_sep);
        assert!(probe_separability(&separable, &d[..10], 7).is_err());
    }

    #[test]
    fn metrics_csv_round_trips_byte_identically() {
        let rows = vec![
            MetricsRecord { period: 0, variant: "full".into(), seed: 1, auc: 0.7123456789, logloss: 0.4987654321 },
            MetricsRecord { period: 1, variant: "base".into(), seed: 2, auc: 0.5, logloss: std::f64::consts::LN_2 },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("m1.csv");
        let p2 = dir.path().join("m2.csv");
        write_metrics_csv(&p1, &rows).unwrap();
        let read = read_metrics_csv(&p1).unwrap();
        assert_eq!(read.len(), 2);
        assert_eq!(read[0].variant, "full");
        write_metrics_csv(&p2, &read).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "wrong,header\n").unwrap();
        assert!(read_metrics_csv(&bad).is_err());
        std::fs::write(&bad, format!("{METRICS_HEADER}\n0,full,1,not-a-number,0.5\n")).unwrap();
        let err = read_metrics_csv(&bad).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn aux_csv_writers_emit_fixed_headers() {
        let dir = tempfile::tempdir().unwrap();
        let sp = dir.path().join("summary.csv");
        write_summary_csv(
            &sp,
            &[SummaryRow {
                variant: "full".into(),
                mean_auc: 0.75,
                std_auc: 0.01,
                mean_logloss: 0.5,
                std_logloss: 0.002,
            }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&sp).unwrap();
        assert!(text.starts_with("variant,mean_auc,std_auc,mean_logloss,std_logloss\n"));
        assert!(text.contains("full,0.750000,0.010000,0.500000,0.002000"));

        let wp = dir.path().join("sweep.csv");
        write_sweep_csv(
            &wp,
            &[SweepRow { param: "tau".into(), value: 10.0, seed: 3, auc: 0.7, logloss: 0.5 }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&wp).unwrap();
        assert!(text.starts_with("param,value,seed,auc,logloss\n"));
        assert!(text.contains("tau,10.000000,3,0.700000,0.500000"));

        let rp = dir.path().join("reprs.csv");
        let reps = Matrix::from_vec(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        write_representations_csv(&rp, &reps, &[1.0, 0.0]).unwrap();
        let text = std::fs::read_to_string(&rp).unwrap();
        assert_eq!(
            text,
            "d,dim0,dim1,dim2\n1,0.100000,0.200000,0.300000\n0,0.400000,0.500000,0.600000\n"
        );
        assert!(write_representations_csv(&rp, &reps, &[1.0]).is_err());
    }
}
