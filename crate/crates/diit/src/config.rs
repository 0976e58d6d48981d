//! On-disk experiment configuration. A JSON file maps onto
//! [`ExperimentConfig`]; every field has a default, so `{}` is a complete
//! desk-scale experiment. Parsing validates everything up front and rejects
//! unknown keys, and [`ExperimentConfig::resolved`] fills the remaining
//! optional fields so the echoed config is a serialization fixed point.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneKind, FeatureSchema};
use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::extractor::GatingMode;
use crate::migrator::KDConfig;
use crate::nn::AdamConfig;
use crate::trainer::{AdvRoute, HyperParams, RunSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: BackboneKind,
    pub trunk_widths: Vec<usize>,
    /// `None`: source models share the target's trunk widths.
    pub source_trunk_widths: Option<Vec<usize>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: BackboneKind::Dnn,
            trunk_widths: vec![64, 32],
            source_trunk_widths: None,
        }
    }
}

fn d_lambda() -> f64 {
    1.0
}
fn d_alpha() -> f64 {
    0.05
}
fn d_beta() -> f64 {
    0.1
}
fn d_tau() -> f64 {
    10.0
}
fn d_lr() -> f64 {
    0.001
}
fn d_batch() -> usize {
    256
}
fn d_epochs() -> usize {
    1
}

/// Flat hyper-parameter block; `spots: None` resolves to the last hidden
/// layer only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperConfig {
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_beta")]
    pub beta1: f64,
    #[serde(default = "d_beta")]
    pub beta2: f64,
    #[serde(default = "d_tau")]
    pub tau: f64,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs_per_period: usize,
    #[serde(default)]
    pub spots: Option<Vec<usize>>,
}

impl Default for HyperConfig {
    fn default() -> Self {
        HyperConfig {
            lambda: d_lambda(),
            alpha: d_alpha(),
            beta1: d_beta(),
            beta2: d_beta(),
            tau: d_tau(),
            lr: d_lr(),
            batch_size: d_batch(),
            epochs_per_period: d_epochs(),
            spots: None,
        }
    }
}

fn d_sweep_param() -> String {
    "tau".into()
}
fn d_sweep_grid() -> Vec<f64> {
    vec![1.0, 10.0, 20.0, 30.0, 40.0, 50.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "d_sweep_param")]
    pub param: String,
    #[serde(default = "d_sweep_grid")]
    pub grid: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { param: d_sweep_param(), grid: d_sweep_grid() }
    }
}

fn d_plug_periods() -> Vec<u32> {
    // Mid-run and late-run plug points on the default 8-period horizon.
    vec![3, 6]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlugStudyConfig {
    #[serde(default = "d_plug_periods")]
    pub plug_periods: Vec<u32>,
}

impl Default for PlugStudyConfig {
    fn default() -> Self {
        PlugStudyConfig { plug_periods: d_plug_periods() }
    }
}

fn d_schema() -> FeatureSchema {
    FeatureSchema::desk_default()
}
fn d_plug_period() -> u32 {
    1
}
fn d_gating() -> GatingMode {
    GatingMode::Learned
}
fn d_true() -> bool {
    true
}
fn d_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}
fn d_out() -> PathBuf {
    PathBuf::from("runs")
}
fn d_variants() -> Vec<String> {
    ["full", "only-src-1", "only-src-2", "no-gating", "no-adversarial", "no-middle", "no-logit", "base"]
        .map(String::from)
        .to_vec()
}

/// The complete experiment description. Single-run commands use `seed`;
/// multi-run commands (ablate, sweep, plug-study) use `seeds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub gen: GenConfig,
    #[serde(default = "d_schema")]
    pub schema: FeatureSchema,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub hyper: HyperConfig,
    /// First period with transfer attached.
    #[serde(default = "d_plug_period")]
    pub plug_period: u32,
    #[serde(default = "d_gating")]
    pub gating_mode: GatingMode,
    #[serde(default = "d_true")]
    pub adversarial: bool,
    #[serde(default)]
    pub adv_route: AdvRoute,
    /// `None`: every non-target domain is a source.
    #[serde(default)]
    pub source_domains: Option<Vec<u32>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    /// Root output directory; each run writes under `<out>/<run id>/`.
    #[serde(default = "d_out")]
    pub out: PathBuf,
    #[serde(default = "d_variants")]
    pub ablation_variants: Vec<String>,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub plug_study: PlugStudyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config is the default")
    }
}

impl ExperimentConfig {
    fn resolved_spots(&self) -> Vec<usize> {
        self.hyper
            .spots
            .clone()
            .unwrap_or_else(|| vec![self.model.trunk_widths.len().saturating_sub(1)])
    }

    fn resolved_sources(&self) -> Vec<u32> {
        self.source_domains.clone().unwrap_or_else(|| (1..self.gen.num_domains).collect())
    }

    /// The validated single-run spec for the full method at `self.seed`.
    pub fn resolve(&self) -> Result<RunSpec> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        let hyper = HyperParams {
            lambda: self.hyper.lambda,
            alpha: self.hyper.alpha,
            kd: KDConfig {
                tau: self.hyper.tau,
                beta1: self.hyper.beta1,
                beta2: self.hyper.beta2,
                spots: self.resolved_spots(),
            },
            optimizer: AdamConfig { lr: self.hyper.lr, ..AdamConfig::default() },
            batch_size: self.hyper.batch_size,
            epochs_per_period: self.hyper.epochs_per_period,
        };
        let spec = RunSpec {
            gen: self.gen.clone(),
            schema: self.schema.clone(),
            kind: self.model.kind,
            trunk_widths: self.model.trunk_widths.clone(),
            source_trunk_widths: self.model.source_trunk_widths.clone(),
            hyper,
            plug_period: self.plug_period,
            gating_mode: self.gating_mode,
            adversarial: self.adversarial,
            adv_route: self.adv_route,
            source_domains: self.resolved_sources(),
            seed: self.seed,
            variant: "full".into(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A copy with every optional field filled in. `parse ∘ serialize` is the
    /// identity on resolved configs, which makes the echoed file a faithful
    /// re-runnable record.
    pub fn resolved(&self) -> ExperimentConfig {
        let mut cfg = self.clone();
        cfg.hyper.spots = Some(self.resolved_spots());
        cfg.source_domains = Some(self.resolved_sources());
        cfg
    }

    /// Stable run identity: hash of the resolved config and the effective
    /// seed, used as an output subdirectory so distinct runs never collide.
    /// The output root is excluded — moving outputs elsewhere does not
    /// change what was run.
    pub fn run_id(&self, seed: u64) -> String {
        let mut canon = self.resolved();
        canon.out = PathBuf::new();
        let json = serde_json::to_string(&canon).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hasher.update(seed.to_le_bytes());
        hex::encode(&hasher.finalize()[..8])
    }
}

/// Read and fully validate a config file; any JSON or range problem is
/// reported before a caller does any work.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|source| Error::Json { path: path.display().to_string(), source })?;
    cfg.resolve()?;
    Ok(cfg)
}

/// Write the resolved config next to a run's outputs.
pub fn echo_config(cfg: &ExperimentConfig, dir: &Path) -> Result<PathBuf> {
    let path = dir.join("config.json");
    crate::io::save_json(&path, &cfg.resolved())?;
    Ok(path)
}
