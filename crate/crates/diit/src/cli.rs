//! Command-line orchestration. Every subcommand reads one JSON config
//! (defaults fill anything omitted), resolves it, and writes its artifacts
//! under `<out>/<run id>/`, where the run id hashes the resolved config and
//! seed. Identical invocations therefore land in the same directory with
//! byte-identical contents; nothing is ever read back mutated.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::backbone::Backbone;
use crate::config::{echo_config, parse_config, ExperimentConfig};
use crate::data::{build_mixed, generate_period_with, write_csv, GroundTruth, TARGET_DOMAIN};
use crate::error::{Error, Result};
use crate::eval::{
    self, export_representations, plug_study, run_ablation, sweep, AblationVariant,
    MetricsRecord, ReprStage, SweepParam,
};
use crate::rng;
use crate::trainer::{
    fine_tune_period, run_incremental, LossRecord, RunSpec, TrainerState,
};

#[derive(Debug, Parser)]
#[command(name = "diit", version, about = "Incremental cross-domain CTR training lab")]
pub struct Cli {
    /// Experiment config (JSON). Omitted fields — or the whole flag — fall
    /// back to the desk-scale defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override the experiment seed (multi-seed commands run only this one).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Override the output root directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Period to operate on for evaluate / export-reprs (default: the last
    /// period with a next-period stream to score against).
    #[arg(long, global = true)]
    pub period: Option<u32>,

    /// Worker threads for multi-run commands (0 = one per core).
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Write every domain's per-period stream as CSV under data/.
    GenerateData,
    /// Train only the per-domain source models, checkpointing each period.
    TrainSources,
    /// Run the full incremental transfer training with checkpoints and
    /// per-period metrics.
    TrainDiit,
    /// Score a trained target checkpoint on the following period's stream.
    Evaluate,
    /// Run the ablation battery over the configured variants and seeds.
    Ablate,
    /// Scan one loss knob over the configured grid.
    Sweep,
    /// Compare attaching the transfer modules at different periods.
    PlugStudy,
    /// Export pre- and post-mapper representations of a mixed batch.
    ExportReprs,
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => parse_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(&cfg, cli.command, cli.period))
}

fn dispatch(cfg: &ExperimentConfig, command: Command, period: Option<u32>) -> Result<()> {
    let spec = cfg.resolve()?;
    let run_dir = cfg.out.join(cfg.run_id(cfg.seed));
    std::fs::create_dir_all(&run_dir)?;
    echo_config(cfg, &run_dir)?;
    println!("run {} -> {}", cfg.run_id(cfg.seed), run_dir.display());
    match command {
        Command::GenerateData => generate_data(&spec, &run_dir),
        Command::TrainSources => train_sources(&spec, &run_dir),
        Command::TrainDiit => train_diit(&spec, &run_dir),
        Command::Evaluate => evaluate(&spec, &run_dir, period),
        Command::Ablate => ablate(cfg, &spec, &run_dir),
        Command::Sweep => run_sweep(cfg, &spec, &run_dir),
        Command::PlugStudy => run_plug_study(cfg, &spec, &run_dir),
        Command::ExportReprs => export_reprs(&spec, &run_dir, period),
    }
}

fn generate_data(spec: &RunSpec, run_dir: &Path) -> Result<()> {
    let truth = GroundTruth::build(&spec.schema, &spec.gen);
    for d in 0..spec.gen.num_domains {
        for t in 0..spec.gen.num_periods {
            let ds = generate_period_with(&spec.schema, &spec.gen, &truth, d, t)?;
            write_csv(&ds, &run_dir.join(format!("data/domain-{d}/period-{t}.csv")))?;
        }
    }
    println!("data: {} domains x {} periods under data/", spec.gen.num_domains, spec.gen.num_periods);
    Ok(())
}

/// Source-model training alone, on the same named streams the full run uses:
/// the checkpoints written here are bitwise equal to a full run's.
fn train_sources(spec: &RunSpec, run_dir: &Path) -> Result<()> {
    if spec.source_domains.is_empty() {
        return Err(Error::InvalidArgument("train-sources: no source domains configured".into()));
    }
    let truth = GroundTruth::build(&spec.schema, &spec.gen);
    let mut state = TrainerState::new(spec)?;
    let ckpt = run_dir.join("checkpoints");
    for t in 0..spec.gen.num_periods {
        for (i, &d) in state.source_domains.clone().iter().enumerate() {
            let data = generate_period_with(&spec.schema, &spec.gen, &truth, d, t)?;
            let mut shuffle = rng::stream(spec.seed, &format!("source-shuffle/{d}/{t}"));
            fine_tune_period(
                &mut state.sources[i],
                &mut state.opt_sources[i],
                &data,
                &spec.hyper,
                &mut shuffle,
                t,
            )?;
            state.sources[i].save(&ckpt.join(format!("source-{d}-period-{t}.json")))?;
        }
    }
    println!("sources: {} models x {} periods under checkpoints/", spec.source_domains.len(), spec.gen.num_periods);
    Ok(())
}

fn write_losses_csv(path: &Path, losses: &[LossRecord]) -> Result<()> {
    let mut text = String::from("period,ce,adv1,adv2,middle,logit\n");
    for l in losses {
        text.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            l.period, l.ce, l.adv1, l.adv2, l.middle, l.logit
        ));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn train_diit(spec: &RunSpec, run_dir: &Path) -> Result<()> {
    let out = run_incremental(spec, Some(&run_dir.join("checkpoints")))?;
    eval::write_metrics_csv(&run_dir.join("metrics.csv"), &out.metrics)?;
    write_losses_csv(&run_dir.join("losses.csv"), &out.losses)?;
    for m in &out.metrics {
        println!("period {} auc {:.6} logloss {:.6}", m.period, m.auc, m.logloss);
    }
    println!("training: metrics.csv, losses.csv, checkpoints/");
    Ok(())
}

/// Default scoring period: the last one whose next-period stream exists.
fn scoring_period(spec: &RunSpec, period: Option<u32>) -> Result<u32> {
    let last = spec.gen.num_periods.saturating_sub(2);
    let p = period.unwrap_or(last);
    if p + 1 >= spec.gen.num_periods {
        return Err(Error::InvalidArgument(format!(
            "period {p} has no following stream to score against (periods end at {})",
            spec.gen.num_periods - 1
        )));
    }
    Ok(p)
}

fn evaluate(spec: &RunSpec, run_dir: &Path, period: Option<u32>) -> Result<()> {
    let p = scoring_period(spec, period)?;
    let model = Backbone::load(&run_dir.join(format!("checkpoints/target-period-{p}.json")))?;
    let truth = GroundTruth::build(&spec.schema, &spec.gen);
    let data = generate_period_with(&spec.schema, &spec.gen, &truth, TARGET_DOMAIN, p + 1)?;
    let (auc, logloss) = eval::evaluate_model(&model, &data, spec.hyper.batch_size)?;
    let row = MetricsRecord {
        period: p,
        variant: spec.variant.clone(),
        seed: spec.seed,
        auc,
        logloss,
    };
    eval::write_metrics_csv(&run_dir.join("evaluate.csv"), &[row])?;
    println!("period {p} auc {auc:.6} logloss {logloss:.6} -> evaluate.csv");
    Ok(())
}

fn ablate(cfg: &ExperimentConfig, spec: &RunSpec, run_dir: &Path) -> Result<()> {
    let variants: Vec<AblationVariant> = cfg
        .ablation_variants
        .iter()
        .map(|name| name.parse())
        .collect::<Result<_>>()?;
    let out = run_ablation(spec, &variants, &cfg.seeds)?;
    eval::write_metrics_csv(&run_dir.join("ablation-metrics.csv"), &out.rows)?;
    eval::write_summary_csv(&run_dir.join("ablation-summary.csv"), &out.summary)?;
    for s in &out.summary {
        println!(
            "{:<16} auc {:.6} ± {:.6}  logloss {:.6} ± {:.6}",
            s.variant, s.mean_auc, s.std_auc, s.mean_logloss, s.std_logloss
        );
    }
    println!("ablation: ablation-metrics.csv, ablation-summary.csv");
    Ok(())
}

fn run_sweep(cfg: &ExperimentConfig, spec: &RunSpec, run_dir: &Path) -> Result<()> {
    let param: SweepParam = cfg.sweep.param.parse()?;
    let rows = sweep(spec, param, &cfg.sweep.grid, &cfg.seeds)?;
    eval::write_sweep_csv(&run_dir.join("sweep.csv"), &rows)?;
    println!("sweep: {} rows -> sweep.csv", rows.len());
    Ok(())
}

fn run_plug_study(cfg: &ExperimentConfig, spec: &RunSpec, run_dir: &Path) -> Result<()> {
    let rows = plug_study(spec, &cfg.plug_study.plug_periods, &cfg.seeds)?;
    eval::write_metrics_csv(&run_dir.join("plug-study.csv"), &rows)?;
    println!("plug study: {} rows -> plug-study.csv", rows.len());
    Ok(())
}

/// How many mixed rows the representation export keeps: plenty for an
/// external embedding plot, small enough to stay instant.
const REPR_ROWS: usize = 1024;

fn export_reprs(spec: &RunSpec, run_dir: &Path, period: Option<u32>) -> Result<()> {
    let p = period.unwrap_or(spec.gen.num_periods.saturating_sub(1));
    let state = TrainerState::load(&run_dir.join(format!("checkpoints/state-period-{p}.json")))?;
    let truth = GroundTruth::build(&spec.schema, &spec.gen);
    let target = generate_period_with(&spec.schema, &spec.gen, &truth, TARGET_DOMAIN, p)?;
    let mut sources = Vec::new();
    for &d in &state.source_domains {
        sources.push(generate_period_with(&spec.schema, &spec.gen, &truth, d, p)?);
    }
    let mixed = build_mixed(
        &sources.iter().collect::<Vec<_>>(),
        &target,
        rng::derive_seed(spec.seed, &format!("mixed-build/{p}")),
    )?;
    let batch = &mixed.samples[..mixed.len().min(REPR_ROWS)];
    for (stage, name) in
        [(ReprStage::PreMapper, "reprs-pre.csv"), (ReprStage::PostMapper, "reprs-post.csv")]
    {
        let (reps, d) = export_representations(&state, batch, stage)?;
        eval::write_representations_csv(&run_dir.join(name), &reps, &d)?;
    }
    println!("representations: {} rows -> reprs-pre.csv, reprs-post.csv", batch.len());
    Ok(())
}
