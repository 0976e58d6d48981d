//! Synthetic multi-domain, multi-period click logs with planted structure,
//! the 1:1 source/target mixed set, and CSV interchange.
//!
//! Labels follow a logistic ground-truth model over a seeded latent embedding
//! of the features: an invariant term shared by all domains, a per-domain
//! term, and a drift term growing with the period. Feature distributions are
//! tilted per domain in proportion to the specific-signal strength, so a
//! domain gap exists in the inputs themselves (not only in the labels); the
//! adversarial-alignment checks depend on that covariate shift.

use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureSchema;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Matrix};
use crate::rng;

/// Domain id 0 is the target domain; 1..N are sources.
pub const TARGET_DOMAIN: u32 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub categorical: Vec<usize>,
    pub dense: Vec<f64>,
    pub label: u8,
    pub domain_id: u32,
    /// Domain indicator d: 1 when the sample comes from the target domain.
    pub domain_indicator: u8,
    pub period: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodDataset {
    pub samples: Vec<Sample>,
    /// None for mixed datasets, which span domains by construction.
    pub domain_id: Option<u32>,
    pub period: u32,
    pub schema: FeatureSchema,
}

impl PeriodDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.label as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    /// Total domain count including the target (so N sources = num_domains − 1).
    pub num_domains: u32,
    pub num_periods: u32,
    /// Per-period sample count for each source domain.
    pub samples_per_domain: usize,
    /// The target stream carries `round(samples_per_domain · target_fraction)`
    /// samples per period; the target is the data-poor domain by design.
    pub target_fraction: f64,
    pub invariant_strength: f64,
    pub specific_strength: f64,
    pub drift_magnitude: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_domains: 3,
            num_periods: 8,
            samples_per_domain: 10_000,
            target_fraction: 0.15,
            invariant_strength: 3.0,
            specific_strength: 0.5,
            drift_magnitude: 0.5,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains < 2 {
            return Err(Error::config("gen.num_domains", "need at least one source and the target"));
        }
        if self.num_periods == 0 {
            return Err(Error::config("gen.num_periods", "must be ≥ 1"));
        }
        if self.samples_per_domain == 0 {
            return Err(Error::config("gen.samples_per_domain", "must be ≥ 1"));
        }
        if !(self.target_fraction > 0.0 && self.target_fraction <= 1.0) {
            return Err(Error::config("gen.target_fraction", "must be in (0, 1]"));
        }
        for (key, v) in [
            ("gen.invariant_strength", self.invariant_strength),
            ("gen.specific_strength", self.specific_strength),
            ("gen.drift_magnitude", self.drift_magnitude),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be a finite value ≥ 0"));
            }
        }
        Ok(())
    }

    pub fn samples_for_domain(&self, domain_id: u32) -> usize {
        if domain_id == TARGET_DOMAIN {
            ((self.samples_per_domain as f64 * self.target_fraction).round() as usize).max(1)
        } else {
            self.samples_per_domain
        }
    }
}

/// Latent width of the ground-truth feature embedding (categorical part).
const LATENT_DIM: usize = 6;
/// Couplings from specific-signal strength to the per-domain covariate tilt.
const CAT_TILT_COUPLING: f64 = 0.8;
const DENSE_SHIFT_COUPLING: f64 = 0.5;

/// The seeded ground truth behind a generated corpus: latent feature
/// embeddings, the three logit weight vectors, and the per-domain covariate
/// tilts. Reconstructable from the GenConfig alone; saved alongside generated
/// data so a corpus can be audited without rerunning the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Per categorical field: `[cardinality × LATENT_DIM]`.
    pub phi_cat: Vec<Matrix>,
    /// Weight vectors over `[latent ; dense]`, length LATENT_DIM + n_dense.
    pub w_invariant: Vec<f64>,
    pub w_domain: Vec<Vec<f64>>,
    pub w_drift: Vec<f64>,
    /// Per categorical field: `[num_domains × cardinality]` sampling-logit tilts.
    pub cat_tilt: Vec<Matrix>,
    /// `[num_domains × n_dense]` mean shifts.
    pub dense_shift: Matrix,
}

impl GroundTruth {
    pub fn build(schema: &FeatureSchema, config: &GenConfig) -> GroundTruth {
        let mut rng = rng::stream(config.seed, "ground-truth");
        let mut normal = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let phi_cat = schema
            .categorical
            .iter()
            .map(|f| Matrix::from_vec(f.cardinality, LATENT_DIM, normal(f.cardinality * LATENT_DIM)))
            .collect();
        let feat_dim = LATENT_DIM + schema.dense.len();
        // 1/sqrt(dim) scaling keeps the logit terms O(1) regardless of width.
        let scale = 1.0 / (feat_dim as f64).sqrt();
        let mut weight = |n: usize| -> Vec<f64> { normal(n).into_iter().map(|v| v * scale).collect() };
        let w_invariant = weight(feat_dim);
        let w_domain = (0..config.num_domains).map(|_| weight(feat_dim)).collect();
        let w_drift = weight(feat_dim);
        let cat_tilt = schema
            .categorical
            .iter()
            .map(|f| {
                Matrix::from_vec(
                    config.num_domains as usize,
                    f.cardinality,
                    normal(config.num_domains as usize * f.cardinality),
                )
            })
            .collect();
        let dense_shift = Matrix::from_vec(
            config.num_domains as usize,
            schema.dense.len(),
            normal(config.num_domains as usize * schema.dense.len()),
        );
        GroundTruth { phi_cat, w_invariant, w_domain, w_drift, cat_tilt, dense_shift }
    }

    /// `[latent ; dense]` embedding of one sample's features.
    fn embed(&self, categorical: &[usize], dense: &[f64]) -> Vec<f64> {
        let mut feat = vec![0.0; LATENT_DIM + dense.len()];
        for (f, &idx) in categorical.iter().enumerate() {
            for (acc, &v) in feat.iter_mut().zip(self.phi_cat[f].row(idx)) {
                *acc += v;
            }
        }
        let inv_fields = 1.0 / categorical.len().max(1) as f64;
        for v in feat.iter_mut().take(LATENT_DIM) {
            *v *= inv_fields;
        }
        feat[LATENT_DIM..].copy_from_slice(dense);
        feat
    }

    /// Click probability for a sample of `domain_id` in `period`.
    pub fn click_probability(
        &self,
        config: &GenConfig,
        domain_id: u32,
        period: u32,
        categorical: &[usize],
        dense: &[f64],
    ) -> f64 {
        let feat = self.embed(categorical, dense);
        let dot = |w: &[f64]| -> f64 { w.iter().zip(&feat).map(|(a, b)| a * b).sum() };
        let logit = config.invariant_strength * dot(&self.w_invariant)
            + config.specific_strength * dot(&self.w_domain[domain_id as usize])
            + config.drift_magnitude * period as f64 * dot(&self.w_drift);
        sigmoid(logit)
    }
}

pub fn generate_period(
    schema: &FeatureSchema,
    config: &GenConfig,
    domain_id: u32,
    period: u32,
) -> Result<PeriodDataset> {
    config.validate()?;
    schema.validate()?;
    if domain_id >= config.num_domains {
        return Err(Error::InvalidArgument(format!(
            "domain id {domain_id} outside 0..{}",
            config.num_domains
        )));
    }
    if period >= config.num_periods {
        return Err(Error::InvalidArgument(format!(
            "period {period} outside 0..{}",
            config.num_periods
        )));
    }
    let truth = GroundTruth::build(schema, config);
    generate_period_with(schema, config, &truth, domain_id, period)
}

/// Same as [`generate_period`] but reuses an already-built ground truth;
/// generating a full corpus rebuilds it once instead of per (domain, period).
pub fn generate_period_with(
    schema: &FeatureSchema,
    config: &GenConfig,
    truth: &GroundTruth,
    domain_id: u32,
    period: u32,
) -> Result<PeriodDataset> {
    let mut rng = rng::stream(config.seed, &format!("data/{domain_id}/{period}"));
    let tilt = config.specific_strength * CAT_TILT_COUPLING;
    let samplers: Vec<WeightedIndex<f64>> = truth
        .cat_tilt
        .iter()
        .map(|t| {
            let weights: Vec<f64> = t
                .row(domain_id as usize)
                .iter()
                .map(|&z| (tilt * z).exp())
                .collect();
            WeightedIndex::new(weights).expect("positive sampling weights")
        })
        .collect();
    let shift_scale = config.specific_strength * DENSE_SHIFT_COUPLING;
    let shifts: Vec<f64> = truth
        .dense_shift
        .row(domain_id as usize)
        .iter()
        .map(|&z| shift_scale * z)
        .collect();

    let n = config.samples_for_domain(domain_id);
    let indicator = (domain_id == TARGET_DOMAIN) as u8;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let categorical: Vec<usize> = samplers.iter().map(|s| s.sample(&mut rng)).collect();
        let dense: Vec<f64> = shifts
            .iter()
            .map(|&mu| mu + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let p = truth.click_probability(config, domain_id, period, &categorical, &dense);
        let label = rng.gen_bool(p) as u8;
        samples.push(Sample {
            categorical,
            dense,
            label,
            domain_id,
            domain_indicator: indicator,
            period,
        });
    }
    Ok(PeriodDataset { samples, domain_id: Some(domain_id), period, schema: schema.clone() })
}

/// 1:1 mixed set for the adversarial extractor: same size as the target
/// stream, ⌈n/2⌉ source samples (domain picked uniformly, then a sample of
/// that domain uniformly with replacement) and ⌊n/2⌋ target samples without
/// replacement, shuffled. Domain indicators: source 0, target 1.
pub fn build_mixed(
    sources: &[&PeriodDataset],
    target: &PeriodDataset,
    seed: u64,
) -> Result<PeriodDataset> {
    if target.is_empty() {
        return Err(Error::InvalidArgument("build_mixed: empty target dataset".into()));
    }
    let usable: Vec<&PeriodDataset> = sources.iter().copied().filter(|d| !d.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::InvalidArgument("build_mixed: no non-empty source dataset".into()));
    }
    let n = target.len();
    let n_source = n.div_ceil(2);
    let n_target = n / 2;
    let mut rng = rng::stream(seed, "mixed");

    let mut samples = Vec::with_capacity(n);
    for _ in 0..n_source {
        let ds = usable[rng.gen_range(0..usable.len())];
        let mut s = ds.samples[rng.gen_range(0..ds.len())].clone();
        s.domain_indicator = 0;
        samples.push(s);
    }
    for idx in rand::seq::index::sample(&mut rng, n, n_target) {
        let mut s = target.samples[idx].clone();
        s.domain_indicator = 1;
        samples.push(s);
    }
    samples.shuffle(&mut rng);
    Ok(PeriodDataset {
        samples,
        domain_id: None,
        period: target.period,
        schema: target.schema.clone(),
    })
}

pub fn write_csv(dataset: &PeriodDataset, path: &Path) -> Result<()> {
    use std::io::Write;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let schema = &dataset.schema;
    let mut header: Vec<&str> = schema.categorical.iter().map(|f| f.name.as_str()).collect();
    header.extend(schema.dense.iter().map(|s| s.as_str()));
    header.extend(["y", "domain", "period"]);
    writeln!(out, "{}", header.join(","))?;
    for s in &dataset.samples {
        let mut fields: Vec<String> = s.categorical.iter().map(|i| i.to_string()).collect();
        // `{}` on f64 prints the shortest digits that parse back bit-exactly.
        fields.extend(s.dense.iter().map(|v| format!("{v}")));
        fields.push(s.label.to_string());
        fields.push(s.domain_id.to_string());
        fields.push(s.period.to_string());
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

pub fn load_csv(path: &Path, schema: &FeatureSchema) -> Result<PeriodDataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::csv(1, "empty file (header row required)"))?;
    let mut expected: Vec<&str> = schema.categorical.iter().map(|f| f.name.as_str()).collect();
    expected.extend(schema.dense.iter().map(|s| s.as_str()));
    expected.extend(["y", "domain", "period"]);
    let got: Vec<&str> = header.split(',').collect();
    if got != expected {
        return Err(Error::csv(
            1,
            format!("header [{}] does not match schema [{}]", got.join(","), expected.join(",")),
        ));
    }

    let n_cat = schema.categorical.len();
    let n_dense = schema.dense.len();
    let mut samples = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected.len() {
            return Err(Error::csv(
                lineno,
                format!("expected {} fields, found {}", expected.len(), fields.len()),
            ));
        }
        let mut categorical = Vec::with_capacity(n_cat);
        for (f, raw) in fields[..n_cat].iter().enumerate() {
            let idx: usize = raw
                .parse()
                .map_err(|_| Error::csv(lineno, format!("'{raw}' is not a feature index")))?;
            let card = schema.categorical[f].cardinality;
            if idx >= card {
                return Err(Error::csv(
                    lineno,
                    format!("index {idx} out of range for field '{}' (cardinality {card})", schema.categorical[f].name),
                ));
            }
            categorical.push(idx);
        }
        let mut dense = Vec::with_capacity(n_dense);
        for raw in &fields[n_cat..n_cat + n_dense] {
            let v: f64 = raw
                .parse()
                .map_err(|_| Error::csv(lineno, format!("'{raw}' is not a number")))?;
            dense.push(v);
        }
        let label: u8 = fields[n_cat + n_dense]
            .parse()
            .map_err(|_| Error::csv(lineno, format!("label '{}' is not an integer", fields[n_cat + n_dense])))?;
        if label > 1 {
            return Err(Error::csv(lineno, format!("label {label} outside {{0,1}}")));
        }
        let domain_id: u32 = fields[n_cat + n_dense + 1]
            .parse()
            .map_err(|_| Error::csv(lineno, format!("domain '{}' is not an integer", fields[n_cat + n_dense + 1])))?;
        let period: u32 = fields[n_cat + n_dense + 2]
            .parse()
            .map_err(|_| Error::csv(lineno, format!("period '{}' is not an integer", fields[n_cat + n_dense + 2])))?;
        samples.push(Sample {
            categorical,
            dense,
            label,
            domain_id,
            domain_indicator: (domain_id == TARGET_DOMAIN) as u8,
            period,
        });
    }
    if samples.is_empty() {
        return Err(Error::csv(2, "no data rows"));
    }
    let period = samples[0].period;
    if samples.iter().any(|s| s.period != period) {
        return Err(Error::csv(1, "rows span multiple periods; one file per period"));
    }
    let first_domain = samples[0].domain_id;
    let domain_id = samples.iter().all(|s| s.domain_id == first_domain).then_some(first_domain);
    Ok(PeriodDataset { samples, domain_id, period, schema: schema.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::CategoricalField;

    fn small_config(seed: u64) -> GenConfig {
        GenConfig {
            num_domains: 3,
            num_periods: 8,
            samples_per_domain: 500,
            target_fraction: 0.5,
            seed,
            ..GenConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let schema = FeatureSchema::desk_default();
        let cfg = small_config(11);
        let a = generate_period(&schema, &cfg, 1, 3).unwrap();
        let b = generate_period(&schema, &cfg, 1, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_period(&schema, &cfg, 2, 3).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn sample_counts_respect_target_fraction() {
        let schema = FeatureSchema::desk_default();
        let cfg = small_config(1);
        assert_eq!(generate_period(&schema, &cfg, 0, 0).unwrap().len(), 250);
        assert_eq!(generate_period(&schema, &cfg, 1, 0).unwrap().len(), 500);
    }

    #[test]
    fn invalid_ids_are_rejected() {
        let schema = FeatureSchema::desk_default();
        let cfg = small_config(1);
        assert!(generate_period(&schema, &cfg, 3, 0).is_err());
        assert!(generate_period(&schema, &cfg, 0, 8).is_err());
    }

    fn mean_ctr(ds: &PeriodDataset) -> f64 {
        ds.samples.iter().map(|s| s.label as f64).sum::<f64>() / ds.len() as f64
    }

    #[test]
    fn no_specific_signal_means_no_domain_gap() {
        let schema = FeatureSchema::desk_default();
        let cfg = GenConfig {
            specific_strength: 0.0,
            drift_magnitude: 0.0,
            samples_per_domain: 50_000,
            target_fraction: 1.0,
            seed: 5,
            ..GenConfig::default()
        };
        let truth = GroundTruth::build(&schema, &cfg);
        let ctrs: Vec<f64> = (0..3)
            .map(|d| mean_ctr(&generate_period_with(&schema, &cfg, &truth, d, 0).unwrap()))
            .collect();
        for i in 0..3 {
            for j in i + 1..3 {
                assert!((ctrs[i] - ctrs[j]).abs() < 0.02, "{ctrs:?}");
            }
        }
    }

    #[test]
    fn no_signal_at_all_is_a_fair_coin() {
        let schema = FeatureSchema::desk_default();
        let cfg = GenConfig {
            invariant_strength: 0.0,
            specific_strength: 0.0,
            drift_magnitude: 0.0,
            samples_per_domain: 50_000,
            target_fraction: 1.0,
            seed: 7,
            ..GenConfig::default()
        };
        let ds = generate_period(&schema, &cfg, 0, 0).unwrap();
        assert!((mean_ctr(&ds) - 0.5).abs() < 0.01);
        // With a constant click probability there is nothing to rank.
        let truth = GroundTruth::build(&schema, &cfg);
        let s = &ds.samples[0];
        assert_eq!(truth.click_probability(&cfg, 0, 0, &s.categorical, &s.dense), 0.5);
    }

    #[test]
    fn domain_ctr_gap_grows_with_specific_strength() {
        let schema = FeatureSchema::desk_default();
        let mut gaps = Vec::new();
        for strength in [0.0, 0.75, 2.0] {
            let mut total = 0.0;
            for seed in 0..5 {
                let cfg = GenConfig {
                    specific_strength: strength,
                    drift_magnitude: 0.0,
                    samples_per_domain: 20_000,
                    target_fraction: 1.0,
                    seed,
                    ..GenConfig::default()
                };
                let truth = GroundTruth::build(&schema, &cfg);
                let ctrs: Vec<f64> = (0..3)
                    .map(|d| mean_ctr(&generate_period_with(&schema, &cfg, &truth, d, 0).unwrap()))
                    .collect();
                let gap = ctrs
                    .iter()
                    .flat_map(|a| ctrs.iter().map(move |b| (a - b).abs()))
                    .fold(0.0f64, f64::max);
                total += gap;
            }
            gaps.push(total / 5.0);
        }
        assert!(gaps[0] < gaps[1] && gaps[1] < gaps[2], "{gaps:?}");
    }

    #[test]
    fn mixed_set_sizes_and_indicators() {
        let schema = FeatureSchema::desk_default();
        let cfg = small_config(3);
        let truth = GroundTruth::build(&schema, &cfg);
        let s1 = generate_period_with(&schema, &cfg, &truth, 1, 0).unwrap();
        let s2 = generate_period_with(&schema, &cfg, &truth, 2, 0).unwrap();
        let target = generate_period_with(&schema, &cfg, &truth, 0, 0).unwrap();
        let mixed = build_mixed(&[&s1, &s2], &target, 99).unwrap();
        assert_eq!(mixed.len(), target.len());
        let n_target: usize = mixed.samples.iter().filter(|s| s.domain_indicator == 1).count();
        let n_source = mixed.len() - n_target;
        assert_eq!(n_source, target.len().div_ceil(2));
        assert_eq!(n_target, target.len() / 2);
        for s in &mixed.samples {
            assert_eq!(s.domain_indicator == 1, s.domain_id == TARGET_DOMAIN);
        }
        assert_eq!(mixed.domain_id, None);
    }

    #[test]
    fn mixed_with_single_source_uses_it_exclusively() {
        let schema = FeatureSchema::desk_default();
        let cfg = small_config(4);
        let truth = GroundTruth::build(&schema, &cfg);
        let s2 = generate_period_with(&schema, &cfg, &truth, 2, 1).unwrap();
        let target = generate_period_with(&schema, &cfg, &truth, 0, 1).unwrap();
        let mixed = build_mixed(&[&s2], &target, 1).unwrap();
        for s in mixed.samples.iter().filter(|s| s.domain_indicator == 0) {
            assert_eq!(s.domain_id, 2);
        }
    }

    #[test]
    fn mixed_source_domains_are_balanced() {
        let schema = FeatureSchema::desk_default();
        let cfg = small_config(5);
        let truth = GroundTruth::build(&schema, &cfg);
        let s1 = generate_period_with(&schema, &cfg, &truth, 1, 0).unwrap();
        let s2 = generate_period_with(&schema, &cfg, &truth, 2, 0).unwrap();
        let target = generate_period_with(&schema, &cfg, &truth, 0, 0).unwrap();
        let n_source = target.len().div_ceil(2) as f64;
        let sigma = (n_source * 0.25).sqrt();
        for seed in 0..10 {
            let mixed = build_mixed(&[&s1, &s2], &target, seed).unwrap();
            let from_1 = mixed.samples.iter().filter(|s| s.domain_id == 1).count() as f64;
            assert!(
                (from_1 - n_source / 2.0).abs() <= 3.0 * sigma,
                "seed {seed}: {from_1} of {n_source}"
            );
        }
    }

    #[test]
    fn mixed_rejects_empty_inputs() {
        let schema = FeatureSchema::desk_default();
        let cfg = small_config(6);
        let target = generate_period(&schema, &cfg, 0, 0).unwrap();
        let empty = PeriodDataset { samples: vec![], domain_id: Some(1), period: 0, schema: schema.clone() };
        assert!(build_mixed(&[&empty], &target, 0).is_err());
        assert!(build_mixed(&[&target], &empty, 0).is_err());
    }

    #[test]
    fn csv_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("period.csv");
        let schema = FeatureSchema::desk_default();
        let cfg = small_config(8);
        let ds = generate_period(&schema, &cfg, 1, 2).unwrap();
        write_csv(&ds, &path).unwrap();
        let back = load_csv(&path, &schema).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn csv_round_trip_preserves_mixed_datasets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mixed.csv");
        let schema = FeatureSchema::desk_default();
        let cfg = small_config(9);
        let truth = GroundTruth::build(&schema, &cfg);
        let s1 = generate_period_with(&schema, &cfg, &truth, 1, 0).unwrap();
        let target = generate_period_with(&schema, &cfg, &truth, 0, 0).unwrap();
        let mixed = build_mixed(&[&s1], &target, 17).unwrap();
        write_csv(&mixed, &path).unwrap();
        let back = load_csv(&path, &schema).unwrap();
        assert_eq!(mixed, back);
    }

    #[test]
    fn malformed_rows_cite_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let schema = FeatureSchema {
            categorical: vec![CategoricalField { name: "c".into(), cardinality: 4 }],
            dense: vec!["x".into()],
            embedding_dim: 2,
        };
        let cases = [
            ("c,x,y,domain,period\n1,0.5,2,0,0\n", "label"),
            ("c,x,y,domain,period\n1,0.5,1,0,0\n9,0.5,0,0,0\n", "out of range"),
            ("c,x,y,domain,period\n1,abc,1,0,0\n", "not a number"),
            ("wrong,x,y,domain,period\n", "header"),
            ("c,x,y,domain,period\n1,0.5,1\n", "fields"),
        ];
        for (i, (text, needle)) in cases.iter().enumerate() {
            let path = dir.path().join(format!("bad{i}.csv"));
            std::fs::write(&path, text).unwrap();
            let err = load_csv(&path, &schema).unwrap_err().to_string();
            assert!(err.contains(needle), "case {i}: {err}");
            assert!(err.contains("line"), "case {i}: {err}");
        }
        // The y=2 case must cite line 2 specifically.
        let path = dir.path().join("bad0.csv");
        let err = load_csv(&path, &schema).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }
}
