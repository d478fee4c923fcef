//! Synthetic worlds with planted structure, the staged experiment pipeline,
//! comparison variants, and the complexity probe.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use log::info;
use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{apply_standardizer, fit_standardizer, split, Frames, Sequence, SequenceDataset, Standardizer};
use crate::error::{DbmError, Result};
use crate::inference::{classify, dataset_loglik, emission_matrix, forward_from_emissions, viterbi_alignment};
use crate::infotheory::{compute_mistats, Candidate, LagWindow, MiConfig, MiStats};
use crate::io::{write_json, SCHEMA};
use crate::model::{ChainTopology, DbmModel};
use crate::structure::{induce_all, DependencySpec, InductionConfig, Ranking};
use crate::training::{em_fit, init_bootstrap, TrainConfig};

/// Derives an independent seed for a named stage from the experiment seed.
pub fn substream(seed: u64, stream: Stream) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64 + 1);
    rng.next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 0,
    Split = 1,
    Init = 2,
    RandomVariant = 3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedEdge {
    /// State index local to the class.
    pub state: usize,
    pub feature: usize,
    pub parent: Candidate,
    pub coef: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub label: String,
    /// Self-loop probability of every non-final state.
    pub stay: f64,
    /// `[state][feature]` emission offsets.
    pub means: Vec<Vec<f64>>,
    /// `[state][feature]` noise variances.
    pub variances: Vec<Vec<f64>>,
    pub edges: Vec<PlantedEdge>,
}

impl ClassSpec {
    pub fn n_states(&self) -> usize {
        self.means.len()
    }
}

/// Occasional large additive outliers on one feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Glitch {
    pub feature: usize,
    pub prob: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub dim: usize,
    pub classes: Vec<ClassSpec>,
    pub len_min: usize,
    pub len_max: usize,
    pub seqs_per_class: usize,
    #[serde(default)]
    pub glitch: Option<Glitch>,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DbmError::Config(m));
        if self.dim == 0 || self.classes.is_empty() || self.seqs_per_class == 0 {
            return bad("generator needs a feature, a class and a sequence per class".into());
        }
        if self.len_min == 0 || self.len_min > self.len_max {
            return bad(format!("bad length range {}..={}", self.len_min, self.len_max));
        }
        for c in &self.classes {
            if c.n_states() == 0 || c.variances.len() != c.n_states() {
                return bad(format!("class {}: means and variances need one row per state", c.label));
            }
            if !(0.0..1.0).contains(&c.stay) {
                return bad(format!("class {}: stay probability {} outside [0, 1)", c.label, c.stay));
            }
            for row in c.means.iter().chain(&c.variances) {
                if row.len() != self.dim {
                    return bad(format!("class {}: row of length {} for dim {}", c.label, row.len(), self.dim));
                }
            }
            if c.variances.iter().flatten().any(|v| !(*v > 0.0)) {
                return bad(format!("class {}: noise variances must be positive", c.label));
            }
            // Reuses the spec's own checks (lags >= 1, no duplicates).
            self.local_spec(c)?;
        }
        if let Some(g) = self.glitch {
            if g.feature >= self.dim || !(0.0..=1.0).contains(&g.prob) || !(g.sd >= 0.0) {
                return bad("bad glitch settings".into());
            }
        }
        Ok(())
    }

    fn local_spec(&self, c: &ClassSpec) -> Result<DependencySpec> {
        let mut spec = DependencySpec::empty(c.n_states(), self.dim);
        for q in 0..c.n_states() {
            for i in 0..self.dim {
                let ps = c.edges.iter().filter(|e| e.state == q && e.feature == i).map(|e| e.parent).collect();
                spec.set(q, i, ps).map_err(|e| DbmError::Config(format!("class {}: {e}", c.label)))?;
            }
        }
        if let Some(e) = c.edges.iter().find(|e| e.state >= c.n_states() || e.feature >= self.dim) {
            return Err(DbmError::Config(format!("class {}: edge {e:?} out of range", c.label)));
        }
        Ok(spec)
    }

    /// Planted parents over global state ids.
    pub fn planted_spec(&self) -> Result<DependencySpec> {
        let n: usize = self.classes.iter().map(ClassSpec::n_states).sum();
        let mut spec = DependencySpec::empty(n, self.dim);
        let mut offset = 0;
        for c in &self.classes {
            let local = self.local_spec(c)?;
            for q in 0..c.n_states() {
                for i in 0..self.dim {
                    spec.set(offset + q, i, local.parents(q, i).to_vec())?;
                }
            }
            offset += c.n_states();
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub schema: String,
    pub spec: DependencySpec,
    /// Sampled state path of every sequence, in global state ids.
    pub paths: Vec<Vec<usize>>,
}

/// Ancestral sampling from the planted model. Parents before the first frame
/// read as 0.
pub fn generate(spec: &GeneratorSpec) -> Result<(SequenceDataset, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    let mut sequences = Vec::new();
    let mut paths = Vec::new();
    let mut offset = 0;
    for c in &spec.classes {
        let n = c.n_states();
        for _ in 0..spec.seqs_per_class {
            let len = rng.random_range(spec.len_min..=spec.len_max);
            let mut data = vec![0.0; len * d];
            let mut path = Vec::with_capacity(len);
            let mut q = 0;
            for t in 0..len {
                if t > 0 && q + 1 < n && rng.random::<f64>() >= c.stay {
                    q += 1;
                }
                path.push(offset + q);
                for i in 0..d {
                    let mut x = c.means[q][i];
                    for e in c.edges.iter().filter(|e| e.state == q && e.feature == i) {
                        if t >= e.parent.lag {
                            x += e.coef * data[(t - e.parent.lag) * d + e.parent.source];
                        }
                    }
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x += c.variances[q][i].sqrt() * z;
                    if let Some(g) = spec.glitch.filter(|g| g.feature == i) {
                        if rng.random::<f64>() < g.prob {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            x += g.sd * z;
                        }
                    }
                    data[t * d + i] = x;
                }
            }
            sequences.push(Sequence { frames: Frames::new(len, d, data)?, label: c.label.clone() });
            paths.push(path);
        }
        offset += n;
    }
    let classes = spec.classes.iter().map(|c| c.label.clone()).collect();
    let truth = GroundTruth { schema: SCHEMA.to_string(), spec: spec.planted_spec()?, paths };
    Ok((SequenceDataset::new(sequences, classes)?, truth))
}

/// Preset synthetic worlds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum World {
    /// Two classes of two states over four features; every state owns one
    /// cross-feature edge that is invisible in the pooled marginal.
    Recovery { seqs_per_class: usize },
    /// A strong copy edge shared by both classes competes with a weak
    /// class-sign edge for the same target; the copy target also glitches.
    Adversarial { seqs_per_class: usize },
    /// Many weakly informative features and one class-sign edge per state.
    Matched { states: usize, dim: usize, seqs_per_class: usize },
}

impl World {
    /// Dataset and ground truth for experiment seed `seed`.
    pub fn sample(&self, seed: u64) -> Result<(SequenceDataset, GroundTruth)> {
        generate(&self.generator(SeedRecord::new(seed).data))
    }

    pub fn generator(&self, seed: u64) -> GeneratorSpec {
        match *self {
            World::Recovery { seqs_per_class } => recovery_world(seqs_per_class, seed),
            World::Adversarial { seqs_per_class } => adversarial_world(seqs_per_class, seed),
            World::Matched { states, dim, seqs_per_class } => matched_world(states, dim, seqs_per_class, seed),
        }
    }
}

fn edge(state: usize, feature: usize, lag: usize, source: usize, coef: f64) -> PlantedEdge {
    PlantedEdge { state, feature, parent: Candidate { lag, source }, coef }
}

pub fn recovery_world(seqs_per_class: usize, seed: u64) -> GeneratorSpec {
    // Hadamard rows: distinct state means whose columns are mutually
    // orthogonal, so no cross-feature covariance arises across states.
    let h = [[1.0, 1.0, 1.0, 1.0], [1.0, -1.0, 1.0, -1.0], [1.0, 1.0, -1.0, -1.0], [1.0, -1.0, -1.0, 1.0]];
    let class = |label: &str, rows: [usize; 2], edges: Vec<PlantedEdge>| ClassSpec {
        label: label.into(),
        stay: 1.0 - 1.0 / 75.0,
        means: rows.iter().map(|&r| h[r].to_vec()).collect(),
        variances: vec![vec![1.0; 4]; 2],
        edges,
    };
    GeneratorSpec {
        dim: 4,
        classes: vec![
            class("a", [0, 1], vec![edge(0, 0, 1, 1, 0.6), edge(1, 2, 2, 3, 0.6)]),
            class("b", [2, 3], vec![edge(0, 1, 1, 2, -0.6), edge(1, 3, 1, 0, 0.6)]),
        ],
        len_min: 140,
        len_max: 160,
        seqs_per_class,
        glitch: None,
        seed,
    }
}

pub fn adversarial_world(seqs_per_class: usize, seed: u64) -> GeneratorSpec {
    const SHIFT: f64 = 0.1;
    const BETA: f64 = 0.25;
    let class = |label: &str, sign: f64| ClassSpec {
        label: label.into(),
        stay: 0.0,
        means: vec![vec![0.0, sign * SHIFT, 0.0]],
        variances: vec![vec![0.01, 1.0, 1.0]],
        edges: vec![edge(0, 0, 1, 1, 1.0), edge(0, 0, 1, 2, sign * BETA)],
    };
    GeneratorSpec {
        dim: 3,
        classes: vec![class("a", 1.0), class("b", -1.0)],
        len_min: 80,
        len_max: 120,
        seqs_per_class,
        glitch: Some(Glitch { feature: 0, prob: 0.03, sd: 5.0 }),
        seed,
    }
}

pub fn matched_world(states: usize, dim: usize, seqs_per_class: usize, seed: u64) -> GeneratorSpec {
    const SHIFT: f64 = 0.01;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let variances: Vec<Vec<f64>> =
        (0..states).map(|_| (0..dim).map(|_| 0.8 + 0.4 * rng.random::<f64>()).collect()).collect();
    let class = |label: &str, sign: f64| ClassSpec {
        label: label.into(),
        stay: 1.0 - 1.0 / 40.0,
        means: (0..states)
            .map(|q| (0..dim).map(|i| sign * SHIFT + if (i >> q) & 1 == 0 { 0.5 } else { -0.5 }).collect())
            .collect(),
        variances: variances.clone(),
        edges: (0..states).map(|q| edge(q, 0, 1, 1, sign * 0.5)).collect(),
    };
    let classes = vec![class("a", 1.0), class("b", -1.0)];
    GeneratorSpec { dim, classes, len_min: 40 * states, len_max: 60 * states, seqs_per_class, glitch: None, seed }
}

/// Every feature depends on its own previous `k` values, in every state.
pub fn variant_ar(k: usize, n_states: usize, dim: usize) -> DependencySpec {
    let mut spec = DependencySpec::empty(n_states, dim);
    for q in 0..n_states {
        for i in 0..dim {
            let ps = (1..=k).map(|lag| Candidate { lag, source: i }).collect();
            spec.set(q, i, ps).expect("autoregressive parents are valid");
        }
    }
    spec
}

/// `count` edges per state, drawn uniformly without replacement from all
/// (target, lagged source) pairs in the window.
pub fn variant_random(count: usize, seed: u64, window: LagWindow, n_states: usize, dim: usize) -> DependencySpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_target = window.n_candidates(dim);
    let pool = dim * per_target;
    let mut spec = DependencySpec::empty(n_states, dim);
    for q in 0..n_states {
        let mut lists: Vec<Vec<Candidate>> = vec![Vec::new(); dim];
        for k in sample(&mut rng, pool, count.min(pool)).into_iter() {
            lists[k / per_target].push(Candidate::from_index(k % per_target, dim));
        }
        for (i, mut ps) in lists.into_iter().enumerate() {
            ps.sort();
            spec.set(q, i, ps).expect("sampled parents are distinct");
        }
    }
    spec
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "HMM")]
    Hmm,
    #[serde(rename = "DBM-EAR")]
    Ear,
    #[serde(rename = "DBM-CMI")]
    Cmi,
    #[serde(rename = "DBM-AR1")]
    Ar1,
    #[serde(rename = "DBM-AR2")]
    Ar2,
    #[serde(rename = "DBM-RAND")]
    Rand,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::Hmm, Variant::Ear, Variant::Cmi, Variant::Ar1, Variant::Ar2, Variant::Rand];

    pub fn from_name(name: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(name))
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Hmm => "HMM",
            Variant::Ear => "DBM-EAR",
            Variant::Cmi => "DBM-CMI",
            Variant::Ar1 => "DBM-AR1",
            Variant::Ar2 => "DBM-AR2",
            Variant::Rand => "DBM-RAND",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub states_per_class: usize,
    pub max_past_lag: usize,
    pub test_fraction: f64,
    pub mi: MiConfig,
    pub induction: InductionConfig,
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    /// Edges per state for the random variant; defaults to the EAR
    /// variant's mean edges per state.
    pub random_edges: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            states_per_class: 2,
            max_past_lag: 3,
            test_fraction: 0.5,
            mi: MiConfig::default(),
            induction: InductionConfig::default(),
            train: TrainConfig::default(),
            variants: Variant::ALL.to_vec(),
            random_edges: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.states_per_class == 0 {
            return Err(DbmError::Config("states_per_class must be at least 1".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(DbmError::Config(format!("test_fraction {} outside (0, 1)", self.test_fraction)));
        }
        LagWindow::new(self.max_past_lag)?;
        self.induction.validate()?;
        self.train.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedRecord {
    pub experiment: u64,
    pub data: u64,
    pub split: u64,
    pub init: u64,
    pub random_variant: u64,
}

impl SeedRecord {
    pub fn new(seed: u64) -> Self {
        SeedRecord {
            experiment: seed,
            data: substream(seed, Stream::Data),
            split: substream(seed, Stream::Split),
            init: substream(seed, Stream::Init),
            random_variant: substream(seed, Stream::RandomVariant),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantResult {
    pub variant: Variant,
    pub params: usize,
    pub edges: usize,
    pub accuracy: f64,
    pub train_loglik_per_frame: f64,
    pub test_loglik_per_frame: f64,
    pub em_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentReport {
    pub schema: String,
    pub config: PipelineConfig,
    pub seeds: SeedRecord,
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub train_frames: usize,
    pub test_frames: usize,
    pub variants: Vec<VariantResult>,
}

impl ExperimentReport {
    pub fn get(&self, v: Variant) -> Option<&VariantResult> {
        self.variants.iter().find(|r| r.variant == v)
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("variant,params,edges,accuracy,train_loglik_per_frame,test_loglik_per_frame,em_iterations\n");
        for r in &self.variants {
            let _ = writeln!(
                out,
                "{},{},{},{:?},{:?},{:?},{}",
                r.variant.name(),
                r.params,
                r.edges,
                r.accuracy,
                r.train_loglik_per_frame,
                r.test_loglik_per_frame,
                r.em_iterations
            );
        }
        out
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("report.json"), self)?;
        let csv = dir.join("report.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| DbmError::io(&csv, e))
    }
}

/// Intermediate artifacts of one pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineArtifacts {
    pub train: SequenceDataset,
    pub test: SequenceDataset,
    pub bootstrap: DbmModel,
    pub bootstrap_trace: Vec<f64>,
    pub mistats: MiStats,
    pub specs: Vec<(Variant, DependencySpec)>,
    pub models: Vec<(Variant, DbmModel)>,
    pub report: ExperimentReport,
}

/// Fraction of sequences whose predicted label matches.
pub fn accuracy(model: &DbmModel, data: &SequenceDataset) -> Result<f64> {
    use rayon::prelude::*;
    let hits: Vec<bool> =
        data.sequences.par_iter().map(|s| Ok(classify(model, &s.frames)?.0 == s.label)).collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// Mean log-likelihood per frame, each sequence under its own class.
pub fn per_frame(model: &DbmModel, data: &SequenceDataset) -> Result<f64> {
    let ll = dataset_loglik(model, data)?;
    Ok(ll.iter().sum::<f64>() / data.total_frames() as f64)
}

/// Structure for one variant given the shared MI tables.
pub fn variant_spec(
    variant: Variant,
    stats: &MiStats,
    config: &PipelineConfig,
    ear_edges: Option<&DependencySpec>,
    seed: u64,
) -> Result<DependencySpec> {
    let (n, d) = (stats.n_states, stats.dim);
    Ok(match variant {
        Variant::Hmm => DependencySpec::empty(n, d),
        Variant::Ear => induce_all(stats, &InductionConfig { ranking: Ranking::Ear, ..config.induction })?,
        Variant::Cmi => induce_all(stats, &InductionConfig { ranking: Ranking::Cmi, ..config.induction })?,
        Variant::Ar1 => variant_ar(1, n, d),
        Variant::Ar2 => variant_ar(2, n, d),
        Variant::Rand => {
            let count = config
                .random_edges
                .unwrap_or_else(|| ear_edges.map_or(0, |s| (s.total_edges() as f64 / n as f64).round() as usize));
            variant_random(count, seed, LagWindow::new(config.max_past_lag)?, n, d)
        }
    })
}

/// Stratified split, then both halves standardized with train statistics.
pub fn split_stage(
    dataset: &SequenceDataset,
    config: &PipelineConfig,
    seeds: &SeedRecord,
) -> Result<(SequenceDataset, SequenceDataset, Standardizer)> {
    let (train_raw, test_raw) = split(dataset, config.test_fraction, seeds.split).map_err(|e| e.in_stage("split"))?;
    let standardizer = fit_standardizer(&train_raw).map_err(|e| e.in_stage("standardize"))?;
    let train = apply_standardizer(&train_raw, &standardizer)?;
    let test = apply_standardizer(&test_raw, &standardizer)?;
    Ok((train, test, standardizer))
}

fn train_config(config: &PipelineConfig, seeds: &SeedRecord) -> TrainConfig {
    TrainConfig { seed: seeds.init, ..config.train }
}

/// Segmental initialization and EM for the structure-free bootstrap system.
pub fn bootstrap_stage(
    train: &SequenceDataset,
    standardizer: Standardizer,
    config: &PipelineConfig,
    seeds: &SeedRecord,
) -> Result<(DbmModel, Vec<f64>)> {
    let states = vec![config.states_per_class; train.classes.len()];
    init_bootstrap(train, &states, standardizer, &train_config(config, seeds))
        .map_err(|e| e.in_stage("train-bootstrap"))
}

/// Viterbi alignment under `model`, then the MI tables over the lag window.
pub fn mistats_stage(model: &DbmModel, train: &SequenceDataset, config: &PipelineConfig) -> Result<MiStats> {
    let alignment = viterbi_alignment(model, train).map_err(|e| e.in_stage("align"))?;
    let window = LagWindow::new(config.max_past_lag)?;
    compute_mistats(train, &alignment, window, &config.mi).map_err(|e| e.in_stage("mi-stats"))
}

/// Structure for each requested variant.
pub fn induce_stage(
    stats: &MiStats,
    config: &PipelineConfig,
    variants: &[Variant],
    seeds: &SeedRecord,
) -> Result<Vec<(Variant, DependencySpec)>> {
    let ear =
        variant_spec(Variant::Ear, stats, config, None, seeds.random_variant).map_err(|e| e.in_stage("induce"))?;
    variants
        .iter()
        .map(|&v| {
            let spec = if v == Variant::Ear {
                ear.clone()
            } else {
                variant_spec(v, stats, config, Some(&ear), seeds.random_variant).map_err(|e| e.in_stage("induce"))?
            };
            Ok((v, spec))
        })
        .collect()
}

/// EM from the bootstrap model with `spec` attached. An empty spec keeps the
/// bootstrap model and returns an empty trace.
pub fn retrain_stage(
    bootstrap: &DbmModel,
    spec: &DependencySpec,
    train: &SequenceDataset,
    config: &PipelineConfig,
    seeds: &SeedRecord,
) -> Result<(DbmModel, Vec<f64>)> {
    if spec.is_empty() {
        return Ok((bootstrap.clone(), Vec::new()));
    }
    let start = bootstrap.with_structure(spec.clone()).map_err(|e| e.in_stage("train"))?;
    em_fit(&start, train, &train_config(config, seeds)).map_err(|e| e.in_stage("train"))
}

/// Accuracy and per-frame log-likelihoods of one trained variant.
pub fn evaluate_stage(
    variant: Variant,
    model: &DbmModel,
    em_iterations: usize,
    train: &SequenceDataset,
    test: &SequenceDataset,
) -> Result<VariantResult> {
    let acc = accuracy(model, test).map_err(|e| e.in_stage("eval"))?;
    let train_ll = per_frame(model, train).map_err(|e| e.in_stage("eval"))?;
    let test_ll = per_frame(model, test).map_err(|e| e.in_stage("eval"))?;
    info!("{}: accuracy {acc:.4}, train {train_ll:.5}/frame, test {test_ll:.5}/frame", variant.name());
    Ok(VariantResult {
        variant,
        params: model.param_count(),
        edges: model.spec.total_edges(),
        accuracy: acc,
        train_loglik_per_frame: train_ll,
        test_loglik_per_frame: test_ll,
        em_iterations,
    })
}

/// Bootstrap HMM, Viterbi alignment, MI tables, structure per variant,
/// retraining, and held-out evaluation.
pub fn run_pipeline(dataset: &SequenceDataset, config: &PipelineConfig, seed: u64) -> Result<PipelineArtifacts> {
    config.validate()?;
    let seeds = SeedRecord::new(seed);
    let (train, test, standardizer) = split_stage(dataset, config, &seeds)?;
    let (bootstrap, bootstrap_trace) = bootstrap_stage(&train, standardizer, config, &seeds)?;
    info!("bootstrap HMM: {} EM evaluations", bootstrap_trace.len());
    let mistats = mistats_stage(&bootstrap, &train, config)?;
    let specs = induce_stage(&mistats, config, &config.variants, &seeds)?;

    let mut models = Vec::new();
    let mut results = Vec::new();
    for (v, spec) in &specs {
        let (model, trace) = retrain_stage(&bootstrap, spec, &train, config, &seeds)?;
        results.push(evaluate_stage(*v, &model, trace.len().saturating_sub(1), &train, &test)?);
        models.push((*v, model));
    }
    let report = ExperimentReport {
        schema: SCHEMA.to_string(),
        config: config.clone(),
        seeds,
        train_sequences: train.len(),
        test_sequences: test.len(),
        train_frames: train.total_frames(),
        test_frames: test.total_frames(),
        variants: results,
    };
    Ok(PipelineArtifacts { train, test, bootstrap, bootstrap_trace, mistats, specs, models, report })
}

/// Edge-level precision and recall of `found` against `truth`.
pub fn precision_recall(found: &DependencySpec, truth: &DependencySpec) -> (f64, f64) {
    let hits = found
        .edges()
        .filter(|&(q, i, p)| q < truth.n_states() && i < truth.dim() && truth.parents(q, i).contains(&p))
        .count() as f64;
    let precision = if found.total_edges() == 0 { 1.0 } else { hits / found.total_edges() as f64 };
    let recall = if truth.total_edges() == 0 { 1.0 } else { hits / truth.total_edges() as f64 };
    (precision, recall)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub n_grid: Vec<usize>,
    pub t_grid: Vec<usize>,
    pub k_grid: Vec<usize>,
    pub base_n: usize,
    pub base_t: usize,
    pub base_k: usize,
    pub dim: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            n_grid: vec![2, 4, 8, 16],
            t_grid: vec![1000, 2000, 4000, 8000],
            k_grid: vec![2, 4, 8, 16],
            base_n: 4,
            base_t: 2000,
            base_k: 2,
            dim: 8,
            repeats: 7,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub axis: String,
    pub n: usize,
    pub t: usize,
    pub k: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub schema: String,
    pub config: ProbeConfig,
    pub rows: Vec<ProbeRow>,
    pub slope_n: f64,
    pub slope_t: f64,
    pub slope_k: f64,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Per-call seconds of each job: calls are batched to at least
/// `BATCH_SECS`, and repeats run round-robin over the jobs so slow drift in
/// machine speed hits every job alike. Keeps the minimum per job.
fn min_times(repeats: usize, jobs: &mut [Box<dyn FnMut() + '_>]) -> Vec<f64> {
    const BATCH_SECS: f64 = 0.02;
    let calls: Vec<usize> = jobs
        .iter_mut()
        .map(|f| {
            let t = Instant::now();
            f();
            let once = t.elapsed().as_secs_f64().max(1e-9);
            ((BATCH_SECS / once).ceil() as usize).max(1)
        })
        .collect();
    let mut best = vec![f64::INFINITY; jobs.len()];
    for _ in 0..repeats.max(1) {
        for ((f, &c), b) in jobs.iter_mut().zip(&calls).zip(&mut best) {
            let t = Instant::now();
            for _ in 0..c {
                f();
            }
            *b = b.min(t.elapsed().as_secs_f64() / c as f64);
        }
    }
    best
}

fn dense_topology(n: usize, rng: &mut ChaCha8Rng) -> ChainTopology {
    let row = |rng: &mut ChaCha8Rng| {
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.1).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect::<Vec<f64>>()
    };
    ChainTopology { init: row(rng), trans: (0..n).map(|_| row(rng)).collect() }
}

/// Times the forward recursion over `N` and `T` (given emissions, dense
/// transitions) and emission evaluation over `K` (every feature at lags
/// `1..=K` as parents), reporting the minimum over repeats.
pub fn complexity_probe(config: &ProbeConfig) -> Result<ProbeReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rows = Vec::new();
    let mut forward_inputs = Vec::new();
    for (axis, n, t) in config
        .n_grid
        .iter()
        .map(|&n| ("N", n, config.base_t))
        .chain(config.t_grid.iter().map(|&t| ("T", config.base_n, t)))
    {
        let topo = dense_topology(n, &mut rng);
        let emis: Vec<f64> = (0..n * t).map(|_| -rng.random::<f64>() * 5.0).collect();
        forward_inputs.push((topo, emis));
        rows.push(ProbeRow { axis: axis.into(), n, t, k: 0, seconds: 0.0 });
    }
    let d = config.dim;
    let mut emission_inputs = Vec::new();
    for &k in &config.k_grid {
        let frames =
            Frames::new(config.base_t, d, (0..config.base_t * d).map(|_| StandardNormal.sample(&mut rng)).collect())?;
        emission_inputs.push((probe_model(config.base_n, d, k, &mut rng)?, frames));
        rows.push(ProbeRow { axis: "K".into(), n: config.base_n, t: config.base_t, k, seconds: 0.0 });
    }
    let mut jobs: Vec<Box<dyn FnMut() + '_>> = Vec::new();
    for (topo, emis) in &forward_inputs {
        jobs.push(Box::new(move || {
            std::hint::black_box(forward_from_emissions(topo, std::hint::black_box(emis)));
        }));
    }
    for (model, frames) in &emission_inputs {
        jobs.push(Box::new(move || {
            std::hint::black_box(emission_matrix(model, 0, std::hint::black_box(frames)));
        }));
    }
    for (row, s) in rows.iter_mut().zip(min_times(config.repeats, &mut jobs)) {
        row.seconds = s;
    }
    drop(jobs);
    let slope = |axis: &str, key: fn(&ProbeRow) -> usize| {
        let sel: Vec<&ProbeRow> = rows.iter().filter(|r| r.axis == axis).collect();
        let x: Vec<f64> = sel.iter().map(|r| key(r) as f64).collect();
        let y: Vec<f64> = sel.iter().map(|r| r.seconds).collect();
        loglog_slope(&x, &y)
    };
    let (slope_n, slope_t, slope_k) = (slope("N", |r| r.n), slope("T", |r| r.t), slope("K", |r| r.k));
    Ok(ProbeReport { schema: SCHEMA.to_string(), config: config.clone(), rows, slope_n, slope_t, slope_k })
}

fn probe_model(n: usize, d: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<DbmModel> {
    use crate::model::{ClassChain, EmissionComponent};
    let comps = vec![vec![EmissionComponent::gaussian(1.0, &vec![0.0; d], &vec![1.0; d])]; n];
    let chain = ClassChain { label: "probe".into(), topology: dense_topology(n, rng) };
    let hmm = DbmModel::hmm(d, vec![chain], comps, Standardizer::identity(d))?;
    let mut spec = DependencySpec::empty(n, d);
    let parents: Vec<Candidate> = (1..=k).flat_map(|lag| (0..d).map(move |source| Candidate { lag, source })).collect();
    for q in 0..n {
        for i in 0..d {
            spec.set(q, i, parents.clone())?;
        }
    }
    let mut model = hmm.with_structure(spec)?;
    for comp in model.states.iter_mut().flatten() {
        for row in &mut comp.coefs {
            row.iter_mut().for_each(|b| *b = 0.01 * (rng.random::<f64>() - 0.5));
        }
    }
    Ok(model)
}
