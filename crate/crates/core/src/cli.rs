//! Command-line front end. Each subcommand runs one pipeline stage and reads
//! the previous stage's artifacts, so a run can be resumed or audited.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::datamodel::{load_dataset, save_dataset, SequenceDataset};
use crate::error::{DbmError, Result};
use crate::harness::{
    bootstrap_stage, complexity_probe, induce_stage, mistats_stage, per_frame, retrain_stage, run_pipeline,
    split_stage, PipelineConfig, ProbeConfig, SeedRecord, Variant, World,
};
use crate::inference::classify;
use crate::infotheory::MiStats;
use crate::io::{check_schema, read_json, write_json, SCHEMA};
use crate::model::DbmModel;
use crate::structure::DependencySpec;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Everything a run needs besides paths. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema: String,
    pub seed: u64,
    pub world: World,
    pub pipeline: PipelineConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema: SCHEMA.to_string(),
            seed: 0,
            world: World::Recovery { seqs_per_class: 120 },
            pipeline: PipelineConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let config: RunConfig = read_json(path)?;
        check_schema(path, &config.schema)?;
        Ok(config)
    }
}

#[derive(Debug, Parser)]
#[command(name = "dbm", version, about = "Dynamic Bayesian multinet sequence classifiers")]
pub struct Cli {
    /// Print errors as one JSON record on standard error.
    #[arg(long, global = true)]
    pub json_errors: bool,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured experiment seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic dataset from the configured world.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Split, standardize, and fit the structure-free bootstrap system.
    TrainBootstrap {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
    },
    /// Viterbi-align the training set and tabulate mutual information.
    MiStats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Standardized training manifest written by `train-bootstrap`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Select parents for each variant from the MI tables.
    Induce {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mistats: PathBuf,
        /// Variant names; defaults to the configured list.
        #[arg(long = "variant")]
        variants: Vec<String>,
    },
    /// Attach a structure to the bootstrap model and rerun EM.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Classify a dataset and report scores, predictions and confusion.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Training manifest, for the per-frame training log-likelihood.
        #[arg(long)]
        train_data: Option<PathBuf>,
        /// Training trace, for the EM iteration count.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Full pipeline for every configured variant.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest; the configured world is sampled when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Time the forward recursion and emission evaluation over a grid.
    Bench {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Generate { common }
            | Command::TrainBootstrap { common, .. }
            | Command::MiStats { common, .. }
            | Command::Induce { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Compare { common, .. }
            | Command::Bench { common } => common,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEval {
    pub index: usize,
    pub label: String,
    pub predicted: String,
    pub loglik: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub variant: Option<Variant>,
    pub classes: Vec<String>,
    pub sequences: Vec<SequenceEval>,
    /// Rows are true classes, columns predicted classes, both in `classes` order.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub params: usize,
    pub edges: usize,
    pub em_iterations: Option<usize>,
    pub test_loglik_per_frame: f64,
    pub train_loglik_per_frame: Option<f64>,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_DATA };
            if cli.json_errors {
                let record = serde_json::json!({ "error": e.kind(), "message": e.to_string(), "exit_code": code });
                eprintln!("{record}");
            } else {
                eprintln!("error: {e}");
            }
            code
        }
    }
}

/// Runs the parsed command inside a pool of the requested size.
pub fn execute(cli: &Cli) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(DbmError::Config("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| DbmError::Config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(&cli.command))
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.pipeline.validate()?;
    fs::create_dir_all(&common.out).map_err(|e| DbmError::io(&common.out, e))?;
    write_json(&common.out.join("config.resolved.json"), &config)?;
    write_json(&common.out.join("seeds.json"), &SeedRecord::new(config.seed))?;
    Ok(config)
}

fn dispatch(command: &Command) -> Result<()> {
    let common = command.common();
    let config = resolve(common)?;
    let out = common.out.as_path();
    let seeds = SeedRecord::new(config.seed);
    let pipe = &config.pipeline;
    match command {
        Command::Generate { .. } => {
            let (data, truth) = config.world.sample(config.seed)?;
            save_dataset(&data, out, "dataset")?;
            write_json(&out.join("truth.json"), &truth)
        }
        Command::TrainBootstrap { data, .. } => {
            let dataset = load_dataset(data)?;
            let (train, test, standardizer) = split_stage(&dataset, pipe, &seeds)?;
            let (model, trace) = bootstrap_stage(&train, standardizer, pipe, &seeds)?;
            save_dataset(&train, &out.join("train"), "train")?;
            save_dataset(&test, &out.join("test"), "test")?;
            model.save(&out.join("model.json"))?;
            write_trace(&out.join("trace.csv"), &trace, train.total_frames())
        }
        Command::MiStats { model, data, .. } => {
            let model = DbmModel::load(model)?;
            let train = load_dataset(data)?;
            let stats = mistats_stage(&model, &train, pipe)?;
            write_json(&out.join("mistats.json"), &stats)
        }
        Command::Induce { mistats, variants, .. } => {
            let stats: MiStats = read_json(mistats)?;
            check_schema(mistats, &stats.schema)?;
            let variants = if variants.is_empty() {
                pipe.variants.clone()
            } else {
                variants.iter().map(|v| parse_variant(v)).collect::<Result<_>>()?
            };
            for (v, spec) in induce_stage(&stats, pipe, &variants, &seeds)? {
                write_json(&out.join(format!("spec-{}.json", v.name())), &spec)?;
            }
            Ok(())
        }
        Command::Train { model, spec, data, .. } => {
            let bootstrap = DbmModel::load(model)?;
            let spec: DependencySpec = read_json(spec)?;
            let train = load_dataset(data)?;
            let (model, trace) = retrain_stage(&bootstrap, &spec, &train, pipe, &seeds)?;
            model.save(&out.join("model.json"))?;
            write_trace(&out.join("trace.csv"), &trace, train.total_frames())
        }
        Command::Eval { model, data, train_data, trace, variant, .. } => {
            let model = DbmModel::load(model)?;
            let test = load_dataset(data)?;
            let train = train_data.as_deref().map(load_dataset).transpose()?;
            let iterations = trace.as_deref().map(read_trace_len).transpose()?.map(|n| n.saturating_sub(1));
            let variant = variant.as_deref().map(parse_variant).transpose()?;
            let report = evaluate(&model, &test, train.as_ref(), iterations, variant)?;
            write_json(&out.join("eval.json"), &report)
        }
        Command::Compare { data, .. } => {
            let dataset = match data {
                Some(path) => load_dataset(path)?,
                None => config.world.sample(config.seed)?.0,
            };
            let artifacts = run_pipeline(&dataset, pipe, config.seed)?;
            artifacts.report.save(out)
        }
        Command::Bench { .. } => {
            let probe = ProbeConfig { seed: config.seed, ..config.probe.clone() };
            let report = complexity_probe(&probe)?;
            write_json(&out.join("probe.json"), &report)?;
            let mut csv = String::from("axis,n,t,k,seconds\n");
            for r in &report.rows {
                let _ = writeln!(csv, "{},{},{},{},{:?}", r.axis, r.n, r.t, r.k, r.seconds);
            }
            let path = out.join("probe.csv");
            fs::write(&path, csv).map_err(|e| DbmError::io(&path, e))
        }
    }
}

fn parse_variant(name: &str) -> Result<Variant> {
    Variant::from_name(name).ok_or_else(|| {
        let known: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
        DbmError::Config(format!("unknown variant {name:?}, expected one of {}", known.join(", ")))
    })
}

/// Scores, predictions and confusion matrix of `model` on `test`.
pub fn evaluate(
    model: &DbmModel,
    test: &SequenceDataset,
    train: Option<&SequenceDataset>,
    em_iterations: Option<usize>,
    variant: Option<Variant>,
) -> Result<EvalReport> {
    use rayon::prelude::*;
    let scored: Vec<(String, Vec<(String, f64)>)> =
        test.sequences.par_iter().map(|s| classify(model, &s.frames)).collect::<Result<_>>()?;
    let classes = test.classes.clone();
    let mut confusion = vec![vec![0usize; classes.len()]; classes.len()];
    let mut sequences = Vec::with_capacity(test.len());
    let mut hits = 0usize;
    for (index, (seq, (predicted, scores))) in test.sequences.iter().zip(scored).enumerate() {
        if let (Some(r), Some(c)) = (test.class_index(&seq.label), test.class_index(&predicted)) {
            confusion[r][c] += 1;
        }
        hits += usize::from(predicted == seq.label);
        sequences.push(SequenceEval {
            index,
            label: seq.label.clone(),
            predicted,
            loglik: scores.into_iter().collect(),
        });
    }
    Ok(EvalReport {
        schema: SCHEMA.to_string(),
        variant,
        classes,
        sequences,
        confusion,
        accuracy: hits as f64 / test.len() as f64,
        params: model.param_count(),
        edges: model.spec.total_edges(),
        em_iterations,
        test_loglik_per_frame: per_frame(model, test)?,
        train_loglik_per_frame: train.map(|t| per_frame(model, t)).transpose()?,
    })
}

fn write_trace(path: &Path, trace: &[f64], frames: usize) -> Result<()> {
    let mut csv = String::from("iteration,total_loglik,per_frame_loglik\n");
    for (k, ll) in trace.iter().enumerate() {
        let _ = writeln!(csv, "{k},{ll:?},{:?}", ll / frames as f64);
    }
    fs::write(path, csv).map_err(|e| DbmError::io(path, e))
}

fn read_trace_len(path: &Path) -> Result<usize> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| DbmError::Invalid(format!("{}: {e}", path.display())))?;
    let mut rows = 0;
    for record in reader.records() {
        record.map_err(|e| DbmError::Invalid(format!("{}: {e}", path.display())))?;
        rows += 1;
    }
    Ok(rows)
}
