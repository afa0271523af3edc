//! Experiment runner: subcommand definitions and their implementations.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::bias_sim::{self, CategoricalSimConfig, LogisticSimConfig};
use crate::config::{ConfigError, ExperimentConfig, Variant};
use crate::debiaser::DebiaserConfig;
use crate::metrics::{self, ErrorTable, SeedSummary};
use crate::synth_ssl::train::TrainError;
use crate::synth_ssl::{generate_dataset, train, MetricsHistory, SynthDataset, SynthDatasetSpec, TrainConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "tamatch", version, about = "Debiased pseudo-labeling experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; nothing is written outside it.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Master seed. Drawn from entropy (and recorded) when absent.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte Carlo sweep of the categorical self-training model.
    BiasSim(BiasSimArgs),
    /// Deterministic bias dynamics of 1-D logistic regression.
    LogisticSim(LogisticSimArgs),
    /// Train on a synthetic dataset, one run per seed.
    Train(TrainArgs),
    /// Compare debiaser variants across seeds.
    Ablate(AblateArgs),
    /// Friedman ranks of an error table.
    Rank(RankArgs),
}

#[derive(Debug, Args)]
pub struct BiasSimArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub trajectories: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Batch sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub n_list: Option<Vec<usize>>,
    /// Initial p1 values, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub p1_grid: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct LogisticSimArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub b_init: Option<f64>,
    #[arg(long)]
    pub balance_weights: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    Rescale,
    Reweight,
    #[value(name = "target_update")]
    TargetUpdate,
    Clipping,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Turn off one debiaser feature; repeatable.
    #[arg(long, value_enum)]
    pub ablate: Vec<Ablation>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Run seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Variants to compare, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[command(flatten)]
    pub common: Common,
    /// ErrorTable CSV (`method,task...`).
    pub table: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSource {
    Flag,
    Config,
    Entropy,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub master_seed: u64,
    pub seed_source: SeedSource,
    pub config: serde_json::Value,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<PathBuf>,
}

/// Everything a run needs besides its command-specific config.
struct Session {
    command: &'static str,
    out: PathBuf,
    master_seed: u64,
    seed_source: SeedSource,
    started_at: DateTime<Utc>,
    pool: rayon::ThreadPool,
    outputs: Vec<PathBuf>,
}

impl Session {
    fn new(command: &'static str, common: &Common, file: &ExperimentConfig) -> Result<Self, CliError> {
        let (master_seed, seed_source) = match (common.seed, file.seed) {
            (Some(s), _) => (s, SeedSource::Flag),
            (None, Some(s)) => (s, SeedSource::Config),
            (None, None) => (rand::random::<u64>(), SeedSource::Entropy),
        };
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(j) = common.jobs {
            if j == 0 {
                return Err(CliError::Config("--jobs must be >= 1".into()));
            }
            builder = builder.num_threads(j);
        }
        let pool = builder
            .build()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
        Ok(Self {
            command,
            out: common.out.clone(),
            master_seed,
            seed_source,
            started_at: Utc::now(),
            pool,
            outputs: Vec::new(),
        })
    }

    fn ensure_out(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.out).map_err(|e| io_err(&self.out, e))
    }

    /// Writes `bytes` to `out/rel` through a temporary file and a rename.
    fn write(&mut self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<(), CliError> {
        let rel = rel.as_ref();
        let path = self.out.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        write_atomic(&path, bytes)?;
        self.outputs.push(rel.to_path_buf());
        Ok(())
    }

    fn finish<T: Serialize>(mut self, config: &T) -> Result<(), CliError> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed: self.master_seed,
            seed_source: self.seed_source,
            config: serde_json::to_value(config).map_err(|e| CliError::Runtime(e.to_string()))?,
            started_at: self.started_at.to_rfc3339(),
            finished_at: Utc::now().to_rfc3339(),
            outputs: std::mem::take(&mut self.outputs),
        };
        let json = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
        write_atomic(&self.out.join("manifest.json"), &json)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn load_config(common: &Common) -> Result<ExperimentConfig, CliError> {
    match &common.config {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

/// Seed of one training run, mixed from the master seed and a listed seed.
pub fn run_seed(master: u64, seed: u64) -> u64 {
    splitmix64(master ^ splitmix64(seed))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::BiasSim(a) => cmd_bias_sim(a),
        Command::LogisticSim(a) => cmd_logistic_sim(a),
        Command::Train(a) => cmd_train(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Rank(a) => cmd_rank(a),
    }
}

#[derive(Debug, Serialize)]
struct BiasSimResolved {
    sim: CategoricalSimConfig,
    n_list: Vec<usize>,
}

pub fn cmd_bias_sim(a: BiasSimArgs) -> Result<(), CliError> {
    let mut file = load_config(&a.common)?;
    if let Some(v) = a.trajectories {
        file.sim.trajectories = v;
    }
    if let Some(v) = a.steps {
        file.sim.steps = v;
    }
    if let Some(v) = a.eta {
        file.sim.eta = v;
    }
    if let Some(v) = a.n_list {
        file.sim.n_list = v;
    }
    if let Some(v) = a.p1_grid {
        file.sim.p1_init_grid = v;
    }
    let mut s = Session::new("bias-sim", &a.common, &file)?;
    let sim = file.sim.resolve(s.master_seed)?;
    let n_list = file.sim.n_list.clone();

    let rows = s
        .pool
        .install(|| bias_sim::sweep(&sim, &n_list))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut buf = Vec::new();
    bias_sim::write_sweep_csv(&rows, &mut buf).map_err(|e| CliError::Runtime(e.to_string()))?;

    s.ensure_out()?;
    s.write("bias_sim.csv", &buf)?;
    s.finish(&BiasSimResolved { sim, n_list })
}

#[derive(Debug, Serialize)]
struct LogisticResolved {
    logistic: LogisticSimConfig,
}

pub fn cmd_logistic_sim(a: LogisticSimArgs) -> Result<(), CliError> {
    let mut file = load_config(&a.common)?;
    let cfg = &mut file.logistic;
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.eta {
        cfg.eta = v;
    }
    if let Some(v) = a.tau {
        cfg.tau = v;
    }
    if let Some(v) = a.b_init {
        cfg.b_init = v;
    }
    if a.balance_weights {
        cfg.balance_weights = true;
    }
    crate::config::validate_logistic(cfg)?;
    let logistic = cfg.clone();
    let mut s = Session::new("logistic-sim", &a.common, &file)?;

    let rows = bias_sim::run_logistic(&logistic).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut buf = Vec::new();
    bias_sim::write_logistic_csv(&rows, &mut buf).map_err(|e| CliError::Runtime(e.to_string()))?;

    s.ensure_out()?;
    s.write("logistic_sim.csv", &buf)?;
    s.finish(&LogisticResolved { logistic })
}

/// Dataset and trainer settings after presets, file values and flags.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedTraining {
    pub master_seed: u64,
    pub dataset: SynthDatasetSpec,
    pub trainer: TrainConfig,
}

impl ResolvedTraining {
    pub fn from_config(
        file: &ExperimentConfig,
        master_seed: u64,
        steps: Option<usize>,
        seeds: Option<Vec<u64>>,
    ) -> Result<Self, ConfigError> {
        let dataset = file.dataset.resolve(master_seed)?;
        let deb = file.debiaser.resolve(dataset.num_classes, dataset.gamma)?;
        let mut section = file.trainer.clone();
        if steps.is_some() {
            section.steps = steps;
        }
        if seeds.is_some() {
            section.seeds = seeds;
        }
        let trainer = section.resolve(&dataset, deb)?;
        Ok(Self {
            master_seed,
            dataset,
            trainer,
        })
    }
}

/// Outcome of one (debiaser config, seed) run.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub run_seed: u64,
    pub history: MetricsHistory,
    pub diverged_at: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedRunSummary {
    pub seed: u64,
    pub run_seed: u64,
    pub final_test_error: f64,
    pub time_avg_kl_model: f64,
    pub util_final_third: f64,
    pub diverged_at: Option<usize>,
}

impl SeedRun {
    pub fn summary(&self, total_steps: usize) -> SeedRunSummary {
        SeedRunSummary {
            seed: self.seed,
            run_seed: self.run_seed,
            final_test_error: self.history.final_test_error(),
            time_avg_kl_model: self.history.time_averaged_kl_model(),
            util_final_third: self.history.mean_util_tail(total_steps, 1.0 / 3.0),
            diverged_at: self.diverged_at,
        }
    }
}

/// Trains one run per listed seed in parallel; results keep the seed order.
pub fn run_seeds(
    trainer: &TrainConfig,
    debiaser: &DebiaserConfig,
    data: &SynthDataset,
    master_seed: u64,
) -> Result<Vec<SeedRun>, CliError> {
    let cfg = TrainConfig {
        debiaser: debiaser.clone(),
        ..trainer.clone()
    };
    cfg.seeds
        .par_iter()
        .map(|&seed| {
            let rs = run_seed(master_seed, seed);
            match train(&cfg, data, rs) {
                Ok(history) => Ok(SeedRun {
                    seed,
                    run_seed: rs,
                    history,
                    diverged_at: None,
                }),
                Err(TrainError::Diverged { step, history }) => Ok(SeedRun {
                    seed,
                    run_seed: rs,
                    history,
                    diverged_at: Some(step),
                }),
                Err(TrainError::Synth(e)) => Err(CliError::Runtime(e.to_string())),
            }
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct Aggregate {
    seeds: Vec<u64>,
    final_test_error: SeedSummary,
    time_avg_kl_model: SeedSummary,
    runs: Vec<SeedRunSummary>,
}

fn aggregate(runs: &[SeedRun], total_steps: usize) -> Result<Aggregate, CliError> {
    let summaries: Vec<SeedRunSummary> = runs.iter().map(|r| r.summary(total_steps)).collect();
    let err: Vec<f64> = summaries.iter().map(|s| s.final_test_error).collect();
    let kl: Vec<f64> = summaries.iter().map(|s| s.time_avg_kl_model).collect();
    let m = |e: metrics::MetricsError| CliError::Runtime(e.to_string());
    Ok(Aggregate {
        seeds: runs.iter().map(|r| r.seed).collect(),
        final_test_error: metrics::seed_aggregate(&err).map_err(m)?,
        time_avg_kl_model: metrics::seed_aggregate(&kl).map_err(m)?,
        runs: summaries,
    })
}

fn write_runs(s: &mut Session, dir: &Path, runs: &[SeedRun]) -> Result<(), CliError> {
    for r in runs {
        let csv = r.history.to_csv_string();
        s.write(dir.join(format!("metrics_seed{}.csv", r.seed)), csv.as_bytes())?;
    }
    Ok(())
}

fn diverged(runs: &[SeedRun], label: &str) -> Option<String> {
    runs.iter().find_map(|r| {
        r.diverged_at
            .map(|step| format!("{label}seed {} diverged at step {step}", r.seed))
    })
}

fn dataset_for(resolved: &ResolvedTraining) -> Result<SynthDataset, CliError> {
    generate_dataset(&resolved.dataset).map_err(|e| CliError::Config(e.to_string()))
}

#[derive(Debug, Serialize)]
struct TrainResolved<'a> {
    #[serde(flatten)]
    training: &'a ResolvedTraining,
    ablate: Vec<&'static str>,
}

pub fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let file = load_config(&a.common)?;
    let mut s = Session::new("train", &a.common, &file)?;
    let mut resolved = ResolvedTraining::from_config(&file, s.master_seed, a.steps, a.seeds)?;
    for ab in &a.ablate {
        let d = &mut resolved.trainer.debiaser;
        match ab {
            Ablation::Rescale => d.enable_rescale = false,
            Ablation::Reweight => d.enable_reweight = false,
            Ablation::TargetUpdate => d.enable_target_update = false,
            Ablation::Clipping => d.enable_clipping = false,
        }
    }
    let data = dataset_for(&resolved)?;
    let runs = s
        .pool
        .install(|| run_seeds(&resolved.trainer, &resolved.trainer.debiaser, &data, s.master_seed))?;

    s.ensure_out()?;
    write_runs(&mut s, Path::new(""), &runs)?;
    let agg = aggregate(&runs, resolved.trainer.steps)?;
    let json = serde_json::to_vec_pretty(&agg).map_err(|e| CliError::Runtime(e.to_string()))?;
    s.write("aggregate.json", &json)?;
    let failure = diverged(&runs, "");
    let names = a
        .ablate
        .iter()
        .map(|ab| match ab {
            Ablation::Rescale => "rescale",
            Ablation::Reweight => "reweight",
            Ablation::TargetUpdate => "target_update",
            Ablation::Clipping => "clipping",
        })
        .collect();
    s.finish(&TrainResolved {
        training: &resolved,
        ablate: names,
    })?;
    match failure {
        Some(msg) => Err(CliError::Runtime(msg)),
        None => Ok(()),
    }
}

/// Results of one debiaser variant in an ablation.
#[derive(Debug, Clone)]
pub struct VariantRuns {
    pub variant: Variant,
    pub debiaser: DebiaserConfig,
    pub runs: Vec<SeedRun>,
}

/// Trains every (variant, seed) pair. All variants share the dataset and the
/// per-seed run seeds, so they differ only in the debiaser.
pub fn run_ablation(
    resolved: &ResolvedTraining,
    data: &SynthDataset,
    variants: &[Variant],
) -> Result<Vec<VariantRuns>, CliError> {
    variants
        .par_iter()
        .map(|&v| {
            let debiaser = v.apply(&resolved.trainer.debiaser);
            let runs = run_seeds(&resolved.trainer, &debiaser, data, resolved.master_seed)?;
            Ok(VariantRuns {
                variant: v,
                debiaser,
                runs,
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct AblateResolved<'a> {
    #[serde(flatten)]
    training: &'a ResolvedTraining,
    variants: Vec<Variant>,
}

#[derive(Debug, Serialize)]
struct VariantSummary {
    variant: Variant,
    debiaser: DebiaserConfig,
    #[serde(flatten)]
    aggregate: Aggregate,
}

pub fn cmd_ablate(a: AblateArgs) -> Result<(), CliError> {
    let file = load_config(&a.common)?;
    let variants = match &a.variants {
        Some(names) => names
            .iter()
            .map(|n| Variant::parse(n).ok_or_else(|| CliError::Config(format!("unknown variant `{n}`"))))
            .collect::<Result<Vec<_>, _>>()?,
        None => file.ablate.variants.clone(),
    };
    if variants.is_empty() {
        return Err(CliError::Config("no variants selected".into()));
    }
    let mut s = Session::new("ablate", &a.common, &file)?;
    let resolved = ResolvedTraining::from_config(&file, s.master_seed, a.steps, a.seeds)?;
    let data = dataset_for(&resolved)?;
    let results = s.pool.install(|| run_ablation(&resolved, &data, &variants))?;

    s.ensure_out()?;
    let steps = resolved.trainer.steps;
    let mut summaries = Vec::new();
    for vr in &results {
        write_runs(&mut s, Path::new(vr.variant.name()), &vr.runs)?;
        summaries.push(VariantSummary {
            variant: vr.variant,
            debiaser: vr.debiaser.clone(),
            aggregate: aggregate(&vr.runs, steps)?,
        });
    }
    let table = ErrorTable::new(
        results.iter().map(|vr| vr.variant.name().to_string()).collect(),
        resolved.trainer.seeds.iter().map(|sd| format!("seed_{sd}")).collect(),
        results
            .iter()
            .map(|vr| vr.runs.iter().map(|r| r.history.final_test_error()).collect())
            .collect(),
    );
    let failure = results
        .iter()
        .find_map(|vr| diverged(&vr.runs, &format!("{}: ", vr.variant.name())));

    // A diverged run leaves NaN errors, which the table format rejects.
    if let Ok(table) = &table {
        let mut buf = Vec::new();
        table.write_csv(&mut buf).map_err(|e| CliError::Runtime(e.to_string()))?;
        s.write("ablation_table.csv", &buf)?;
    }
    let json = serde_json::to_vec_pretty(&summaries).map_err(|e| CliError::Runtime(e.to_string()))?;
    s.write("ablation_summary.json", &json)?;
    s.finish(&AblateResolved {
        training: &resolved,
        variants,
    })?;
    match (failure, table) {
        (Some(msg), _) => Err(CliError::Runtime(msg)),
        (None, Err(e)) => Err(CliError::Runtime(e.to_string())),
        (None, Ok(_)) => Ok(()),
    }
}

#[derive(Debug, Serialize)]
struct RankResolved {
    table: PathBuf,
}

pub fn cmd_rank(a: RankArgs) -> Result<(), CliError> {
    let file = load_config(&a.common)?;
    let input = fs::File::open(&a.table)
        .map_err(|e| CliError::Config(format!("{}: {e}", a.table.display())))?;
    let table = ErrorTable::read_csv(input).map_err(|e| CliError::Config(e.to_string()))?;
    let mut ranks = metrics::friedman_rank(&table).map_err(|e| CliError::Config(e.to_string()))?;
    ranks.sort_by(|x, y| x.mean_rank.total_cmp(&y.mean_rank));

    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in &ranks {
        w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let buf = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;

    let mut s = Session::new("rank", &a.common, &file)?;
    s.ensure_out()?;
    s.write("rank.csv", &buf)?;
    print!("{}", String::from_utf8_lossy(&buf));
    s.finish(&RankResolved { table: a.table })
}
