//! Batch entry point: simulate datasets, fit models, and run replication
//! studies from a JSON config, emitting plot-ready CSV/JSON artifacts.
//!
//! All outputs are pure functions of (config, input files): seeds are
//! required, per-replication seeds are derived from the master seed, and
//! floats are written with 17 significant digits so re-runs are
//! byte-identical regardless of worker count.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{
    run_global, run_independent, GlobalOptions, IndependentOptions, RunResult, Schedule,
    TrajectoryRecord,
};
use crate::error::{Error, Result};
use crate::inference::{confidence_report, ellipsoid_contains, ConfidenceReport};
use crate::model::{GlobalModel, IndependentModel};
use crate::models::logistic::{LogisticParams, UnitData};
use crate::models::sbm::{apply_label_permutation, sbm_align_labels, SbmParams};
use crate::models::{Adjacency, LogisticGrowthNlme, Sbm, ToyGaussian};
use crate::models::toy::toy_mle_oracle;
use crate::numerics::SymMatrix;
use crate::reparam::Bijection;

// ---------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyTruth {
    pub mu: f64,
    pub omega2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SbmDataFormat {
    #[default]
    Dense,
    EdgeList,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Toy {
        n_units: usize,
        sigma2_noise: f64,
        #[serde(default)]
        truth: Option<ToyTruth>,
    },
    Logistic {
        n_units: usize,
        #[serde(default)]
        times: Option<Vec<f64>>,
        #[serde(default)]
        truth: Option<LogisticParams>,
    },
    Sbm {
        n_nodes: usize,
        k: usize,
        #[serde(default)]
        format: SbmDataFormat,
        #[serde(default)]
        truth: Option<SbmParams>,
    },
}

/// Schedule fields, all optional; unset fields take the library
/// defaults for the configured iteration count.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub k_total: Option<usize>,
    pub gamma0: Option<f64>,
    pub k_pre: Option<usize>,
    pub alpha: Option<f64>,
    pub k_heat_min: Option<usize>,
    pub c_heating: Option<f64>,
    pub r_tail: Option<usize>,
}

impl ScheduleConfig {
    pub fn build(&self, iters_override: Option<usize>) -> Schedule {
        let k_total = iters_override.or(self.k_total).unwrap_or(5000);
        let mut s = Schedule::new(k_total);
        if let Some(v) = self.gamma0 {
            s.gamma0 = v;
        }
        if let Some(v) = self.k_pre {
            s.k_pre = v;
        }
        if let Some(v) = self.alpha {
            s.alpha = v;
        }
        if let Some(v) = self.k_heat_min {
            s.k_heat_min = v;
        }
        if let Some(v) = self.c_heating {
            s.c_heating = v;
        }
        if let Some(v) = self.r_tail {
            s.r_tail = v;
        }
        s
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    #[serde(default = "default_sweeps")]
    pub sweeps: usize,
    #[serde(default = "default_scale")]
    pub initial_scale: f64,
    #[serde(default = "default_true")]
    pub adaptation: bool,
}

fn default_sweeps() -> usize {
    1
}
fn default_scale() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { sweeps: 1, initial_scale: 1.0, adaptation: true }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitConfig {
    /// theta0 uniform on [-1, 1]^d in chart space.
    #[default]
    Random,
    Explicit {
        theta: Vec<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    /// Master seed; required so no run depends on wall-clock entropy.
    pub seed: u64,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default = "default_max_restarts")]
    pub max_restarts: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_max_restarts() -> usize {
    20
}
fn default_level() -> f64 {
    0.95
}
fn default_replications() -> usize {
    50
}
fn default_workers() -> usize {
    1
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        Ok(config)
    }
}

// ---------------------------------------------------------------------
// Command-line interface
// ---------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(name = "fisher-sgd", about = "Preconditioned stochastic gradient MLE for latent variable models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the total iteration count.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Output directory (default from config, then "out").
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Data file (fit only; default <out>/data.csv).
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a dataset from the configured true parameters.
    Simulate(CommonArgs),
    /// Fit the model to a dataset.
    Fit(CommonArgs),
    /// Run a replication study (simulate + fit, many times).
    Replicate {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of replications (default from config).
        #[arg(long)]
        reps: Option<usize>,
        /// Worker threads (default from config).
        #[arg(long)]
        workers: Option<usize>,
    },
}

/// Exit code policy: 2 for configuration and I/O problems, 1 for
/// numerical failures.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Config(_)
        | Error::Io(_)
        | Error::Json(_)
        | Error::Csv(_)
        | Error::Domain(_)
        | Error::ConstraintViolation(_)
        | Error::DimensionMismatch { .. } => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => {
            let (config, out) = load(&args)?;
            cmd_simulate(&config, &out)
        }
        Command::Fit(args) => {
            let (config, out) = load(&args)?;
            let data = args
                .data
                .or_else(|| config.data.clone())
                .unwrap_or_else(|| out.join("data.csv"));
            cmd_fit(&config, &data, &out)
        }
        Command::Replicate { common, reps, workers } => {
            let (config, out) = load(&common)?;
            let reps = reps.unwrap_or(config.replications);
            let workers = workers.unwrap_or(config.workers);
            cmd_replicate(&config, reps, workers, &out)
        }
    }
}

fn load(args: &CommonArgs) -> Result<(RunConfig, PathBuf)> {
    let mut config = RunConfig::from_path(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(iters) = args.iters {
        config.schedule.k_total = Some(iters);
        if config.schedule.r_tail.is_none() {
            // Keep the default tail rule in sync with the override.
            config.schedule.r_tail = Some((iters / 10).clamp(1, 1000));
        }
    }
    let out = args
        .out
        .clone()
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((config, out))
}

// ---------------------------------------------------------------------
// Shared output plumbing
// ---------------------------------------------------------------------

/// 17-significant-digit decimal form, enough to round-trip any f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, Serialize)]
pub struct NamedValue {
    pub name: String,
    pub value: f64,
}

fn named(names: &[String], values: &[f64]) -> Vec<NamedValue> {
    names
        .iter()
        .zip(values)
        .map(|(name, &value)| NamedValue { name: name.clone(), value })
        .collect()
}

#[derive(Debug, Serialize)]
struct PhasesJson {
    k_end_preheating: usize,
    k_end_heating: Option<usize>,
}

#[derive(Debug, Serialize)]
struct DiagnosticsJson {
    seed: u64,
    k_total: usize,
    restarts: usize,
    mean_acceptance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    posterior_mode_labels: Option<Vec<usize>>,
}

#[derive(Debug, Serialize)]
struct ResultJson {
    theta_hat_chart: Vec<f64>,
    theta_hat_original: Vec<NamedValue>,
    fim_whole: SymMatrix,
    ci: ConfidenceReport,
    phases: PhasesJson,
    diagnostics: DiagnosticsJson,
}

#[derive(Debug, Serialize)]
struct TruthJson {
    theta_chart: Vec<f64>,
    params: Vec<NamedValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<usize>>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_trajectory_csv(
    path: &Path,
    records: &[TrajectoryRecord],
    names: &[String],
    reparam: &Bijection,
) -> Result<()> {
    let mut out = String::new();
    out.push_str("iter,gamma,phase");
    for j in 1..=reparam.free_dim() {
        out.push_str(&format!(",theta_{j}"));
    }
    for name in names {
        out.push(',');
        out.push_str(name);
    }
    out.push_str(",grad_norm,mean_acceptance\n");
    for r in records {
        out.push_str(&format!("{},{},{}", r.k, fmt_f64(r.gamma), r.phase.as_str()));
        for t in &r.theta {
            out.push(',');
            out.push_str(&fmt_f64(*t));
        }
        for v in reparam.forward(&r.theta) {
            out.push(',');
            out.push_str(&fmt_f64(v));
        }
        out.push(',');
        out.push_str(&fmt_f64(r.grad_norm));
        out.push(',');
        out.push_str(&fmt_f64(r.accept_rate));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------
// Data files
// ---------------------------------------------------------------------

fn parse_f64(field: &str, context: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::Config(format!("cannot parse number {field:?} in {context}")))
}

pub fn read_toy_csv(path: &Path) -> Result<Vec<f64>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut y = Vec::new();
    for record in reader.records() {
        let record = record?;
        let field = record
            .get(0)
            .ok_or_else(|| Error::Config(format!("empty row in {}", path.display())))?;
        y.push(parse_f64(field, "toy data")?);
    }
    if y.is_empty() {
        return Err(Error::Config(format!("no observations in {}", path.display())));
    }
    Ok(y)
}

pub fn write_toy_csv(path: &Path, y: &[f64]) -> Result<()> {
    let mut out = String::from("y\n");
    for v in y {
        out.push_str(&fmt_f64(*v));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_logistic_csv(path: &Path) -> Result<Vec<UnitData>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut units: Vec<UnitData> = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() < 3 {
            return Err(Error::Config(format!("row with <3 fields in {}", path.display())));
        }
        let id = record[0].trim().to_string();
        let time = parse_f64(&record[1], "logistic data")?;
        let y = parse_f64(&record[2], "logistic data")?;
        let slot = *index.entry(id).or_insert_with(|| {
            units.push(UnitData { times: Vec::new(), y: Vec::new() });
            units.len() - 1
        });
        units[slot].times.push(time);
        units[slot].y.push(y);
    }
    if units.is_empty() {
        return Err(Error::Config(format!("no observations in {}", path.display())));
    }
    Ok(units)
}

pub fn write_logistic_csv(path: &Path, units: &[UnitData]) -> Result<()> {
    let mut out = String::from("id,time,y\n");
    for (i, unit) in units.iter().enumerate() {
        for (t, y) in unit.times.iter().zip(&unit.y) {
            out.push_str(&format!("{},{},{}\n", i + 1, fmt_f64(*t), fmt_f64(*y)));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_adjacency_dense(path: &Path) -> Result<Adjacency> {
    let file = fs::File::open(path)?;
    let mut rows: Vec<u8> = Vec::new();
    let mut n = 0usize;
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<u8> = line
            .split(',')
            .map(|f| match f.trim() {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(Error::Config(format!("adjacency entries must be 0/1, got {other:?}"))),
            })
            .collect::<Result<_>>()?;
        if n == 0 {
            n = row.len();
        } else if row.len() != n {
            return Err(Error::Config(format!("ragged adjacency row in {}", path.display())));
        }
        rows.extend(row);
    }
    if rows.len() != n * n {
        return Err(Error::Config(format!("adjacency in {} is not square", path.display())));
    }
    Adjacency::from_rows(n, rows)
}

pub fn read_adjacency_edges(path: &Path, n: usize) -> Result<Adjacency> {
    let file = fs::File::open(path)?;
    let mut y = Adjacency::zeros(n);
    for line in BufReader::new(file).lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let parse = |p: Option<&str>| -> Result<usize> {
            p.and_then(|s| s.trim().parse::<usize>().ok())
                .ok_or_else(|| Error::Config(format!("bad edge row {line:?}")))
        };
        let i = parse(parts.next())?;
        let j = parse(parts.next())?;
        if i >= n || j >= n {
            return Err(Error::Config(format!("edge ({i},{j}) outside 0..{n}")));
        }
        if i != j {
            y.set(i, j, 1);
        }
    }
    Ok(y)
}

pub fn write_adjacency_dense(path: &Path, y: &Adjacency) -> Result<()> {
    let n = y.n_nodes();
    let mut out = String::new();
    for i in 0..n {
        for j in 0..n {
            if j > 0 {
                out.push(',');
            }
            out.push(if y.get(i, j) == 1 { '1' } else { '0' });
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn default_times() -> Vec<f64> {
    // 20 equally spaced observation times between 100 and 1500.
    (0..20).map(|j| 100.0 + j as f64 * (1400.0 / 19.0)).collect()
}

// ---------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------

struct SimulatedData {
    truth: TruthJson,
    toy_y: Option<Vec<f64>>,
    logistic_units: Option<Vec<UnitData>>,
    adjacency: Option<Adjacency>,
}

fn simulate_in_memory(config: &RunConfig, rng: &mut ChaCha8Rng) -> Result<SimulatedData> {
    match &config.model {
        ModelConfig::Toy { n_units, sigma2_noise, truth } => {
            let truth = truth
                .as_ref()
                .ok_or_else(|| Error::Config("toy simulation requires truth".into()))?;
            if truth.omega2 <= 0.0 || *sigma2_noise <= 0.0 {
                return Err(Error::Config("toy variances must be positive".into()));
            }
            let y = ToyGaussian::simulate(*n_units, truth.mu, truth.omega2, *sigma2_noise, rng);
            let model = ToyGaussian::new(y.clone(), *sigma2_noise);
            let flat = vec![truth.mu, truth.omega2];
            Ok(SimulatedData {
                truth: TruthJson {
                    theta_chart: model.reparam().inverse(&flat)?,
                    params: named(&model.param_names(), &flat),
                    labels: None,
                },
                toy_y: Some(y),
                logistic_units: None,
                adjacency: None,
            })
        }
        ModelConfig::Logistic { n_units, times, truth } => {
            let truth = truth
                .as_ref()
                .ok_or_else(|| Error::Config("logistic simulation requires truth".into()))?;
            let times = times.clone().unwrap_or_else(default_times);
            let units = LogisticGrowthNlme::simulate(*n_units, &times, truth, rng)?;
            let model = LogisticGrowthNlme::new(units.clone());
            let flat = truth.flatten();
            Ok(SimulatedData {
                truth: TruthJson {
                    theta_chart: model.reparam().inverse(&flat)?,
                    params: named(&model.param_names(), &flat),
                    labels: None,
                },
                toy_y: None,
                logistic_units: Some(units),
                adjacency: None,
            })
        }
        ModelConfig::Sbm { n_nodes, k, truth, .. } => {
            let truth = truth
                .as_ref()
                .ok_or_else(|| Error::Config("sbm simulation requires truth".into()))?;
            if truth.k() != *k {
                return Err(Error::Config(format!(
                    "truth has {} classes, config says {k}",
                    truth.k()
                )));
            }
            let (y, z) = Sbm::simulate(*n_nodes, truth, rng);
            let model = Sbm::new(y.clone(), *k);
            let flat = truth.flatten();
            Ok(SimulatedData {
                truth: TruthJson {
                    theta_chart: model.reparam().inverse(&flat)?,
                    params: named(&model.param_names(), &flat),
                    labels: Some(z),
                },
                toy_y: None,
                logistic_units: None,
                adjacency: Some(y),
            })
        }
    }
}

pub fn cmd_simulate(config: &RunConfig, out_dir: &Path) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sim = simulate_in_memory(config, &mut rng)?;
    fs::create_dir_all(out_dir)?;
    let data_path = out_dir.join("data.csv");
    if let Some(y) = &sim.toy_y {
        write_toy_csv(&data_path, y)?;
    }
    if let Some(units) = &sim.logistic_units {
        write_logistic_csv(&data_path, units)?;
    }
    if let Some(adj) = &sim.adjacency {
        write_adjacency_dense(&data_path, adj)?;
    }
    write_json(&out_dir.join("truth.json"), &sim.truth)?;
    Ok(())
}

// ---------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------

fn initial_theta(init: &InitConfig, d: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    match init {
        InitConfig::Random => Ok((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()),
        InitConfig::Explicit { theta } => {
            if theta.len() != d {
                return Err(Error::Config(format!(
                    "explicit theta0 has length {}, model needs {d}",
                    theta.len()
                )));
            }
            Ok(theta.clone())
        }
    }
}

/// Model-agnostic view of a finished run, for output assembly.
struct GenericRun {
    theta_hat: Vec<f64>,
    fim: SymMatrix,
    trajectory: Vec<TrajectoryRecord>,
    k_end_heating: Option<usize>,
    restarts: usize,
    mean_acceptance: f64,
    posterior_mode_labels: Option<Vec<usize>>,
}

struct GenericFailure {
    error: Error,
    trajectory: Vec<TrajectoryRecord>,
}

fn generic_ok<Z>(r: RunResult<Z>, labels: Option<Vec<usize>>) -> GenericRun {
    GenericRun {
        theta_hat: r.theta_hat,
        fim: r.fim_whole,
        trajectory: r.trajectory,
        k_end_heating: r.k_end_heating,
        restarts: r.restarts,
        mean_acceptance: r.mean_acceptance,
        posterior_mode_labels: labels,
    }
}

/// Per-node majority vote over the retained tail label draws.
fn posterior_mode_labels(tail: &[Vec<usize>], k: usize) -> Vec<usize> {
    let n = tail.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| {
            let mut counts = vec![0usize; k];
            for draw in tail {
                counts[draw[i]] += 1;
            }
            counts
                .iter()
                .enumerate()
                .max_by_key(|&(c, &count)| (count, std::cmp::Reverse(c)))
                .map(|(c, _)| c)
                .unwrap_or(0)
        })
        .collect()
}

enum BuiltModel {
    Toy(ToyGaussian),
    Logistic(LogisticGrowthNlme),
    Sbm(Sbm),
}

impl BuiltModel {
    fn names(&self) -> Vec<String> {
        match self {
            BuiltModel::Toy(m) => m.param_names(),
            BuiltModel::Logistic(m) => IndependentModel::param_names(m),
            BuiltModel::Sbm(m) => m.param_names(),
        }
    }

    fn reparam(&self) -> &Bijection {
        match self {
            BuiltModel::Toy(m) => m.reparam(),
            BuiltModel::Logistic(m) => IndependentModel::reparam(m),
            BuiltModel::Sbm(m) => GlobalModel::reparam(m),
        }
    }

    fn theta_dim(&self) -> usize {
        self.reparam().free_dim()
    }
}

fn build_model_from_file(config: &RunConfig, data_path: &Path) -> Result<BuiltModel> {
    if !data_path.exists() {
        return Err(Error::Config(format!("data file {} not found", data_path.display())));
    }
    match &config.model {
        ModelConfig::Toy { sigma2_noise, .. } => {
            Ok(BuiltModel::Toy(ToyGaussian::new(read_toy_csv(data_path)?, *sigma2_noise)))
        }
        ModelConfig::Logistic { .. } => {
            Ok(BuiltModel::Logistic(LogisticGrowthNlme::new(read_logistic_csv(data_path)?)))
        }
        ModelConfig::Sbm { n_nodes, k, format, .. } => {
            let y = match format {
                SbmDataFormat::Dense => read_adjacency_dense(data_path)?,
                SbmDataFormat::EdgeList => read_adjacency_edges(data_path, *n_nodes)?,
            };
            if y.n_nodes() != *n_nodes {
                return Err(Error::Config(format!(
                    "adjacency has {} nodes, config says {n_nodes}",
                    y.n_nodes()
                )));
            }
            Ok(BuiltModel::Sbm(Sbm::new(y, *k)))
        }
    }
}

fn fit_built(
    config: &RunConfig,
    model: &BuiltModel,
    schedule: &Schedule,
    record_trajectory: bool,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<GenericRun, GenericFailure> {
    let d = model.theta_dim();
    match model {
        BuiltModel::Toy(m) => {
            let theta0 = initial_theta(&config.init, d, rng)
                .map_err(|error| GenericFailure { error, trajectory: Vec::new() })?;
            let opts = IndependentOptions {
                sweeps: config.sampler.sweeps,
                initial_scale: config.sampler.initial_scale,
                adaptation: config.sampler.adaptation,
                force_mwg: false,
                record_trajectory,
            };
            run_independent(m, schedule, &theta0, &opts, rng)
                .map(|r| generic_ok(r, None))
                .map_err(|f| GenericFailure { error: f.error, trajectory: f.trajectory })
        }
        BuiltModel::Logistic(m) => {
            let theta0 = initial_theta(&config.init, d, rng)
                .map_err(|error| GenericFailure { error, trajectory: Vec::new() })?;
            let opts = IndependentOptions {
                sweeps: config.sampler.sweeps,
                initial_scale: config.sampler.initial_scale,
                adaptation: config.sampler.adaptation,
                force_mwg: false,
                record_trajectory,
            };
            run_independent(m, schedule, &theta0, &opts, rng)
                .map(|r| generic_ok(r, None))
                .map_err(|f| GenericFailure { error: f.error, trajectory: f.trajectory })
        }
        BuiltModel::Sbm(m) => {
            let init = config.init.clone();
            let init_theta = move |rng: &mut ChaCha8Rng| match &init {
                InitConfig::Random => (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                InitConfig::Explicit { theta } => theta.clone(),
            };
            if let InitConfig::Explicit { theta } = &config.init {
                if theta.len() != d {
                    return Err(GenericFailure {
                        error: Error::Config(format!(
                            "explicit theta0 has length {}, model needs {d}",
                            theta.len()
                        )),
                        trajectory: Vec::new(),
                    });
                }
            }
            let opts = GlobalOptions {
                sweeps: config.sampler.sweeps,
                max_restarts: config.max_restarts,
                record_trajectory,
            };
            run_global(m, schedule, &init_theta, &opts, rng)
                .map(|r| {
                    let labels = posterior_mode_labels(&r.tail_latents, m.k());
                    generic_ok(r, Some(labels))
                })
                .map_err(|f| GenericFailure { error: f.error, trajectory: f.trajectory })
        }
    }
}

pub fn cmd_fit(config: &RunConfig, data_path: &Path, out_dir: &Path) -> Result<()> {
    let model = build_model_from_file(config, data_path)?;
    let schedule = config.schedule.build(None);
    schedule.validate()?;
    fs::create_dir_all(out_dir)?;
    let names = model.names();
    let reparam = model.reparam().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    match fit_built(config, &model, &schedule, true, &mut rng) {
        Ok(run) => {
            write_trajectory_csv(&out_dir.join("trajectory.csv"), &run.trajectory, &names, &reparam)?;
            let report =
                confidence_report(&reparam, &run.theta_hat, &run.fim, config.level, &names)?;
            let original = reparam.forward(&run.theta_hat);
            let oracle_gap = match (&config.model, &model) {
                (ModelConfig::Toy { sigma2_noise, .. }, BuiltModel::Toy(m)) => {
                    let (mu, omega2) = toy_mle_oracle(m.data(), *sigma2_noise);
                    let oracle = reparam.inverse(&[mu, omega2])?;
                    Some(
                        run.theta_hat
                            .iter()
                            .zip(&oracle)
                            .map(|(a, b)| (a - b).abs())
                            .fold(0.0f64, f64::max),
                    )
                }
                _ => None,
            };
            let result = ResultJson {
                theta_hat_chart: run.theta_hat.clone(),
                theta_hat_original: named(&names, &original),
                fim_whole: run.fim.clone(),
                ci: report,
                phases: PhasesJson {
                    k_end_preheating: schedule.k_pre.min(schedule.k_total),
                    k_end_heating: run.k_end_heating,
                },
                diagnostics: DiagnosticsJson {
                    seed: config.seed,
                    k_total: schedule.k_total,
                    restarts: run.restarts,
                    mean_acceptance: run.mean_acceptance,
                    oracle_gap,
                    posterior_mode_labels: run.posterior_mode_labels,
                },
            };
            write_json(&out_dir.join("result.json"), &result)?;
            Ok(())
        }
        Err(failure) => {
            // Keep whatever trajectory exists for post-mortem plots.
            write_trajectory_csv(&out_dir.join("trajectory.csv"), &failure.trajectory, &names, &reparam)?;
            Err(failure.error)
        }
    }
}

// ---------------------------------------------------------------------
// replicate
// ---------------------------------------------------------------------

fn rep_seed(master: u64, index: usize) -> u64 {
    master ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug, Clone, Serialize)]
struct RepRecord {
    index: usize,
    seed: u64,
    status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    estimate: Option<Vec<NamedValue>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    errors: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    covered: Option<Vec<bool>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ellipsoid_covered: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    restarts: Option<usize>,
}

struct RepTruth {
    /// Flattened true original parameters.
    flat: Vec<f64>,
    names: Vec<String>,
}

fn truth_for_replicate(config: &RunConfig) -> Result<RepTruth> {
    match &config.model {
        ModelConfig::Toy { truth, .. } => {
            let t = truth
                .as_ref()
                .ok_or_else(|| Error::Config("replicate requires truth in the config".into()))?;
            Ok(RepTruth {
                flat: vec![t.mu, t.omega2],
                names: vec!["mu".into(), "omega2".into()],
            })
        }
        ModelConfig::Logistic { truth, .. } => {
            let t = truth
                .as_ref()
                .ok_or_else(|| Error::Config("replicate requires truth in the config".into()))?;
            Ok(RepTruth {
                flat: t.flatten(),
                names: [
                    "beta1", "beta2", "alpha", "Gamma11", "Gamma12", "Gamma21", "Gamma22",
                    "sigma2",
                ]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            })
        }
        ModelConfig::Sbm { truth, k, .. } => {
            let t = truth
                .as_ref()
                .ok_or_else(|| Error::Config("replicate requires truth in the config".into()))?;
            let mut names: Vec<String> = (1..=*k).map(|a| format!("alpha{a}")).collect();
            for a in 1..=*k {
                for b in 1..=*k {
                    names.push(format!("p{a}{b}"));
                }
            }
            Ok(RepTruth { flat: t.flatten(), names })
        }
    }
}

/// One full replication: simulate a dataset, fit it, score the estimate
/// against the truth. Self-contained and deterministic in (config, index).
fn run_replication(config: &RunConfig, schedule: &Schedule, index: usize) -> RepRecord {
    let seed = rep_seed(config.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fail = |e: &Error| RepRecord {
        index,
        seed,
        status: e.to_string(),
        estimate: None,
        errors: None,
        covered: None,
        ellipsoid_covered: None,
        restarts: None,
    };
    let sim = match simulate_in_memory(config, &mut rng) {
        Ok(s) => s,
        Err(e) => return fail(&e),
    };
    let model = match &config.model {
        ModelConfig::Toy { sigma2_noise, .. } => {
            BuiltModel::Toy(ToyGaussian::new(sim.toy_y.clone().unwrap(), *sigma2_noise))
        }
        ModelConfig::Logistic { .. } => {
            BuiltModel::Logistic(LogisticGrowthNlme::new(sim.logistic_units.clone().unwrap()))
        }
        ModelConfig::Sbm { k, .. } => BuiltModel::Sbm(Sbm::new(sim.adjacency.clone().unwrap(), *k)),
    };
    let run = match fit_built(config, &model, schedule, false, &mut rng) {
        Ok(r) => r,
        Err(f) => return fail(&f.error),
    };
    let reparam = model.reparam();
    let names = model.names();
    let report = match confidence_report(reparam, &run.theta_hat, &run.fim, config.level, &names) {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    let truth_flat: Vec<f64> = sim.truth.params.iter().map(|nv| nv.value).collect();
    let estimate_raw = reparam.forward(&run.theta_hat);

    // Label alignment: permute the estimate to the truth's labelling and
    // map each truth parameter to the matching estimate interval.
    let (estimate_aligned, interval_index, truth_in_est_labeling) = match (&config.model, &model) {
        (ModelConfig::Sbm { k, .. }, BuiltModel::Sbm(_)) => {
            let k = *k;
            let mode = run.posterior_mode_labels.clone().unwrap_or_default();
            let z_true = sim.truth.labels.clone().unwrap_or_default();
            let perm = match sbm_align_labels(&z_true, &mode, k) {
                Ok(p) => p,
                Err(e) => return fail(&e),
            };
            let est_params = SbmParams {
                alpha: estimate_raw[..k].to_vec(),
                p: estimate_raw[k..].to_vec(),
            };
            let aligned = apply_label_permutation(&est_params, &perm).flatten();
            // inv[a] = estimate class relabelled to truth class a.
            let mut inv = vec![0usize; k];
            for (c, &a) in perm.iter().enumerate() {
                inv[a] = c;
            }
            let mut interval_index = Vec::with_capacity(k + k * k);
            for a in 0..k {
                interval_index.push(inv[a]);
            }
            for a in 0..k {
                for b in 0..k {
                    interval_index.push(k + inv[a] * k + inv[b]);
                }
            }
            // Truth permuted into the estimate's labelling for the
            // chart-space ellipsoid check.
            let truth_params = SbmParams {
                alpha: truth_flat[..k].to_vec(),
                p: truth_flat[k..].to_vec(),
            };
            let mut truth_est = truth_params.clone();
            for c in 0..k {
                truth_est.alpha[c] = truth_params.alpha[perm[c]];
                for d2 in 0..k {
                    truth_est.p[c * k + d2] = truth_params.p[perm[c] * k + perm[d2]];
                }
            }
            (aligned, interval_index, truth_est.flatten())
        }
        _ => {
            let idx: Vec<usize> = (0..truth_flat.len()).collect();
            (estimate_raw.clone(), idx, truth_flat.clone())
        }
    };

    let errors: Vec<f64> = estimate_aligned
        .iter()
        .zip(&truth_flat)
        .map(|(e, t)| e - t)
        .collect();
    let covered: Vec<bool> = truth_flat
        .iter()
        .enumerate()
        .map(|(m, &t)| {
            let ci = &report.intervals[interval_index[m]];
            ci.lower <= t && t <= ci.upper
        })
        .collect();
    let ellipsoid_covered = match reparam
        .inverse(&truth_in_est_labeling)
        .and_then(|chart| ellipsoid_contains(&chart, &run.theta_hat, &run.fim, config.level))
    {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    RepRecord {
        index,
        seed,
        status: "ok".into(),
        estimate: Some(named(&names, &estimate_aligned)),
        errors: Some(errors),
        covered: Some(covered),
        ellipsoid_covered: Some(ellipsoid_covered),
        restarts: Some(run.restarts),
    }
}

pub fn cmd_replicate(config: &RunConfig, reps: usize, workers: usize, out_dir: &Path) -> Result<()> {
    if reps == 0 {
        return Err(Error::Config("replication count must be >= 1".into()));
    }
    let truth = truth_for_replicate(config)?;
    let schedule = config.schedule.build(None);
    schedule.validate()?;
    fs::create_dir_all(out_dir.join("reps"))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    let records: Vec<RepRecord> = pool.install(|| {
        (0..reps)
            .into_par_iter()
            .map(|index| run_replication(config, &schedule, index))
            .collect()
    });

    for record in &records {
        write_json(&out_dir.join(format!("reps/rep_{:04}.json", record.index)), record)?;
    }

    let successes: Vec<&RepRecord> = records.iter().filter(|r| r.status == "ok").collect();
    let failures = reps - successes.len();
    let m = successes.len();
    let p = truth.flat.len();

    let mut out = String::from("parameter,true,rmse,coverage,coverage_se,failures\n");
    for j in 0..p {
        let (rmse, coverage, coverage_se) = if m > 0 {
            let mse = successes
                .iter()
                .map(|r| {
                    let e = r.errors.as_ref().unwrap()[j];
                    e * e
                })
                .sum::<f64>()
                / m as f64;
            let cov = successes
                .iter()
                .filter(|r| r.covered.as_ref().unwrap()[j])
                .count() as f64
                / m as f64;
            (mse.sqrt(), cov, (cov * (1.0 - cov) / m as f64).sqrt())
        } else {
            (f64::NAN, f64::NAN, f64::NAN)
        };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            truth.names[j],
            fmt_f64(truth.flat[j]),
            fmt_f64(rmse),
            fmt_f64(coverage),
            fmt_f64(coverage_se),
            failures
        ));
    }
    // Joint chart-space ellipsoid coverage.
    let (ecov, ese) = if m > 0 {
        let c = successes.iter().filter(|r| r.ellipsoid_covered == Some(true)).count() as f64
            / m as f64;
        (c, (c * (1.0 - c) / m as f64).sqrt())
    } else {
        (f64::NAN, f64::NAN)
    };
    out.push_str(&format!(
        "global_theta,,,{},{},{}\n",
        fmt_f64(ecov),
        fmt_f64(ese),
        failures
    ));
    let mut file = fs::File::create(out_dir.join("summary.csv"))?;
    file.write_all(out.as_bytes())?;
    Ok(())
}
