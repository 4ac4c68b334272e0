//! Command-line front end.
//!
//! Exit codes: `verify` returns 0/1/2 for Verified/Unknown/Unverifiable;
//! `check` returns 0 when no sample leaves its bounds and 1 otherwise; every
//! other command returns 0 on success. Any error exits with 3.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{PNorm, PerturbationSpec};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{
    argmax, forward, generate_random_input, generate_random_model_scaled, load_model, save_model, Model,
    ModelConfig, Pooling,
};
use crate::propagation::PropagationOptions;
use crate::strategies::{AlphaInit, OptimizerConfig};
use crate::verifier::{
    binary_search, search_max_eps, select_alpha, soundness_sample_check, verify, Probe, SearchOutcome,
    SoundnessReport, Strategy, Verdict, VerificationTask, VerifyOptions, DEFAULT_DOUBLING_CAP, DEFAULT_NUM_ITERS,
    SCHEMA_VERSION,
};

pub const EXIT_ERROR: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "attnverify", version, about = "Certified robustness verification for small transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Verify one perturbation region and write a report.
    Verify(VerifyArgs),
    /// Binary-search the largest certified ε, one task per position.
    Search(SearchArgs),
    /// Compare certified ε and time across strategies.
    Compare(SearchArgs),
    /// Check the bounds against sampled perturbations.
    Check(CheckArgs),
    /// Write a random model.
    Genmodel(GenArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    L1,
    L2,
    Linf,
}

impl From<NormArg> for PNorm {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::L1 => PNorm::L1,
            NormArg::L2 => PNorm::L2,
            NormArg::Linf => PNorm::Linf,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Baseline,
    Dual,
    Rule,
    #[value(alias = "optimized")]
    Opt,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Baseline => Strategy::Baseline,
            StrategyArg::Dual => Strategy::Dual,
            StrategyArg::Rule => Strategy::Rule,
            StrategyArg::Opt => Strategy::Optimized,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Zero,
    Random,
    One,
}

impl From<InitArg> for AlphaInit {
    fn from(i: InitArg) -> Self {
        match i {
            InitArg::Zero => AlphaInit::BaselineZero,
            InitArg::Random => AlphaInit::Random,
            InitArg::One => AlphaInit::DualOne,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct OptimizerArgs {
    /// Maximum optimizer steps.
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    /// Starting α for the optimizer.
    #[arg(long, value_enum, default_value_t = InitArg::Zero)]
    pub init: InitArg,
    /// Keep optimizing after the margin becomes positive.
    #[arg(long)]
    pub no_early_stop: bool,
}

impl OptimizerArgs {
    fn config(&self, seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            max_steps: self.steps,
            learning_rate: self.lr,
            init: self.init.into(),
            early_stop_on_verified: !self.no_early_stop,
            seed,
            ..OptimizerConfig::default()
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct TaskArgs {
    /// Model file (JSON).
    #[arg(long)]
    pub model: PathBuf,
    /// Input file: {"X": [[...]], "label": k}, or an array of such objects.
    #[arg(long)]
    pub input: PathBuf,
    /// Perturbed rows, 0-based, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub positions: Vec<usize>,
    #[arg(long, value_enum, default_value_t = NormArg::L1)]
    pub norm: NormArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for independent tasks (0 = all cores).
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Report output path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write 0 for every wall time so reports are byte-reproducible.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Args, Debug, Clone)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long)]
    pub eps: f64,
    #[arg(long, value_enum, default_value_t = StrategyArg::Baseline)]
    pub strategy: StrategyArg,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
}

#[derive(Args, Debug, Clone)]
pub struct SearchArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    /// Strategies, comma separated.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "baseline")]
    pub strategy: Vec<StrategyArg>,
    #[arg(long, default_value_t = DEFAULT_NUM_ITERS)]
    pub num_iters: u32,
    /// CSV companion with columns task_id, strategy, eps, wall_time.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
    /// Replace verification by the oracle "verified iff ε ≤ T".
    #[arg(long, hide = true)]
    pub synthetic_threshold: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct CheckArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long)]
    pub eps: f64,
    /// Strategies, comma separated.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "baseline,dual,rule,opt")]
    pub strategy: Vec<StrategyArg>,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
    /// Use deliberately broken plane coefficients.
    #[arg(long, hide = true)]
    pub corrupt_planes: bool,
}

#[derive(Args, Debug, Clone)]
pub struct GenArgs {
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 8)]
    pub hidden: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    /// Feed-forward width; twice the hidden size when absent.
    #[arg(long)]
    pub ffn: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, value_enum, default_value_t = PoolingArg::Mean)]
    pub pooling: PoolingArg,
    #[arg(long)]
    pub output_projection: bool,
    /// Multiplier on the weight range.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the random input, labelled with the model's prediction.
    #[arg(long)]
    pub input_out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PoolingArg {
    Mean,
    First,
}

/// One entry of an input file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InputRecord {
    #[serde(rename = "X")]
    pub x: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum InputFile {
    One(InputRecord),
    Many(Vec<InputRecord>),
}

pub fn load_inputs(path: &Path) -> Result<Vec<InputRecord>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let parsed: InputFile =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    Ok(match parsed {
        InputFile::One(r) => vec![r],
        InputFile::Many(v) => v,
    })
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|source| Error::Io { path: p.to_path_buf(), source }),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes")
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn build_task(model: &Model<f64>, record: &InputRecord, positions: Vec<usize>, eps: f64, norm: PNorm) -> Result<VerificationTask> {
    let x0 = Matrix::from_rows(&record.x)?;
    let spec = PerturbationSpec::new(x0, positions, eps, norm)?;
    match record.label {
        Some(label) => VerificationTask::new(model, spec, label),
        None => VerificationTask::predicted(model, spec),
    }
}

fn verify_options(opt: &OptimizerArgs, seed: u64, propagation: PropagationOptions) -> VerifyOptions {
    VerifyOptions { optimizer: opt.config(seed), propagation }
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<i32> {
    let model = load_model(&args.task.model)?;
    let inputs = load_inputs(&args.task.input)?;
    let record = inputs.first().ok_or_else(|| Error::Config("input file holds no inputs".into()))?;
    let task = build_task(&model, record, args.task.positions.clone(), args.eps, args.task.norm.into())?;
    let opts = verify_options(&args.optimizer, args.task.seed, PropagationOptions::default());
    let mut report = verify(&model, &task, args.strategy.into(), &opts)?;
    if args.task.no_timing {
        report.wall_time = 0.0;
    }
    write_output(args.task.out.as_deref(), &to_json(&report))?;
    Ok(exit_code(report.verdict))
}

pub fn exit_code(verdict: Verdict) -> i32 {
    match verdict {
        Verdict::Verified => 0,
        Verdict::Unknown => 1,
        Verdict::Unverifiable => 2,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StrategySearch {
    pub strategy: Strategy,
    pub eps: Option<f64>,
    pub bracket_width: Option<f64>,
    pub doubling_calls: u32,
    pub bisection_calls: u32,
    pub wall_time: f64,
    pub probes: Vec<Probe>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskSearch {
    pub task_id: usize,
    pub input: usize,
    pub position: usize,
    pub results: Vec<StrategySearch>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchReport {
    pub schema_version: u32,
    pub num_iters: u32,
    pub tasks: Vec<TaskSearch>,
}

fn strategy_search(strategy: Strategy, outcome: Result<SearchOutcome>, wall_time: f64, no_timing: bool) -> StrategySearch {
    match outcome {
        Ok(mut o) => {
            if no_timing {
                o.probes.iter_mut().for_each(|p| p.wall_time = 0.0);
            }
            StrategySearch {
                strategy,
                eps: Some(o.eps),
                bracket_width: Some(o.bracket_width()),
                doubling_calls: o.doubling_calls,
                bisection_calls: o.bisection_calls,
                wall_time: if no_timing { 0.0 } else { wall_time },
                probes: o.probes,
                error: None,
            }
        }
        Err(e) => StrategySearch {
            strategy,
            eps: None,
            bracket_width: None,
            doubling_calls: 0,
            bisection_calls: 0,
            wall_time: if no_timing { 0.0 } else { wall_time },
            probes: Vec::new(),
            error: Some(e.to_string()),
        },
    }
}

pub fn run_search(args: &SearchArgs) -> Result<SearchReport> {
    let strategies: Vec<Strategy> = args.strategy.iter().map(|&s| s.into()).collect();
    if strategies.is_empty() {
        return Err(Error::Config("at least one strategy is required".into()));
    }
    if args.num_iters == 0 {
        return Err(Error::Config("--num-iters must be at least 1".into()));
    }
    let no_timing = args.task.no_timing;
    if let Some(threshold) = args.synthetic_threshold {
        let results = strategies
            .iter()
            .map(|&s| {
                let start = std::time::Instant::now();
                let out = binary_search(|e| Ok(e <= threshold), args.num_iters, DEFAULT_DOUBLING_CAP);
                strategy_search(s, out, start.elapsed().as_secs_f64(), no_timing)
            })
            .collect();
        let task = TaskSearch { task_id: 0, input: 0, position: 0, results };
        return Ok(SearchReport { schema_version: SCHEMA_VERSION, num_iters: args.num_iters, tasks: vec![task] });
    }

    let model = load_model(&args.task.model)?;
    let inputs = load_inputs(&args.task.input)?;
    let positions =
        if args.task.positions.is_empty() { (0..model.config.seq_len).collect() } else { args.task.positions.clone() };
    let norm: PNorm = args.task.norm.into();
    let mut jobs = Vec::new();
    for (ii, record) in inputs.iter().enumerate() {
        for &p in &positions {
            jobs.push((jobs.len(), ii, p, build_task(&model, record, vec![p], 0.0, norm)?));
        }
    }
    let opts = verify_options(&args.optimizer, args.task.seed, PropagationOptions::default());
    let pool = thread_pool(args.task.jobs)?;
    let tasks: Vec<TaskSearch> = pool.install(|| {
        jobs.par_iter()
            .map(|(task_id, input, position, task)| {
                let results = strategies
                    .iter()
                    .map(|&s| {
                        let start = std::time::Instant::now();
                        let out = search_max_eps(&model, task, s, args.num_iters, &opts);
                        log::info!("task {task_id} {}: {:?}", s.name(), out.as_ref().map(|o| o.eps));
                        strategy_search(s, out, start.elapsed().as_secs_f64(), no_timing)
                    })
                    .collect();
                TaskSearch { task_id: *task_id, input: *input, position: *position, results }
            })
            .collect()
    });
    Ok(SearchReport { schema_version: SCHEMA_VERSION, num_iters: args.num_iters, tasks })
}

pub fn search_csv(report: &SearchReport) -> String {
    let mut out = String::from("task_id,strategy,eps,wall_time\n");
    for t in &report.tasks {
        for r in &t.results {
            let eps = r.eps.map(|e| e.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", t.task_id, r.strategy.name(), eps, r.wall_time));
        }
    }
    out
}

pub fn cmd_search(args: &SearchArgs) -> Result<i32> {
    let report = run_search(args)?;
    write_output(args.task.out.as_deref(), &to_json(&report))?;
    if let Some(csv) = &args.csv {
        fs::write(csv, search_csv(&report)).map_err(|source| Error::Io { path: csv.clone(), source })?;
    }
    Ok(0)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareRow {
    pub task_id: usize,
    pub eps: Vec<Option<f64>>,
    pub wall_time: Vec<f64>,
    /// `eps[s] / eps[0]` per strategy.
    pub eps_ratio: Vec<Option<f64>>,
    /// `wall_time[s] / wall_time[0]` per strategy.
    pub time_ratio: Vec<Option<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareReport {
    pub schema_version: u32,
    pub strategies: Vec<Strategy>,
    pub rows: Vec<CompareRow>,
    /// Mean of the per-task ratios, over tasks where the ratio is defined.
    pub mean_eps_ratio: Vec<Option<f64>>,
    pub mean_time_ratio: Vec<Option<f64>>,
}

fn ratio(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) if a == b => Some(1.0),
        (Some(a), Some(b)) if b != 0.0 => Some(a / b),
        _ => None,
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn compare_report(search: &SearchReport) -> CompareReport {
    let strategies: Vec<Strategy> =
        search.tasks.first().map(|t| t.results.iter().map(|r| r.strategy).collect()).unwrap_or_default();
    let rows: Vec<CompareRow> = search
        .tasks
        .iter()
        .map(|t| {
            let eps: Vec<Option<f64>> = t.results.iter().map(|r| r.eps).collect();
            let wall_time: Vec<f64> = t.results.iter().map(|r| r.wall_time).collect();
            CompareRow {
                task_id: t.task_id,
                eps_ratio: eps.iter().map(|&e| ratio(e, eps[0])).collect(),
                time_ratio: wall_time.iter().map(|&w| ratio(Some(w), Some(wall_time[0]))).collect(),
                eps,
                wall_time,
            }
        })
        .collect();
    let k = strategies.len();
    let mean_eps_ratio = (0..k).map(|s| mean_defined(rows.iter().map(|r| r.eps_ratio[s]))).collect();
    let mean_time_ratio = (0..k).map(|s| mean_defined(rows.iter().map(|r| r.time_ratio[s]))).collect();
    CompareReport { schema_version: SCHEMA_VERSION, strategies, rows, mean_eps_ratio, mean_time_ratio }
}

pub fn cmd_compare(args: &SearchArgs) -> Result<i32> {
    if args.strategy.len() < 2 {
        return Err(Error::Config("compare needs at least two strategies".into()));
    }
    let search = run_search(args)?;
    if let Some(csv) = &args.csv {
        fs::write(csv, search_csv(&search)).map_err(|source| Error::Io { path: csv.clone(), source })?;
    }
    write_output(args.task.out.as_deref(), &to_json(&compare_report(&search)))?;
    Ok(0)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckEntry {
    pub strategy: Strategy,
    #[serde(flatten)]
    pub result: SoundnessReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckReport {
    pub schema_version: u32,
    pub eps: f64,
    pub results: Vec<CheckEntry>,
}

pub fn cmd_check(args: &CheckArgs) -> Result<i32> {
    let model = load_model(&args.task.model)?;
    let inputs = load_inputs(&args.task.input)?;
    let record = inputs.first().ok_or_else(|| Error::Config("input file holds no inputs".into()))?;
    let task = build_task(&model, record, args.task.positions.clone(), args.eps, args.task.norm.into())?;
    let propagation = PropagationOptions { corrupt_planes: args.corrupt_planes };
    let opts = verify_options(&args.optimizer, args.task.seed, propagation);
    let strategies: Vec<Strategy> = args.strategy.iter().map(|&s| s.into()).collect();
    let pool = thread_pool(args.task.jobs)?;
    let results: Vec<CheckEntry> = pool.install(|| {
        strategies
            .par_iter()
            .map(|&strategy| {
                let sel = select_alpha(&model, &task, strategy, &opts)?;
                let result = soundness_sample_check(&model, &task, &sel.alpha, args.samples, args.task.seed, propagation)?;
                Ok(CheckEntry { strategy, result })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let violations: usize = results.iter().map(|r| r.result.violations).sum();
    if let Some(v) = results.iter().find_map(|r| r.result.first_violation.as_ref()) {
        eprintln!("first violation: {}", serde_json::to_string(v).expect("violation serializes"));
    }
    write_output(args.task.out.as_deref(), &to_json(&CheckReport { schema_version: SCHEMA_VERSION, eps: args.eps, results }))?;
    Ok(if violations == 0 { 0 } else { 1 })
}

pub fn cmd_genmodel(args: &GenArgs) -> Result<i32> {
    let mut config = ModelConfig::new(args.layers, args.seq_len, args.hidden, args.heads);
    if args.heads == 0 || args.hidden % args.heads != 0 {
        return Err(Error::Config(format!("hidden size {} is not divisible by {} heads", args.hidden, args.heads)));
    }
    if let Some(f) = args.ffn {
        config.ffn_hidden = f;
    }
    config.num_classes = args.classes;
    config.pooling = match args.pooling {
        PoolingArg::Mean => Pooling::Mean,
        PoolingArg::First => Pooling::FirstToken,
    };
    config.use_output_projection = args.output_projection;
    let model = generate_random_model_scaled(&config, args.seed, args.scale)?;
    save_model(&model, &args.out)?;
    let x = generate_random_input(&config, args.seed.wrapping_add(1));
    let logits = forward(&model, &x)?;
    println!("{}", serde_json::to_string(&logits).expect("logits serialize"));
    if let Some(path) = &args.input_out {
        let record = InputRecord { x: x.to_rows(), label: Some(argmax(&logits)) };
        fs::write(path, to_json(&record)).map_err(|source| Error::Io { path: path.clone(), source })?;
    }
    Ok(0)
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("ATTNVERIFY_LOG", "error");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parse arguments, run the command, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Verify(a) => cmd_verify(a),
        Command::Search(a) => cmd_search(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Check(a) => cmd_check(a),
        Command::Genmodel(a) => cmd_genmodel(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}
