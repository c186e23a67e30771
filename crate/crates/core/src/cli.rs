//! Command-line pipeline: data generation, training, compression,
//! evaluation, benchmarking and parameter sweeps.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::calib::{training_prefixes, CalibError};
use crate::compress::{compress_model, CompressError, CompressionConfig, CompressionReport};
use crate::eval::{bench_latency, count_flops, evaluate, BenchResult, EvalError, MetricsResult};
use crate::format::{load_model, save_model, FormatError};
use crate::linalg::LinalgError;
use crate::recmodel::{
    generate_synthetic, load_dataset, save_dataset, split_leave_last_two, train_with_callback,
    DataError, ItemSequenceDataset, LayerId, ModelConfig, RecError, RecModel, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<LinalgError> for CliError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::DimensionMismatch { .. }
            | LinalgError::Empty
            | LinalgError::InvalidData { .. } => CliError::Data(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<RecError> for CliError {
    fn from(e: RecError) -> Self {
        match e {
            RecError::DivergenceDetected { .. } => CliError::Numerical(e.to_string()),
            RecError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            EvalError::ZeroK | EvalError::EmptyBatch | EvalError::TooFewRepetitions(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CalibError> for CliError {
    fn from(e: CalibError) -> Self {
        match e {
            CalibError::EmptyCalibration => CliError::Data(e.to_string()),
            CalibError::Damping { .. } => CliError::Numerical(e.to_string()),
            CalibError::Linalg(l) => l.into(),
            CalibError::Model(m) => m.into(),
        }
    }
}

impl From<CompressError> for CliError {
    fn from(e: CompressError) -> Self {
        match e {
            CompressError::InvalidConfig(_) | CompressError::InvalidRank { .. } => {
                CliError::Usage(e.to_string())
            }
            CompressError::Linalg(l) => l.into(),
            CompressError::Calib(c) => c.into(),
            CompressError::Model(m) => m.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "odlm",
    version,
    about = "Whitened low-rank compression of a sequential recommender"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic clustered-Markov dataset
    GenData(GenDataArgs),
    /// Train a dense model
    Train(TrainArgs),
    /// Compress a trained model
    Compress(CompressArgs),
    /// Print and record HR@K / NDCG@K
    Eval(EvalArgs),
    /// Compare FLOPs and latency of two models
    Bench(BenchArgs),
    /// Evaluate a grid of compression ratios or calibration sizes
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 200)]
    pub users: usize,
    #[arg(long, default_value_t = 64)]
    pub items: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size as u64, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: u64,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    pub lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().dropout)]
    pub dropout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 50)]
    pub max_len: usize,
    /// Defaults to four times the embedding width
    #[arg(long)]
    pub ffn_dim: Option<usize>,
}

fn parse_cr(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!(
            "compression ratio must lie strictly between 0 and 1, got {v}"
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CalibSource {
    /// Each user's sequence without its validation and test items
    Train,
    /// Whole sequences, including held-out items
    Full,
}

pub fn calibration_sequences(ds: &ItemSequenceDataset, source: CalibSource) -> Vec<Vec<usize>> {
    match source {
        CalibSource::Train => training_prefixes(ds),
        CalibSource::Full => ds.sequences.iter().map(|s| s.items.clone()).collect(),
    }
}

#[derive(Debug, Args, Clone)]
pub struct CompressFlags {
    /// Fraction of each layer's parameters kept
    #[arg(long, default_value_t = 0.5, value_parser = parse_cr)]
    pub cr: f64,
    #[arg(long, default_value_t = 256, value_parser = clap::value_parser!(u64).range(1..))]
    pub calib_samples: u64,
    #[arg(long, value_enum, default_value_t = CalibSource::Train)]
    pub calib_source: CalibSource,
    /// Refit each layer on activations from the compressed prefix (default)
    #[arg(long, conflicts_with = "no_update")]
    pub progressive: bool,
    /// Skip the progressive refit
    #[arg(long)]
    pub no_update: bool,
    /// Plain truncated SVD without activation whitening
    #[arg(long)]
    pub no_whiten: bool,
    #[arg(long, default_value_t = crate::calib::DEFAULT_EPS_REL)]
    pub eps_rel: f64,
    /// Absolute ridge for the refit; relative default when omitted
    #[arg(long)]
    pub ridge: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl CompressFlags {
    pub fn config(&self) -> CompressionConfig {
        CompressionConfig {
            cr: self.cr,
            eps_rel: self.eps_rel,
            progressive: !self.no_update,
            whiten: !self.no_whiten,
            calib_samples: self.calib_samples as usize,
            ridge: self.ridge,
            seed: self.seed,
            rank_override: None,
        }
    }
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset whose training prefixes serve as calibration data
    #[arg(long)]
    pub data: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    /// Report path; defaults to the output path with `.report.json` appended
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub flags: CompressFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Test,
    Valid,
}

fn parse_positive(s: &str) -> Result<usize, String> {
    match s.trim().parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format!("{s:?} is not a positive integer")),
    }
}

fn sorted_ks(ks: &[usize]) -> Vec<usize> {
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    ks
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated cutoffs
    #[arg(long, default_value = "5,10", value_delimiter = ',', value_parser = parse_positive)]
    pub ks: Vec<usize>,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
    /// Keep items already in the context in the ranking
    #[arg(long)]
    pub no_mask: bool,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub dense: PathBuf,
    #[arg(long)]
    pub compressed: PathBuf,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch: u64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(3..))]
    pub reps: u64,
    #[arg(long, default_value_t = 20)]
    pub context_len: usize,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    Cr,
    Calib,
    Both,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = SweepAxis::Cr)]
    pub axis: SweepAxis,
    #[arg(long, default_value = "0.2,0.3,0.4,0.5,0.6,0.7,0.8", value_delimiter = ',', value_parser = parse_cr)]
    pub cr_grid: Vec<f64>,
    #[arg(long, default_value = "64,128,256,512,1024", value_delimiter = ',', value_parser = parse_positive)]
    pub calib_grid: Vec<usize>,
    #[arg(long, default_value = "10", value_delimiter = ',', value_parser = parse_positive)]
    pub ks: Vec<usize>,
    #[arg(long)]
    pub no_mask: bool,
    #[command(flatten)]
    pub flags: CompressFlags,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Ok(v) = std::env::var("ODLM_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => log::debug!("ODLM_THREADS={n}; the pipeline runs single-threaded"),
            _ => {
                eprintln!("error: ODLM_THREADS must be a positive integer, got {v:?}");
                return EXIT_USAGE;
            }
        }
    }
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: &Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Compress(a) => cmd_compress(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

fn distinct(output: &Path, inputs: &[&Path]) -> Result<(), CliError> {
    for i in inputs {
        if output == *i {
            return Err(CliError::Usage(format!(
                "output path {} would overwrite an input",
                output.display()
            )));
        }
    }
    Ok(())
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn check_items(model: &RecModel, ds: &ItemSequenceDataset) -> Result<(), CliError> {
    if model.config.num_items != ds.num_items {
        return Err(CliError::Data(format!(
            "model scores {} items but the dataset has {}",
            model.config.num_items, ds.num_items
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct GenDataSidecar {
    users: usize,
    items: usize,
    seed: u64,
    interactions: usize,
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    let ds = generate_synthetic(a.users, a.items, a.seed)?;
    save_dataset(&ds, &a.output)?;
    let sidecar = sidecar_path(&a.output);
    write_json(
        &sidecar,
        &GenDataSidecar {
            users: a.users,
            items: a.items,
            seed: a.seed,
            interactions: ds.num_interactions(),
        },
    )?;
    println!(
        "wrote {} users, {} items, {} interactions to {}",
        ds.num_users(),
        ds.num_items,
        ds.num_interactions(),
        a.output.display()
    );
    Ok(())
}

/// `<path>.json`, next to a generated dataset.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    distinct(&a.output, &[&a.data])?;
    let ds = load_dataset(&a.data)?;
    let config = ModelConfig {
        num_items: ds.num_items,
        embed_dim: a.embed_dim,
        num_layers: a.layers,
        num_heads: a.heads,
        max_len: a.max_len,
        ffn_dim: a.ffn_dim.unwrap_or(4 * a.embed_dim),
    };
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size as usize,
        learning_rate: a.lr,
        seed: a.seed,
        max_len: a.max_len,
        dropout: a.dropout,
    };
    cfg.validate()?;
    if a.epochs == 0 {
        log::warn!("--epochs 0: writing the untrained initialization");
    }
    let model = RecModel::new(config, a.seed)?;
    let split = split_leave_last_two(&ds);
    let mut eval_err = None;
    let (trained, report) = train_with_callback(
        &model,
        &ds,
        &split.train,
        &cfg,
        &mut |epoch, m, loss| match evaluate(m, &split.valid, &[10], true) {
            Ok(r) => println!(
                "epoch {:>3}  loss {loss:.4}  valid HR@10 {:.4}",
                epoch + 1,
                r.hr(10).unwrap_or(0.0)
            ),
            Err(e) => eval_err = Some(e),
        },
    )?;
    if let Some(e) = eval_err {
        return Err(e.into());
    }
    save_model(&trained, &a.output)?;
    println!(
        "trained {} parameters: loss {:.4} -> {:.4}; wrote {}",
        trained.param_count(),
        report.initial_loss,
        report.final_loss,
        a.output.display()
    );
    Ok(())
}

fn report_path(output: &Path, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| {
        let mut s = output.as_os_str().to_os_string();
        s.push(".report.json");
        PathBuf::from(s)
    })
}

pub fn cmd_compress(a: &CompressArgs) -> Result<(), CliError> {
    let report_file = report_path(&a.output, &a.report);
    distinct(&a.output, &[&a.model, &a.data])?;
    distinct(&report_file, &[&a.model, &a.data, &a.output])?;
    let model = load_model(&a.model)?;
    let ds = load_dataset(&a.data)?;
    check_items(&model, &ds)?;
    let cfg = a.flags.config();
    let (compressed, report) = compress_model(
        &model,
        &calibration_sequences(&ds, a.flags.calib_source),
        &cfg,
    )?;
    save_model(&compressed, &a.output)?;
    write_json(&report_file, &report)?;
    print_compression(&report);
    println!("wrote {} and {}", a.output.display(), report_file.display());
    Ok(())
}

fn print_compression(report: &CompressionReport) {
    println!(
        "{:<12} {:>9} {:>5} {:>12} {:>12} {:>8}",
        "layer", "shape", "rank", "predicted", "actual", "updated"
    );
    for l in &report.layers {
        match l.rank {
            Some(r) => println!(
                "{:<12} {:>9} {:>5} {:>12.4e} {:>12.4e} {:>8}",
                l.layer.to_string(),
                format!("{}x{}", l.m, l.n),
                r,
                l.predicted_loss.unwrap_or(0.0),
                l.actual_loss.unwrap_or(0.0),
                if l.update_applied { "yes" } else { "no" }
            ),
            None => println!(
                "{:<12} {:>9} {:>5} {:>12} {:>12} {:>8}",
                l.layer.to_string(),
                format!("{}x{}", l.m, l.n),
                "-",
                "rank 0",
                "dense",
                "-"
            ),
        }
    }
    println!(
        "linear parameters: {} -> {} ({:.1}%)",
        report.linear_params_dense,
        report.linear_params_stored,
        100.0 * report.linear_params_stored as f64 / report.linear_params_dense as f64
    );
}

/// Per-layer storage summary of a model, as written into reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSummary {
    pub layer: LayerId,
    pub m: usize,
    pub n: usize,
    pub kind: &'static str,
    pub rank: Option<usize>,
    pub params: usize,
}

pub fn layer_summaries(model: &RecModel) -> Vec<LayerSummary> {
    model
        .layer_ids()
        .into_iter()
        .map(|id| {
            let lin = model.linear(id);
            LayerSummary {
                layer: id,
                m: lin.out_dim(),
                n: lin.in_dim(),
                kind: if lin.is_factored() {
                    "factored"
                } else {
                    "dense"
                },
                rank: lin.rank(),
                params: lin.param_count(),
            }
        })
        .collect()
}

#[derive(Serialize)]
struct EvalConfigEcho {
    model: String,
    data: String,
    split: SplitName,
    ks: Vec<usize>,
    mask_context: bool,
}

#[derive(Serialize)]
struct EvalReport {
    config: EvalConfigEcho,
    layers: Vec<LayerSummary>,
    metrics: MetricsResult,
}

pub fn format_metrics_table(m: &MetricsResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "model: {}  users: {}", m.model_tag, m.user_count);
    let _ = writeln!(s, "{:>6} {:>8} {:>8}", "K", "HR", "NDCG");
    for (k, v) in &m.per_k {
        let _ = writeln!(s, "{k:>6} {:>8.4} {:>8.4}", v.hr, v.ndcg);
    }
    s
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    if let Some(j) = &a.json {
        distinct(j, &[&a.model, &a.data])?;
    }
    let model = load_model(&a.model)?;
    let ds = load_dataset(&a.data)?;
    check_items(&model, &ds)?;
    let split = split_leave_last_two(&ds);
    let cases = match a.split {
        SplitName::Test => &split.test,
        SplitName::Valid => &split.valid,
    };
    let ks = sorted_ks(&a.ks);
    let metrics = evaluate(&model, cases, &ks, !a.no_mask)?;
    print!("{}", format_metrics_table(&metrics));
    if let Some(j) = &a.json {
        write_json(
            j,
            &EvalReport {
                config: EvalConfigEcho {
                    model: a.model.display().to_string(),
                    data: a.data.display().to_string(),
                    split: a.split,
                    ks,
                    mask_context: !a.no_mask,
                },
                layers: layer_summaries(&model),
                metrics,
            },
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchConfigEcho {
    dense: String,
    compressed: String,
    batch: usize,
    reps: usize,
    context_len: usize,
}

#[derive(Serialize)]
struct BenchSummary {
    #[serde(flatten)]
    result: BenchResult,
    flop_ratio: f64,
    speedup: f64,
}

#[derive(Serialize)]
struct BenchReport {
    config: BenchConfigEcho,
    layers: Vec<LayerSummary>,
    bench: BenchSummary,
}

pub fn cmd_bench(a: &BenchArgs) -> Result<(), CliError> {
    if let Some(j) = &a.json {
        distinct(j, &[&a.dense, &a.compressed])?;
    }
    let dense = load_model(&a.dense)?;
    let compressed = load_model(&a.compressed)?;
    let result = bench_latency(
        &dense,
        &compressed,
        a.batch as usize,
        a.reps as usize,
        a.context_len,
    )?;
    let linear = count_flops(&compressed, result.context_len);
    println!(
        "linear-layer FLOPs per sequence: {} vs {} (ratio {:.3})",
        result.flops_dense,
        result.flops_compressed,
        result.flop_ratio()
    );
    println!(
        "median batch time: {:.3} ms vs {:.3} ms (speedup {:.2}x)",
        result.wall_ms_dense,
        result.wall_ms_compressed,
        result.speedup()
    );
    log::debug!("compressed model projection flops {linear:?}");
    if let Some(j) = &a.json {
        write_json(
            j,
            &BenchReport {
                config: BenchConfigEcho {
                    dense: a.dense.display().to_string(),
                    compressed: a.compressed.display().to_string(),
                    batch: a.batch as usize,
                    reps: a.reps as usize,
                    context_len: result.context_len,
                },
                layers: layer_summaries(&compressed),
                bench: BenchSummary {
                    flop_ratio: result.flop_ratio(),
                    speedup: result.speedup(),
                    result,
                },
            },
        )?;
    }
    Ok(())
}

/// One CSV row of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub kind: &'static str,
    pub cr: Option<f64>,
    pub calib_samples: Option<usize>,
    pub metrics: Option<MetricsResult>,
    pub params_ratio: f64,
    pub error: Option<String>,
}

/// Compresses `model` at each grid point and evaluates on the test split.
/// The first row is the uncompressed reference.
pub fn run_sweep(
    model: &RecModel,
    ds: &ItemSequenceDataset,
    points: &[(f64, usize)],
    base: &CompressionConfig,
    source: CalibSource,
    ks: &[usize],
    mask: bool,
) -> Result<Vec<SweepRow>, CliError> {
    check_items(model, ds)?;
    let split = split_leave_last_two(ds);
    let calib = calibration_sequences(ds, source);
    let mut rows = vec![SweepRow {
        kind: "reference",
        cr: None,
        calib_samples: None,
        metrics: Some(evaluate(model, &split.test, ks, mask)?),
        params_ratio: 1.0,
        error: None,
    }];
    let dense_params = model.linear_param_count() as f64;
    for &(cr, samples) in points {
        let cfg = CompressionConfig {
            cr,
            calib_samples: samples,
            ..base.clone()
        };
        let outcome = compress_model(model, &calib, &cfg)
            .map_err(CliError::from)
            .and_then(|(c, _)| {
                // evaluate what would be written to disk
                let c = c.to_storage_precision();
                let m = evaluate(&c, &split.test, ks, mask)?;
                Ok((m, c.linear_param_count() as f64 / dense_params))
            });
        rows.push(match outcome {
            Ok((m, ratio)) => SweepRow {
                kind: "compressed",
                cr: Some(cr),
                calib_samples: Some(samples),
                metrics: Some(m),
                params_ratio: ratio,
                error: None,
            },
            Err(e) => SweepRow {
                kind: "compressed",
                cr: Some(cr),
                calib_samples: Some(samples),
                metrics: None,
                params_ratio: f64::NAN,
                error: Some(e.to_string()),
            },
        });
    }
    Ok(rows)
}

pub fn format_sweep_csv(rows: &[SweepRow], ks: &[usize]) -> String {
    let mut s = String::from("kind,cr,calib_samples");
    for k in ks {
        let _ = write!(s, ",hr@{k},ndcg@{k}");
    }
    s.push_str(",params_ratio,error\n");
    for r in rows {
        let _ = write!(
            s,
            "{},{},{}",
            r.kind,
            r.cr.map(|c| c.to_string()).unwrap_or_default(),
            r.calib_samples.map(|c| c.to_string()).unwrap_or_default()
        );
        for &k in ks {
            match &r.metrics {
                Some(m) => {
                    let _ = write!(
                        s,
                        ",{:.6},{:.6}",
                        m.hr(k).unwrap_or(f64::NAN),
                        m.ndcg(k).unwrap_or(f64::NAN)
                    );
                }
                None => s.push_str(",,"),
            }
        }
        let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        if r.params_ratio.is_finite() {
            let _ = writeln!(s, ",{:.6},{err}", r.params_ratio);
        } else {
            let _ = writeln!(s, ",,{err}");
        }
    }
    s
}

/// Counts adjacent pairs along increasing cr where HR@k drops.
pub fn trend_violations(rows: &[SweepRow], k: usize) -> (usize, usize) {
    let mut pts: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| Some((r.cr?, r.metrics.as_ref()?.hr(k)?)))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let pairs = pts.len().saturating_sub(1);
    let drops = pts.windows(2).filter(|w| w[1].1 < w[0].1).count();
    (drops, pairs)
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<(), CliError> {
    distinct(&a.output, &[&a.model, &a.data])?;
    let model = load_model(&a.model)?;
    let ds = load_dataset(&a.data)?;
    let base = a.flags.config();
    let mut points = Vec::new();
    if matches!(a.axis, SweepAxis::Cr | SweepAxis::Both) {
        points.extend(a.cr_grid.iter().map(|&cr| (cr, base.calib_samples)));
    }
    if matches!(a.axis, SweepAxis::Calib | SweepAxis::Both) {
        points.extend(a.calib_grid.iter().map(|&n| (base.cr, n)));
    }
    let ks = sorted_ks(&a.ks);
    let rows = run_sweep(
        &model,
        &ds,
        &points,
        &base,
        a.flags.calib_source,
        &ks,
        !a.no_mask,
    )?;
    write_file(&a.output, format_sweep_csv(&rows, &ks).as_bytes())?;
    let k = ks[ks.len() - 1];
    for r in &rows {
        let label = match (r.kind, r.cr) {
            ("reference", _) => "dense".to_string(),
            (_, Some(cr)) => format!("cr {cr:.2} calib {}", r.calib_samples.unwrap_or(0)),
            _ => String::new(),
        };
        match (&r.metrics, &r.error) {
            (Some(m), _) => println!(
                "{label:<22} HR@{k} {:.4}  NDCG@{k} {:.4}",
                m.hr(k).unwrap_or(0.0),
                m.ndcg(k).unwrap_or(0.0)
            ),
            (None, Some(e)) => println!("{label:<22} failed: {e}"),
            _ => {}
        }
    }
    if matches!(a.axis, SweepAxis::Cr | SweepAxis::Both) {
        let cr_rows: Vec<SweepRow> = rows
            .iter()
            .filter(|r| r.calib_samples == Some(base.calib_samples))
            .cloned()
            .collect();
        let (drops, pairs) = trend_violations(&cr_rows, k);
        println!(
            "trend: HR@{k} drops in {drops} of {pairs} steps of increasing cr{}",
            if drops == 0 { " (monotone)" } else { "" }
        );
    }
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        log::warn!("{failed} sweep cells failed; see the error column");
    }
    println!("wrote {}", a.output.display());
    Ok(())
}
