use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use convstack_core::bench::{self, Timer, TimerFixture};
use convstack_core::compress::{PruneKind, PruneLevel};
use convstack_core::graph::{self, LabeledDataset, Model};
use convstack_core::kernels::Algorithm;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "convstack", version, about = "Compress, tune and benchmark small CNNs on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic model and its train/test datasets.
    GenWorkload(GenWorkloadArgs),
    /// Prune a model by weight magnitude or by channel.
    Prune(PruneArgs),
    /// Quantize a model to float16 or int8.
    Quantize(QuantizeArgs),
    /// Measure the median latency of one model configuration.
    Bench(BenchArgs),
    /// Search per-layer schedules and write them to a file.
    Tune(TuneArgs),
    /// Benchmark every technique x algorithm x tuning combination.
    Sweep(SweepArgs),
    /// Check every kernel against the reference convolution.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct GenWorkloadArgs {
    /// Number of classes.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Image height and width in pixels (even).
    #[arg(long, default_value_t = 16)]
    size: usize,
    /// Standard deviation of the additive Gaussian noise, in [0, 1).
    #[arg(long, default_value_t = 0.3)]
    noise: f32,
    /// Training (calibration) samples.
    #[arg(long, default_value_t = 200)]
    train: usize,
    /// Test samples.
    #[arg(long, default_value_t = 200)]
    test: usize,
    /// Seed for templates, weights and noise.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output directory; receives model.json, train.json and test.json.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PruneTechnique {
    Weight,
    Channel,
}

impl From<PruneTechnique> for PruneKind {
    fn from(t: PruneTechnique) -> Self {
        match t {
            PruneTechnique::Weight => PruneKind::Weight,
            PruneTechnique::Channel => PruneKind::Channel,
        }
    }
}

#[derive(Args, Debug)]
struct PruneArgs {
    /// Input model manifest.
    #[arg(long)]
    model: PathBuf,
    /// Pruning technique.
    #[arg(long, value_enum)]
    technique: PruneTechnique,
    /// Global prune fraction in (0, 1).
    #[arg(long, conflicts_with = "sweep", required_unless_present = "sweep")]
    fraction: Option<f64>,
    /// Evaluate every level of the default schedule and write the accuracy curve.
    #[arg(long)]
    sweep: bool,
    /// With --sweep, also save the model at the elbow of the curve.
    #[arg(long, requires = "sweep")]
    elbow: bool,
    /// Largest acceptable top-1 drop for the elbow.
    #[arg(long, default_value_t = 0.02)]
    drop: f64,
    /// Dataset used to measure top-1 accuracy (required with --sweep).
    #[arg(long, required_if_eq("sweep", "true"))]
    data: Option<PathBuf>,
    /// Where to write the accuracy curve CSV (default: stdout).
    #[arg(long, requires = "sweep")]
    curve: Option<PathBuf>,
    /// Output model manifest (required with --fraction or --elbow).
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum QuantDtype {
    F16,
    I8,
}

#[derive(Args, Debug)]
struct QuantizeArgs {
    /// Input f32 model manifest.
    #[arg(long)]
    model: PathBuf,
    /// Target storage type.
    #[arg(long, value_enum)]
    dtype: QuantDtype,
    /// Calibration dataset for int8; without it a fixed [-4, 4] activation range is used.
    #[arg(long)]
    calibrate: Option<PathBuf>,
    /// Dataset used to report top-1 accuracy before and after.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output model manifest.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct TimingArgs {
    /// JSON timing fixture replacing the wall clock, e.g. {"kind": "samples", "samples": [9, 3, 5, 4]}
    /// or {"kind": "cost_model"}.
    #[arg(long, value_name = "PATH")]
    fake_timer: Option<PathBuf>,
}

impl TimingArgs {
    fn timer(&self) -> Result<Box<dyn Timer + Send>> {
        match &self.fake_timer {
            Some(path) => Ok(TimerFixture::load(path)?.into_timer()?),
            None => Ok(Box::new(bench::MonotonicTimer)),
        }
    }
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Model manifest.
    #[arg(long)]
    model: PathBuf,
    /// Convolution algorithm for every layer (ignored with --schedules).
    #[arg(long, default_value = "direct")]
    algorithm: Algorithm,
    /// Schedule map written by `tune`.
    #[arg(long)]
    schedules: Option<PathBuf>,
    /// Timed runs; one extra warm-up run is discarded.
    #[arg(long, default_value_t = 150)]
    runs: usize,
    /// Dataset whose first sample is the input (default: seeded random input).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Seed for the random input.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    timing: TimingArgs,
}

#[derive(Args, Debug)]
struct TuneArgs {
    /// Model manifest.
    #[arg(long)]
    model: PathBuf,
    /// Convolution algorithm to tune.
    #[arg(long, default_value = "direct")]
    algorithm: Algorithm,
    /// Maximum schedules measured per layer.
    #[arg(long, default_value_t = 200)]
    budget: usize,
    /// Stop a layer after this many schedules without improvement.
    #[arg(long, default_value_t = 50)]
    early_stop: usize,
    /// Timed runs per schedule (at least 3).
    #[arg(long, default_value_t = 3)]
    runs: usize,
    /// Largest tile size tried.
    #[arg(long, default_value_t = 64)]
    max_tile: usize,
    /// Only try single-threaded schedules.
    #[arg(long)]
    no_parallel: bool,
    /// Dataset whose first sample is the input (default: seeded random input).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Seed for the search order and the random input.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output schedule map (JSON).
    #[arg(short, long)]
    out: PathBuf,
    /// Also write the search trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    timing: TimingArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TunedStates {
    Both,
    Untuned,
    Tuned,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Dense f32 base model manifest.
    #[arg(long)]
    model: PathBuf,
    /// Calibration dataset for int8.
    #[arg(long)]
    train: PathBuf,
    /// Evaluation dataset; its first sample is the timing input.
    #[arg(long)]
    test: PathBuf,
    /// Output directory for results.csv, report.md and curves.csv.
    #[arg(short, long)]
    out: PathBuf,
    /// Comma-separated techniques: dense, weight-prune, channel-prune, f16, i8-calibrated, i8-uncalibrated.
    #[arg(long, value_delimiter = ',', default_value = "dense,weight-prune,channel-prune,f16,i8-calibrated,i8-uncalibrated")]
    techniques: Vec<bench::TechniqueKind>,
    /// Comma-separated algorithms: direct, gemm, spatial_pack.
    #[arg(long, value_delimiter = ',', default_value = "direct,gemm,spatial_pack")]
    algorithms: Vec<Algorithm>,
    /// Tuning states to benchmark.
    #[arg(long, value_enum, default_value_t = TunedStates::Both)]
    tuned: TunedStates,
    /// Timed runs per cell; one extra warm-up run is discarded.
    #[arg(long, default_value_t = 150)]
    runs: usize,
    /// Tuning budget per layer.
    #[arg(long, default_value_t = 200)]
    budget: usize,
    /// Tuning early-stop window.
    #[arg(long, default_value_t = 50)]
    early_stop: usize,
    /// Timed runs per schedule while tuning.
    #[arg(long, default_value_t = 3)]
    tune_runs: usize,
    /// Largest acceptable top-1 drop when choosing prune levels.
    #[arg(long, default_value_t = 0.02)]
    drop: f64,
    /// Fixed weight-pruning level instead of the elbow.
    #[arg(long)]
    weight_level: Option<PruneLevel>,
    /// Fixed channel-pruning level instead of the elbow.
    #[arg(long)]
    channel_level: Option<PruneLevel>,
    /// Seed for the tuning search order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    timing: TimingArgs,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Random convolution problems to check.
    #[arg(long, default_value_t = 500)]
    cases: usize,
    /// Seed for problem generation.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn load_model(path: &Path) -> Result<Model> {
    graph::load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    graph::load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = convstack_core::init_thread_pool() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::GenWorkload(a) => commands::gen_workload(a),
        Command::Prune(a) => commands::prune(a),
        Command::Quantize(a) => commands::quantize(a),
        Command::Bench(a) => commands::bench(a),
        Command::Tune(a) => commands::tune(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Verify(a) => commands::verify(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
