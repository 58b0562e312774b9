mod bench;
mod config;
mod data;
mod model;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use structmiss::Precision;

use config::{CliError, Globals};

// Model code allocates many short-lived tensor buffers; glibc's adaptive
// mmap/trim thresholds turn that into page-fault churn on long runs.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Default output directory when neither `--out` nor the environment sets one.
const DEFAULT_OUT: &str = "structmiss-out";
const OUT_ENV: &str = "STRUCTMISS_OUT";

#[derive(Parser, Debug)]
#[command(name = "structmiss", version, about = "Missingness-aware tabular prior-fitted networks")]
struct Cli {
    /// Global seed; every random stream of the run is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: $STRUCTMISS_OUT, else ./structmiss-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 1 gives the sequential mode.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Flat JSON file of parameters; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Arithmetic precision for model code (f32 or f64).
    #[arg(long, global = true)]
    precision: Option<Precision>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample synthetic tasks from the SCM prior.
    GenTasks(data::GenTasksArgs),
    /// Apply a missingness mechanism to a CSV file.
    Mask(data::MaskArgs),
    /// Pre-train a model on a synthetic prior.
    Pretrain(model::PretrainArgs),
    /// Predict labels of held-out rows with a trained model.
    Predict(model::PredictArgs),
    /// Fill missing cells with posterior-mean imputations.
    Impute(model::ImputeArgs),
    /// Numerically check the theoretical guarantees.
    VerifyTheory(bench::VerifyArgs),
    /// Run the MNAR imputation benchmark.
    Bench(bench::BenchArgs),
    /// Render a benchmark report to text and SVG.
    Report(bench::ReportArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => config::read_config_file(p)?,
        None => serde_json::Map::new(),
    };
    let out = cli
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let globals = Globals::resolve(&file, cli.seed, cli.precision, cli.threads, out)?;
    if let Some(n) = globals.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::GenTasks(a) => data::gen_tasks(&globals, &file, &a),
        Command::Mask(a) => data::mask(&globals, &file, &a),
        Command::Pretrain(a) => model::pretrain(&globals, &file, &a),
        Command::Predict(a) => model::predict(&globals, &file, &a),
        Command::Impute(a) => model::impute(&globals, &file, &a),
        Command::VerifyTheory(a) => bench::verify_theory(&globals, &file, &a),
        Command::Bench(a) => bench::bench(&globals, &file, &a),
        Command::Report(a) => bench::report(&globals, &file, &a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
