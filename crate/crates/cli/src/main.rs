//! `sepcor`: fit, test and simulate separable correlation covariance models.

mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

const CELL_LAYOUT: &str = "Data layout: each row of --y is one observation of an r x c data matrix. \
Column (k-1)*r + j holds data-matrix cell (row j = V-index, column k = U-index). \
With --transpose-cells, column (j-1)*c + k holds that cell instead.";

#[derive(Debug, Parser)]
#[command(name = "sepcor", version, about = "Covariance estimation with Kronecker-separable correlation")]
#[command(after_help = CELL_LAYOUT)]
struct Cli {
    /// Suppress all diagnostics on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    /// Diagnostic level: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit one model to a dataset and write the estimates as JSON.
    #[command(after_help = CELL_LAYOUT)]
    Fit(FitArgs),
    /// Parametric bootstrap likelihood ratio test.
    #[command(after_help = CELL_LAYOUT)]
    Test(TestArgs),
    /// Monte-Carlo study over a grid of scenarios; writes one CSV row per scenario.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Responses, n rows by q = r*c columns.
    #[arg(long)]
    y: PathBuf,
    /// Regressors, n rows by p columns; defaults to an intercept.
    #[arg(long)]
    x: Option<PathBuf>,
    /// The CSV files start with a header row.
    #[arg(long)]
    header: bool,
    /// Rows of the data matrix (dimension of V).
    #[arg(long)]
    r: usize,
    /// Columns of the data matrix (dimension of U).
    #[arg(long)]
    c: usize,
    /// Read the q columns of --y as row-major cells.
    #[arg(long)]
    transpose_cells: bool,
}

#[derive(Debug, Args)]
struct SolverArgs {
    /// Stop once the objective changes by at most this much.
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
    #[arg(long, value_enum, default_value_t = Init::Identity)]
    init: Init,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Init {
    Identity,
    Sample,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Model {
    Sepcor,
    Sepcov,
    Unrestricted,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Hypothesis {
    CovVsCor,
    CorVsUnrestricted,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long, value_enum, default_value_t = Model::Sepcor)]
    model: Model,
    /// Seed for --init random.
    #[arg(long, env = "SEPCOR_SEED", default_value_t = 0)]
    seed: u64,
    /// Output JSON path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Include the fitted q x q covariance in the JSON output.
    #[arg(long)]
    emit_sigma: bool,
    /// Also write the fitted covariance as CSV.
    #[arg(long)]
    sigma_csv: Option<PathBuf>,
    /// Include the objective value after every iteration.
    #[arg(long)]
    trace: bool,
}

#[derive(Debug, Args)]
struct TestArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long, value_enum)]
    hypothesis: Hypothesis,
    /// Bootstrap replicates.
    #[arg(long, default_value_t = 99)]
    b: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, env = "SEPCOR_SEED", default_value_t = 0)]
    seed: u64,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// JSON file with `scenarios`, and optional `solver` and `tests` sections.
    #[arg(long)]
    config: PathBuf,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

fn init_logging(cli: &Cli) {
    let level = if cli.quiet { log::LevelFilter::Off } else { cli.log_level };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(&cli);
    let outcome = match cli.command {
        Command::Fit(a) => commands::fit(a),
        Command::Test(a) => commands::test(a),
        Command::Simulate(a) => commands::simulate(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            if !cli.quiet {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(1)
        }
    }
}
