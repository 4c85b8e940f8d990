mod fit;
mod sim;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Inference on a treatment coefficient in high-dimensional logistic
/// regression.
#[derive(Parser)]
#[command(name = "hdlogit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one estimator on a CSV file and print a JSON report.
    Fit(FitArgs),
    /// Run a Monte Carlo experiment for one design and write CSV rows.
    Simulate(SimulateArgs),
    /// Run a Monte Carlo experiment over a grid of designs.
    Grid(GridArgs),
}

#[derive(Clone, Copy, ValueEnum)]
pub enum PenaltyArg {
    Caption,
    Hoeffding,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum RegionArg {
    /// Wald region matching the method.
    Wald,
    /// Criterion-based region (IV methods only).
    Indirect,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum LayoutArg {
    Covariates,
    Controls,
}

/// Settings shared by every pipeline run.
#[derive(Args, Clone)]
pub struct PipelineArgs {
    /// Step-1 penalty rule.
    #[arg(long, value_enum, default_value = "caption")]
    pub penalty_rule: PenaltyArg,
    /// Tail parameter of the Hoeffding rule.
    #[arg(long, default_value_t = 0.05)]
    pub hoeffding_gamma: f64,
    /// Half-width of the IV search window is C / ln n on the standardized scale.
    #[arg(long, default_value_t = hdlogit::estimators::DEFAULT_SEARCH_CONSTANT)]
    pub search_constant: f64,
    /// Unit weights in Step 2.
    #[arg(long)]
    pub h0_mode: bool,
    /// Leave the treatment unpenalized in Step 1.
    #[arg(long)]
    pub unpenalized_treatment: bool,
}

#[derive(Args)]
pub struct FitArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "y")]
    pub outcome: String,
    #[arg(long, default_value = "d")]
    pub treatment: String,
    /// Comma-separated control columns; defaults to every remaining column.
    #[arg(long, value_delimiter = ',')]
    pub controls: Option<Vec<String>>,
    /// Do not add an unpenalized intercept column.
    #[arg(long)]
    pub no_intercept: bool,
    #[arg(long, default_value = "double-selection")]
    pub method: String,
    #[arg(long, default_value_t = 0.05)]
    pub xi: f64,
    #[arg(long, value_enum, default_value = "wald")]
    pub region: RegionArg,
    /// Null value for the reported test.
    #[arg(long, default_value_t = 0.0)]
    pub alpha0: f64,
    /// Recorded in the report; the fit itself is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Args, Clone)]
pub struct SpecArgs {
    #[arg(long, default_value = "sparse")]
    pub design: String,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 250)]
    pub p: usize,
    #[arg(long, default_value_t = 0.5)]
    pub rho: f64,
    #[arg(long, value_enum, default_value = "covariates")]
    pub layout: LayoutArg,
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.05)]
    pub xi: f64,
    /// Comma-separated estimator names.
    #[arg(long, value_delimiter = ',', default_value = "naive,optimal-iv,double-selection")]
    pub methods: Vec<String>,
    /// Worker threads; falls back to HDLOGIT_THREADS, then to all cores.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 0.2)]
    pub alpha0: f64,
    #[arg(long, default_value_t = 0.75)]
    pub r2d: f64,
    #[arg(long, default_value_t = 0.75)]
    pub r2y: f64,
    #[command(flatten)]
    pub spec: SpecArgs,
}

#[derive(Args)]
pub struct GridArgs {
    /// Comma-separated treatment coefficients.
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5")]
    pub alpha0_list: Vec<f64>,
    /// R^2 values for both equations as lo:hi:step.
    #[arg(long, default_value = "0:0.9:0.1")]
    pub r2_grid: String,
    /// Reuse finished cells from the checkpoint directory.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub spec: SpecArgs,
}

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn data(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn solver(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

impl From<hdlogit::Error> for Failure {
    fn from(e: hdlogit::Error) -> Self {
        if e.is_solver_failure() {
            Failure::solver(e.to_string())
        } else {
            Failure::data(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Fit(a) => fit::run(&a),
        Command::Simulate(a) => sim::simulate(&a),
        Command::Grid(a) => sim::grid(&a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("hdlogit: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
