use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use patchwork_core::{KernelFamily, KernelSpec, Result};

#[derive(Parser, Debug)]
#[command(name = "patchwork", version, about = "Patchwork kriging: partitioned GP regression with boundary continuity")]
pub struct Cli {
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Draw a dataset from a GP prior and write it as CSV.
    Simulate(SimulateArgs),
    /// Fit a model to a CSV and save the bundle.
    Fit(FitArgs),
    /// Predict mean and variance at the rows of a CSV.
    Predict(PredictArgs),
    /// Score a model on a test set.
    Evaluate(EvaluateArgs),
    /// Run a factorial experiment grid on simulated data.
    Sweep(SweepArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    Se,
    Exp,
}

impl From<Kernel> for KernelFamily {
    fn from(k: Kernel) -> Self {
        match k {
            Kernel::Se => KernelFamily::SquaredExponential,
            Kernel::Exp => KernelFamily::Exponential,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct KernelArgs {
    #[arg(long, value_enum, default_value = "se")]
    pub kernel: Kernel,
    /// Signal variance.
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    /// Length-scale.
    #[arg(long, default_value_t = 1.0)]
    pub rho: f64,
    /// Observation noise variance.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
}

impl KernelArgs {
    pub fn spec(&self) -> Result<KernelSpec> {
        KernelSpec::new(self.kernel.into(), self.tau, self.rho, self.noise)
    }
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Number of regions; rounded down to a power of two. Defaults to the
    /// smallest power of two giving at most 600 points per region.
    #[arg(long)]
    pub k: Option<usize>,
    /// Pseudo points per pair of neighbouring regions, on average.
    #[arg(long, default_value_t = 7)]
    pub b: usize,
    #[command(flatten)]
    pub kernel: KernelArgs,
    /// Tune tau, rho and noise by maximizing the marginal likelihood first.
    #[arg(long)]
    pub optimize: bool,
    /// Likelihood evaluations for --optimize.
    #[arg(long, default_value_t = 200)]
    pub budget: usize,
    /// Write the optimizer trace to this CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    #[command(flatten)]
    pub kernel: KernelArgs,
    /// Lower corner of the input box, same for every axis.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub lower: f64,
    /// Upper corner of the input box, same for every axis.
    #[arg(long, default_value_t = 10.0, allow_hyphen_values = true)]
    pub upper: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV; the spec is written next to it with a .json extension.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Training CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Output bundle.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub model_args: ModelArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// CSV of inputs; `y` and `f_true` columns are ignored.
    #[arg(long)]
    pub data: PathBuf,
    /// Output CSV; stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Test CSV, or the full dataset when --split is given.
    #[arg(long)]
    pub data: PathBuf,
    /// Fitted bundle. Without it the model is fit on the training split.
    #[arg(long, required_unless_present = "split", conflicts_with = "split")]
    pub model: Option<PathBuf>,
    /// Training fraction for a seeded random split.
    #[arg(long)]
    pub split: Option<f64>,
    #[command(flatten)]
    pub model_args: ModelArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Interior benchmark targets when the data carry `f_true`.
    #[arg(long, default_value_t = 1000)]
    pub n_interior: usize,
    /// Boundary benchmark targets when the data carry `f_true`.
    #[arg(long, default_value_t = 200)]
    pub n_boundary: usize,
    /// Report JSON; a one-row CSV is written beside it. Stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [16, 32])]
    pub ks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0, 5])]
    pub bs: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0])]
    pub rhos: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [2])]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub replicates: usize,
    #[arg(long, default_value_t = 4000)]
    pub n: usize,
    #[arg(long, value_enum, default_value = "se")]
    pub kernel: Kernel,
    #[arg(long, default_value_t = 10.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 1000)]
    pub n_interior: usize,
    #[arg(long, default_value_t = 200)]
    pub n_boundary: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Cells run concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Output CSV; stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
