mod commands;
mod util;

use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand};
use ntt_core::error::NttError;

#[derive(Parser)]
#[command(
    name = "ntt",
    version,
    about = "Distributed nonnegative tensor-train decomposition toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic low-rank tensor store, optionally noisy.
    Generate(GenerateArgs),
    /// Decompose a tensor store into a tensor-train archive.
    Decompose(DecomposeArgs),
    /// Materialize a tensor-train archive back into a tensor store.
    Reconstruct(ReconstructArgs),
    /// Compare two tensor stores.
    Metrics(MetricsArgs),
    /// Time decompositions across worker-group sizes and emit a CSV.
    Bench(BenchArgs),
}

#[derive(Args)]
pub struct GenerateArgs {
    /// Tensor shape, e.g. 16x16x16x16.
    #[arg(long)]
    pub shape: String,
    /// Train ranks r_0,...,r_d with boundary ranks 1, e.g. 1,4,6,4,1.
    #[arg(long)]
    pub ranks: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Variance of zero-mean Gaussian noise added per element.
    #[arg(long = "noise-var")]
    pub noise_var: Option<f64>,
    /// Clamp noisy values at zero.
    #[arg(long)]
    pub clip: bool,
    /// Worker grid, one extent per mode, e.g. 2x2x1x1. Defaults to serial.
    #[arg(long)]
    pub grid: Option<String>,
    /// Output store directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
#[command(group(ArgGroup::new("rank_spec").required(true).args(["eps", "ranks"])))]
pub struct DecomposeArgs {
    /// Input tensor store directory.
    #[arg(long)]
    pub input: PathBuf,
    /// Output archive directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Stagewise relative residual threshold for rank selection.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Fixed interior ranks r_1,...,r_{d-1}; a single value repeats.
    #[arg(long)]
    pub ranks: Option<String>,
    /// Stage solver: ntt-bcd, ntt-mu, or svd-tt.
    #[arg(long, default_value = "ntt-bcd")]
    pub method: String,
    /// Worker grid, one extent per mode, e.g. 2x2x1x1. Defaults to serial.
    #[arg(long)]
    pub grid: Option<String>,
    /// Solver iterations per stage.
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Extrapolation safeguard in (0, 1).
    #[arg(long, default_value_t = 0.9999)]
    pub delta: f64,
    /// Estimate the reported error at this many sampled positions instead
    /// of reconstructing in full.
    #[arg(long = "probe-error")]
    pub probe_error: Option<usize>,
    /// Where to write the per-stage metrics CSV; defaults to
    /// <out>.metrics.csv next to the archive.
    #[arg(long = "metrics-csv")]
    pub metrics_csv: Option<PathBuf>,
    /// Divide the H step by the square root of the Gram norm instead of
    /// the norm itself.
    #[arg(long = "sqrt-h-step")]
    pub sqrt_h_step: bool,
}

#[derive(Args)]
pub struct ReconstructArgs {
    /// Tensor-train archive directory.
    #[arg(long)]
    pub archive: PathBuf,
    /// Output store directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Chunk shape of the output store, e.g. 8x8x8x8. Defaults to one chunk.
    #[arg(long)]
    pub chunk: Option<String>,
}

#[derive(Args)]
pub struct MetricsArgs {
    /// Reference tensor store.
    #[arg(long)]
    pub a: PathBuf,
    /// Tensor store under comparison.
    #[arg(long)]
    pub b: PathBuf,
    /// Also report structural similarity of the leading 2-D slice.
    #[arg(long)]
    pub ssim: bool,
}

#[derive(Args)]
pub struct BenchArgs {
    /// Tensor shape, e.g. 32x32x32x32.
    #[arg(long)]
    pub shape: String,
    /// Generation train ranks, e.g. 1,4,4,4,1.
    #[arg(long)]
    pub ranks: String,
    /// Fixed interior rank used by every decomposition stage.
    #[arg(long, default_value_t = 4)]
    pub rank: usize,
    /// Worker-group sizes to time, e.g. 1,2,4.
    #[arg(long = "grid-list", default_value = "1,2,4")]
    pub grid_list: String,
    /// Timed runs per worker-group size.
    #[arg(long, default_value_t = 10)]
    pub repeat: usize,
    /// Solver iterations per stage.
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    #[arg(long, default_value = "ntt-bcd")]
    pub method: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_code(e: &NttError) -> i32 {
    match e {
        NttError::Config(_) | NttError::Store(_) => 2,
        NttError::Dimension(_) | NttError::Rank(_) | NttError::Index(_) => 3,
        NttError::Numerical(_)
        | NttError::Nonnegativity(_)
        | NttError::DegenerateInput(_)
        | NttError::CollectiveContract(_) => 4,
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Generate(a) => commands::generate(a),
        Cmd::Decompose(a) => commands::decompose(a),
        Cmd::Reconstruct(a) => commands::reconstruct(a),
        Cmd::Metrics(a) => commands::metrics(a),
        Cmd::Bench(a) => commands::bench(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
