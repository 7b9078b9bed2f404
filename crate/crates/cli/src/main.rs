mod commands;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Attention kernels, receptive-field and cost analyses, and super-resolution inference.
#[derive(Parser, Debug)]
#[command(name = "ucan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Numerical rank of kernelized attention matrices over seeds.
    Rank(RankArgs),
    /// Predicted vs measured receptive field of the large-kernel branch.
    Erf(ErfArgs),
    /// Counted MACs of a full forward pass.
    Macs(MacsArgs),
    /// Wall time and temporary allocation of the attention engines.
    Bench(BenchArgs),
    /// Upscale a PPM image.
    Forward(ForwardArgs),
    /// Write seeded random weights for a config.
    Init(InitArgs),
}

#[derive(Args, Debug)]
pub struct RankArgs {
    #[arg(long, default_value_t = 256)]
    pub n: usize,
    #[arg(long, default_value_t = 48)]
    pub d: usize,
    /// relu, elu1, symrelu, hedgehog, identity or softmax.
    #[arg(long, default_value = "hedgehog")]
    pub map: String,
    /// Hedgehog exponential pairs.
    #[arg(long, default_value_t = 1)]
    pub m: usize,
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 10)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write an SVG plot of rank per seed.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Args, Debug)]
pub struct ErfArgs {
    #[arg(long, required_unless_present = "table")]
    pub k_core: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub dilation: usize,
    #[arg(long)]
    pub k_extra: Option<usize>,
    /// Measure every row of the reference table instead of one configuration.
    #[arg(long)]
    pub table: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MacsArgs {
    /// Flat key = value model config; defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Comma-separated token counts.
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024")]
    pub n_list: Vec<usize>,
    /// Comma-separated subset of naive, tiled, linear.
    #[arg(long, value_delimiter = ',', default_value = "naive,tiled,linear")]
    pub engines: Vec<String>,
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    #[arg(long, default_value_t = 64)]
    pub tile_rows: usize,
    #[arg(long, default_value_t = 64)]
    pub tile_cols: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write an SVG plot of median time against N.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Args, Debug)]
pub struct ForwardArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Must match the scale stored with the weights when given.
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct InitArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub weights_out: PathBuf,
}

fn configure_threads() {
    let Ok(v) = std::env::var("UCAN_THREADS") else { return };
    match v.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not cap worker threads: {e}");
            }
        }
        _ => log::warn!("ignoring UCAN_THREADS={v:?}"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    configure_threads();
    let result = match cli.command {
        Command::Rank(a) => commands::rank(a),
        Command::Erf(a) => commands::erf(a),
        Command::Macs(a) => commands::macs(a),
        Command::Bench(a) => commands::bench(a),
        Command::Forward(a) => commands::forward(a),
        Command::Init(a) => commands::init(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
