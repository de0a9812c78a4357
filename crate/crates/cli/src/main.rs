mod commands;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use litv2::attention::Mechanism;
use litv2::backbone::Variant;

/// HiLo attention and LITv2 toolkit: cost model, sweeps, benchmarks,
/// gradient checks, toy training and spectrum analysis.
#[derive(Debug, Parser)]
#[command(name = "litv2", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Multiply-accumulate counts of an attention layer or a whole model.
    #[command(subcommand)]
    Flops(FlopsCmd),
    /// Cost-model sweeps written as CSV.
    Sweep(SweepArgs),
    /// Wall-clock throughput.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Finite-difference gradient checks in f64.
    Gradcheck(GradcheckArgs),
    /// Train LITv2-tiny on the synthetic frequency dataset.
    TrainToy(TrainArgs),
    /// Frequency magnitude maps of Hi-Fi / Lo-Fi outputs of a checkpoint.
    Spectrum(SpectrumArgs),
    /// Write the synthetic dataset as TNSR tensors.
    ExportDataset(ExportArgs),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct OutArg {
    /// Output directory [default: runs/<subcommand>]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct AttnArgs {
    #[arg(long, default_value_t = 768)]
    pub dim: usize,
    #[arg(long, default_value_t = 12)]
    pub heads: usize,
    /// Fraction of heads assigned to Lo-Fi.
    #[arg(long, default_value_t = 0.9)]
    pub alpha: f64,
    /// HiLo window size.
    #[arg(long, default_value_t = 2)]
    pub window: usize,
    /// Window of the local-window baseline.
    #[arg(long, default_value_t = 7)]
    pub local_window: usize,
    /// Reduction ratio of the SRA baseline.
    #[arg(long, default_value_t = 2)]
    pub sr_ratio: usize,
}

fn parse_mech(s: &str) -> Result<Mechanism, String> {
    Mechanism::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Mechanism::ALL.iter().map(|m| m.name()).collect();
        format!("unknown mechanism {s:?}; valid names: {}", names.join(", "))
    })
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: litv2::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum FlopsCmd {
    /// One attention layer on N tokens or an R×R map.
    Attn(FlopsAttnArgs),
    /// Per-stage totals of a LITv2 variant.
    Model(FlopsModelArgs),
}

#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct FlopsAttnArgs {
    #[arg(long, value_parser = parse_mech, default_value = "hilo")]
    #[serde(serialize_with = "manifest::display")]
    pub mech: Mechanism,
    #[command(flatten)]
    pub attn: AttnArgs,
    /// Token count (token formulas; no window padding).
    #[arg(long, conflicts_with = "res")]
    pub tokens: Option<u64>,
    /// Side of a square map (window padding included).
    #[arg(long)]
    pub res: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct FlopsModelArgs {
    #[arg(long, value_parser = parse_variant, default_value = "S")]
    #[serde(serialize_with = "manifest::debug")]
    pub variant: Variant,
    /// Input resolution [default: the variant's own]
    #[arg(long)]
    pub res: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKindArg {
    /// Hi-Fi, Lo-Fi and HiLo over token counts.
    HiloRes,
    /// HiLo over split ratios.
    Alpha,
    /// HiLo over map sides, one series per window size.
    Window,
}

#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct SweepArgs {
    #[arg(value_enum)]
    pub kind: SweepKindArg,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub window: Option<usize>,
    /// Token count for the alpha sweep.
    #[arg(long)]
    pub tokens: Option<u64>,
    /// Comma-separated grid: token counts (hilo-res), ratios (alpha) or
    /// window sizes (window).
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub grid: Option<Vec<f64>>,
    /// Map sides for the window sweep.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub res: Option<Vec<usize>>,
    /// TOML file with the same keys as the flags; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Subcommand)]
pub enum BenchCmd {
    /// Compare attention mechanisms on one feature-map shape.
    Attn(BenchAttnArgs),
    /// Whole-model throughput.
    Model(BenchModelArgs),
}

#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct BenchOpts {
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 30)]
    pub runs: usize,
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct BenchAttnArgs {
    #[arg(long, value_delimiter = ',', value_parser = parse_mech, default_value = "msa,hilo,sra,window")]
    #[serde(serialize_with = "manifest::display_all")]
    pub mechs: Vec<Mechanism>,
    /// Side of the square feature map.
    #[arg(long, default_value_t = 14)]
    pub res: usize,
    #[command(flatten)]
    pub attn: AttnArgs,
    #[command(flatten)]
    pub bench: BenchOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct BenchModelArgs {
    #[arg(long, value_parser = parse_variant, default_value = "S")]
    #[serde(serialize_with = "manifest::debug")]
    pub variant: Variant,
    #[arg(long)]
    pub res: Option<usize>,
    #[command(flatten)]
    pub bench: BenchOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetArg {
    Ops,
    Hilo,
    Block,
    Model,
}

/// `K` or an inclusive range `A..B`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct SeedRange {
    pub first: u64,
    pub last: u64,
}

fn parse_seeds(s: &str) -> Result<SeedRange, String> {
    let num = |t: &str| t.trim().parse::<u64>().map_err(|e| format!("bad seed {t:?}: {e}"));
    let (first, last) = match s.split_once("..") {
        Some((a, b)) => (num(a)?, num(b.trim_start_matches('='))?),
        None => (num(s)?, num(s)?),
    };
    if first > last {
        return Err(format!("empty seed range {s}"));
    }
    Ok(SeedRange { first, last })
}

#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "ops")]
    pub target: TargetArg,
    /// Seed `K` or inclusive range `A..B`.
    #[arg(long, value_parser = parse_seeds, default_value = "0")]
    pub seed: SeedRange,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-6)]
    pub step: f64,
    /// Probe at most this many entries per tensor.
    #[arg(long)]
    pub max_entries: Option<usize>,
    #[arg(long, hide = true)]
    pub corrupt_grad: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DTypeArg {
    F32,
    F64,
}

#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    /// Dataset size (even).
    #[arg(long, default_value_t = 256)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, value_enum, default_value = "f32")]
    pub dtype: DTypeArg,
    /// Stop after the first epoch whose train accuracy reaches this value.
    #[arg(long, default_value_t = 1.0)]
    pub stop_at: f64,
    /// Run every epoch regardless of accuracy.
    #[arg(long)]
    pub full: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchArg {
    Hifi,
    Lofi,
    Both,
}

#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct SpectrumArgs {
    /// Checkpoint manifest written by train-toy.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    pub branch: BranchArg,
    #[arg(long, default_value_t = 3)]
    pub stage: usize,
    /// Freshly generated samples to analyze.
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    /// Channels to render, strongest first.
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    /// Band cutoff radius [default: a quarter of the half-diagonal]
    #[arg(long)]
    pub radius: Option<f64>,
    /// Seed of the analyzed samples.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct ExportArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub n: usize,
    #[arg(long, value_enum, default_value = "f64")]
    pub dtype: DTypeArg,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct ReplayArgs {
    /// A `manifest.json` from an earlier run.
    pub manifest: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArg,
}

/// Failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_NUMERICAL: u8 = 2;
pub const EXIT_IO: u8 = 3;

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure { code: EXIT_USAGE, message: msg.into() }
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Failure { code: EXIT_NUMERICAL, message: msg.into() }
    }

    pub fn io(msg: impl Into<String>) -> Self {
        Failure { code: EXIT_IO, message: msg.into() }
    }
}

impl From<litv2::Error> for Failure {
    fn from(e: litv2::Error) -> Self {
        use litv2::Error as E;
        let code = match e {
            E::Numerical(_) => EXIT_NUMERICAL,
            E::Io { .. } | E::Format(_) => EXIT_IO,
            E::Config(_) | E::Shape { .. } | E::Dimension { .. } => EXIT_USAGE,
        };
        Failure { code, message: e.to_string() }
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

/// Parse `args` (without the program name) and run the command.
pub fn run(args: Vec<OsString>) -> CmdResult {
    let mut argv = vec![OsString::from("litv2")];
    argv.extend(args.iter().cloned());
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => Ok(()),
                _ => Err(Failure { code: EXIT_USAGE, message: String::new() }),
            };
        }
    };
    commands::dispatch(cli.command, &args)
}

fn main() -> ExitCode {
    // Exit quietly when stdout is a closed pipe.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    match run(std::env::args_os().skip(1).collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if !f.message.is_empty() {
                eprintln!("error: {}", f.message);
            }
            ExitCode::from(f.code)
        }
    }
}
