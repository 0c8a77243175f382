//! `sparseffn`: format conversion and validation, benchmarking, toy
//! training and activation statistics.
//!
//! Exit codes: 0 success, 2 validation or usage error, 3 capacity overflow,
//! 4 numerical failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "sparseffn",
    version,
    about = "Sparse feedforward formats, kernels and toy training"
)]
struct Cli {
    /// Worker threads for the parallel kernels.
    #[arg(long, global = true, env = "SPARSEFFN_THREADS")]
    threads: Option<usize>,

    /// Seed for every random stream (overrides config files).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert between DNSE, TWLL and HYBR files.
    Convert(ConvertArgs),
    /// Check a DNSE, TWLL or HYBR file against its format rules.
    Validate { path: PathBuf },
    /// Time the dense and sparse inference pipelines on a synthetic block.
    Bench(BenchArgs),
    /// Train the toy teacher-student model.
    TrainToy(TrainArgs),
    /// Compute one statistic from an activation log.
    Stats(StatsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Target {
    Dense,
    Twell,
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Keep {
    Positive,
    Nonzero,
}

#[derive(Debug, Args)]
struct ConvertArgs {
    input: PathBuf,
    output: PathBuf,
    /// Output format.
    #[arg(long)]
    to: Target,
    /// TwELL tile width.
    #[arg(long, default_value_t = 256)]
    tile: usize,
    /// TwELL compression factor.
    #[arg(long, default_value_t = 1)]
    compress: usize,
    /// Hybrid ELL width.
    #[arg(long, default_value_t = 128)]
    ell_width: usize,
    /// Hybrid backup rows (defaults to one per row, which never overflows).
    #[arg(long)]
    dense_cap: Option<usize>,
    /// Entries kept when packing dense data.
    #[arg(long, value_enum, default_value_t = Keep::Positive)]
    keep: Keep,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 256)]
    m: usize,
    #[arg(long, default_value_t = 256)]
    k: usize,
    #[arg(long, default_value_t = 1024)]
    n: usize,
    /// Target gate sparsity in [0, 1].
    #[arg(long, default_value_t = 0.99)]
    sparsity: f64,
    #[arg(long, default_value_t = 256)]
    tile: usize,
    #[arg(long, default_value_t = 4)]
    compress: usize,
    /// Also route the gate activations into a hybrid of this ELL width.
    #[arg(long)]
    ell_width: Option<usize>,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// gated or non_gated.
    #[arg(long, default_value = "gated")]
    variant: String,
    /// Emit one JSON record instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Comma-separated L1 coefficients; one run per value.
    #[arg(long, value_delimiter = ',')]
    l1: Vec<f64>,
    /// Directory for reports and logs.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Also write the activation log of the evaluation rows.
    #[arg(long, value_enum)]
    log: Option<LogKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LogKind {
    Alog,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Statistic {
    /// layer,mean_nnz,max_nnz,dead_frac
    Layer,
    /// position,mean_nnz
    Position,
    /// kind,rank,token,frequency,mean_nnz
    Token,
    /// statistic,value (Pearson r of per-layer mean_nnz against --against)
    Correlate,
}

#[derive(Debug, Args)]
struct StatsArgs {
    /// Activation log (ALOG or CSV).
    log: PathBuf,
    statistic: Statistic,
    /// Output CSV; standard output when absent.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Training report JSON supplying per-layer dead fractions.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Minimum token frequency for `token`.
    #[arg(long, default_value_t = 1.0 / 16384.0)]
    min_freq: f64,
    /// Tokens listed at each extreme for `token`.
    #[arg(long, default_value_t = 10)]
    top: usize,
    /// One value per line (or CSV with a `value` column), one per layer,
    /// for `correlate`.
    #[arg(long)]
    against: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
