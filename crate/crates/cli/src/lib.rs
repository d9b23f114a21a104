//! `msac <command> [--flags]`: verification suites, gradient checks,
//! benchmarks, toy training runs and tensor file utilities.
//!
//! Exit codes: 0 when every check passes, 1 on a check failure, 2 on a usage
//! or configuration error.

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub mod bench;
pub mod gradcheck;
pub mod tensor_cmd;
pub mod train;
pub mod verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable or invalid configuration, malformed input files.
    Usage(String),
    /// A check ran and did not pass, or a run failed part way.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Failed(_) => EXIT_FAIL,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn usage(msg: impl fmt::Display) -> CliError {
    CliError::Usage(msg.to_string())
}

pub(crate) fn failed(msg: impl fmt::Display) -> CliError {
    CliError::Failed(msg.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "msac", version, about = "Self attentive convolution toolkit")]
pub struct Cli {
    /// Seed for every randomized command.
    #[arg(long, global = true, env = "MSAC_SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Randomized equivalence checks; prints a JSON report.
    Verify {
        #[arg(value_enum)]
        suite: verify::Suite,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Overrides the per-suite tolerance.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Reverse-mode gradients against finite differences, one JSON line per op.
    Gradcheck {
        /// A registered op name or `all`.
        op: String,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = msac::autodiff::DEFAULT_EPS)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Timing and cost table as CSV.
    Bench {
        #[arg(long, value_enum, default_value_t = bench::BenchOp::All)]
        op: bench::BenchOp,
        /// Square image sides to sweep, e.g. `4,8,16`.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Skip configurations whose live tensors would exceed this many MiB.
        #[arg(long, default_value_t = 1024)]
        mem_cap: u64,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Toy training runs; writes `loss.csv`, `summary.json` and `params/`.
    Train {
        #[arg(value_enum)]
        task: train::Task,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// MST1 tensor file utilities.
    Tensor {
        #[command(subcommand)]
        action: TensorAction,
    },
}

#[derive(Debug, Subcommand)]
pub enum TensorAction {
    /// Shape and summary statistics.
    Info { path: PathBuf },
    /// Every value, one per line, in row-major order.
    Dump { path: PathBuf },
    /// Writes a seeded random tensor.
    Random {
        path: PathBuf,
        /// Dimensions such as `3x4x2`.
        #[arg(long)]
        shape: String,
        #[arg(long, value_enum, default_value_t = Dist::Uniform)]
        dist: Dist,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Dist {
    /// U[-1, 1]
    Uniform,
    /// N(0, 1)
    Normal,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("msac: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Verify { suite, trials, tol } => {
            let report = verify::run(*suite, *trials, seed, *tol)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(failed)?);
            if report.pass {
                Ok(())
            } else {
                Err(failed("verification failed"))
            }
        }
        Command::Gradcheck { op, trials, eps, tol } => gradcheck::run(op, *trials, seed, *eps, *tol),
        Command::Bench {
            op,
            sizes,
            repeats,
            mem_cap,
            out,
        } => {
            let plan = bench::Plan {
                op: *op,
                sizes: sizes.clone(),
                repeats: *repeats,
                mem_cap_mib: *mem_cap,
                seed,
            };
            bench::run_to(&plan, out.as_deref())
        }
        Command::Train { task, config, out } => {
            let summary = train::run(*task, config, out, cli.seed)?;
            println!("{}", serde_json::to_string_pretty(&summary).map_err(failed)?);
            match summary.target_met {
                Some(false) => Err(failed("training target not reached")),
                _ => Ok(()),
            }
        }
        Command::Tensor { action } => tensor_cmd::run(action, seed),
    }
}
