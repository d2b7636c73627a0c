//! The `emim` command line: verification suites, MAC benchmark, the
//! displacement demo and toy training.
//!
//! Exit codes: 0 when every gate passes, 1 on a numeric or gate failure
//! (including training divergence), 2 on usage or configuration errors.

mod commands;
mod report;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::attention::{Boundary, EmimConfig, Sampling};
use crate::block::BlockPattern;
use crate::error::Error;
use crate::verify::Mechanism;

pub use report::{JsonReport, RunManifest, JSON_REPORT_FILE, MANIFEST_FILE, TEXT_REPORT_FILE};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "emim", version, about = "Windowed cross-frame attention with explicit motion features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a verification suite and write a JSON report.
    Check(CheckArgs),
    /// Analytic and instrumented MAC counts, plus optional timings.
    Bench(BenchArgs),
    /// Recover known translations from the affinity argmax.
    DemoDisplacement(DemoArgs),
    /// Train a small classifier on the translated-noise direction task.
    TrainToy(TrainArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Grad,
    Oracle,
    Invariants,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// Remove the motion MLP from every E block.
    Motion,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Accepted for reproducibility audits; every command runs serially.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Directory receiving the report files and the run manifest.
    #[arg(long, default_value = "emim-out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct WindowArgs {
    #[arg(long, default_value_t = 3)]
    pub radius: usize,
    #[arg(long, default_value_t = 1)]
    pub interval: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value = "sliding", value_parser = parse_from_str::<Sampling>)]
    pub sampling: Sampling,
    #[arg(long, default_value = "pad_constant", value_parser = parse_from_str::<Boundary>)]
    pub boundary: Boundary,
}

impl WindowArgs {
    pub fn config(&self) -> EmimConfig {
        EmimConfig {
            radius: self.radius,
            interval: self.interval,
            heads: self.heads,
            sampling: self.sampling,
            boundary: self.boundary,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CheckArgs {
    #[arg(long, value_enum)]
    pub suite: Suite,
    /// Randomized configurations for the oracle and invariant suites.
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Overrides the suite tolerance (1e-5 relative for gradients, 1e-10
    /// absolute for the oracle).
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Mechanism to measure; all three when omitted.
    #[arg(long, value_parser = parse_from_str::<Mechanism>)]
    pub mechanism: Option<Mechanism>,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 14)]
    pub size: usize,
    #[arg(long, default_value_t = 64)]
    pub channels: usize,
    /// Timed forward passes per mechanism; 0 prints MAC counts only.
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Skip the motion MLP in the windowed counts.
    #[arg(long, value_enum)]
    pub ablate: Option<Ablation>,
    #[command(flatten)]
    pub window: WindowArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct DemoArgs {
    #[arg(long, default_value_t = 3)]
    pub radius: usize,
    #[arg(long, default_value_t = 1)]
    pub interval: usize,
    #[arg(long, default_value = "pad_constant", value_parser = parse_from_str::<Boundary>)]
    pub boundary: Boundary,
    /// Shift `dx,dy` to test (repeatable); every shift in the window when omitted.
    #[arg(long = "shift", value_parser = parse_shift, allow_hyphen_values = true)]
    pub shifts: Vec<(isize, isize)>,
    /// Clips per shift.
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// `emim` trains the pattern as given, `global` replaces every block by
    /// dense attention, `non_sliding` anchors all windows at the frame centre.
    #[arg(long, default_value = "emim", value_parser = parse_from_str::<Mechanism>)]
    pub mechanism: Mechanism,
    #[arg(long, default_value = "EO", value_parser = parse_from_str::<BlockPattern>)]
    pub pattern: BlockPattern,
    #[arg(long, value_enum)]
    pub ablate: Option<Ablation>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 2000)]
    pub clips: usize,
    #[arg(long, default_value_t = 2)]
    pub frames: usize,
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long, default_value_t = 32)]
    pub channels: usize,
    /// Also store the trained parameters under `<out>/checkpoint`.
    #[arg(long)]
    pub save: bool,
    #[command(flatten)]
    pub window: WindowArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

fn parse_from_str<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_shift(s: &str) -> Result<(isize, isize), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("shift `{s}` must look like dx,dy"))?;
    let p = |v: &str| v.trim().parse::<isize>().map_err(|e| format!("shift `{s}`: {e}"));
    Ok((p(a)?, p(b)?))
}

/// Exit code for an error escaping a command.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_config() {
        EXIT_USAGE
    } else {
        EXIT_FAIL
    }
}

/// Parses `args` (program name first) and runs the command, printing the
/// text report to `out` and diagnostics to `err`.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_PASS };
            let _ = if e.use_stderr() {
                write!(err, "{e}")
            } else {
                write!(out, "{e}")
            };
            return code;
        }
    };
    match commands::dispatch(&cli.command, &argv, out) {
        Ok(passed) => {
            if passed {
                EXIT_PASS
            } else {
                EXIT_FAIL
            }
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

/// Entry point of the `emim` binary.
pub fn main_exit() -> i32 {
    run_with(std::env::args_os(), &mut std::io::stdout(), &mut std::io::stderr())
}
