//! Command-line front end: JSON run configs in, JSON reports and CSV
//! trajectories out.

mod commands;
pub mod config;
pub mod report;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::Error;
pub use config::RunConfig;
pub use report::{emit_report_json, emit_trajectory_csv, trajectory_csv, Num, Report};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CHECK_FAILED: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "regstab", version, about = "Feedback synthesis and stability certification from MRFs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Main artifact: trajectory CSV, tables or regularized MRF.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Report JSON; printed to stdout when absent.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (falls back to REGSTAB_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Fit a decrease rate and certify it on the level region.
    Certify,
    /// Build the bridge tables and check the sandwich.
    Bridge,
    /// Fit, certify, and schedule the sampling diameter.
    Synthesize,
    /// One sampling run from the first initial state, with all checks.
    Simulate,
    /// Euler limit over a refining diameter sequence.
    Euler,
    /// Build the semiconcave regularization of the MRF.
    Regularize,
    /// Sampling runs from every initial state, in parallel.
    Sweep,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Certify => "certify",
            Command::Bridge => "bridge",
            Command::Synthesize => "synthesize",
            Command::Simulate => "simulate",
            Command::Euler => "euler",
            Command::Regularize => "regularize",
            Command::Sweep => "sweep",
        }
    }
}

fn is_usage_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Config(_)
            | Error::UnknownId { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::InvalidArgument(_)
            | Error::InvalidRegion(_)
            | Error::OutOfRange { .. }
    )
}

fn configure_threads(threads: Option<usize>) -> Result<(), String> {
    let n = match threads {
        Some(n) => Some(n),
        None => match std::env::var("REGSTAB_THREADS") {
            Ok(v) => Some(v.trim().parse().map_err(|_| format!("bad REGSTAB_THREADS value {v:?}"))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        // A second call in the same process keeps the existing pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Err(msg) = configure_threads(cli.threads) {
        eprintln!("regstab: {msg}");
        return EXIT_USAGE;
    }
    let Some(config_path) = &cli.config else {
        eprintln!("regstab: --config is required");
        return EXIT_USAGE;
    };
    let cfg = match RunConfig::load(config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("regstab: {e}");
            return EXIT_USAGE;
        }
    };
    let out = cli.out.clone().or_else(|| cfg.output.trajectory.as_ref().map(PathBuf::from));
    let report_path = cli.report.clone().or_else(|| cfg.output.report.as_ref().map(PathBuf::from));
    let outcome = match execute(cli.command.name(), &cfg, cli.seed, out.as_deref(), cli.verbose) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("regstab: {e}");
            return EXIT_USAGE;
        }
    };
    let written = match &report_path {
        Some(p) => emit_report_json(&outcome.report, p),
        None => {
            print!("{}", outcome.report.to_json());
            Ok(())
        }
    };
    if let Err(e) = written {
        eprintln!("regstab: {e}");
        return EXIT_USAGE;
    }
    outcome.exit_code()
}

/// Report of a finished command.
pub struct Outcome {
    pub report: Report,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.report.stable {
            EXIT_OK
        } else {
            EXIT_CHECK_FAILED
        }
    }
}

/// Runs one subcommand on a parsed config, writing its artifact to `out`.
/// Usage and I/O errors come back as `Err`; failed checks and pipeline
/// errors end up in the report.
pub fn execute(
    command: &str,
    cfg: &RunConfig,
    seed: Option<u64>,
    out: Option<&Path>,
    verbose: bool,
) -> Result<Outcome, Error> {
    let ctx = commands::Context { cfg, seed: seed.unwrap_or(cfg.seed), out, verbose };
    let mut report = Report::default();
    match commands::dispatch(command, &ctx, &mut report) {
        Ok(artifact) => commands::write_artifact(&artifact, out)?,
        Err(e) if is_usage_error(&e) => return Err(e),
        Err(e) => {
            report.stable = false;
            report.notes.push(e.to_string());
        }
    }
    Ok(Outcome { report })
}
