//! Batch pipeline driver. Subcommands cover synthetic corpus generation,
//! pseudo-label elaboration, threshold calibration, model training,
//! evaluation, and comparison reports. Every run writes a `run.json`
//! provenance record with the resolved configuration and SHA-256 hashes of
//! its artifacts; wall-clock data is confined to that file, so reruns with
//! identical inputs and seeds reproduce every other artifact byte for byte.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.

use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

mod commands;
mod provenance;

use provenance::RunLog;

#[derive(Parser)]
#[command(
    name = "avparse",
    version,
    about = "Weakly supervised audio-visual video parsing pipeline",
    after_help = "Relative output paths resolve under $AVPARSE_OUT when that variable is set."
)]
struct Cli {
    /// Worker threads for per-video parallelism; 0 means all cores.
    /// The thread count never changes results.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from a spec file.
    Gen(commands::gen::GenArgs),
    /// Turn teacher logits into dense per-segment pseudo labels.
    Elaborate(commands::elaborate::ElaborateArgs),
    /// Fit per-class teacher thresholds against dense ground truth.
    Calibrate(commands::calibrate::CalibrateArgs),
    /// Optimize a model on a corpus.
    Train(commands::train::TrainArgs),
    /// Score a checkpoint or stored labels against dense ground truth.
    Eval(commands::eval::EvalArgs),
    /// Summarize finished runs into comparison tables and plot CSVs.
    Report(commands::report::ReportArgs),
}

fn main() -> ExitCode {
    // Die on SIGPIPE like any pipeline tool instead of panicking on EPIPE
    // when stdout closes early (e.g. piped into head).
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let jobs = if cli.jobs == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        cli.jobs
    };
    // Per-video work reduces in video order, so pool size is invisible in
    // the outputs; it only scales wall time.
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
        eprintln!("error: building worker pool: {e}");
        return ExitCode::from(1);
    }
    match dispatch(cli.command, jobs) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            exit_code(&err)
        }
    }
}

fn dispatch(command: Command, jobs: usize) -> Result<()> {
    match command {
        Command::Gen(args) => commands::gen::run(&args, RunLog::start("gen", jobs)),
        Command::Elaborate(args) => {
            commands::elaborate::run(&args, RunLog::start("elaborate", jobs))
        }
        Command::Calibrate(args) => {
            commands::calibrate::run(&args, RunLog::start("calibrate", jobs))
        }
        Command::Train(args) => commands::train::run(&args, RunLog::start("train", jobs)),
        Command::Eval(args) => commands::eval::run(&args, RunLog::start("eval", jobs)),
        Command::Report(args) => commands::report::run(&args, RunLog::start("report", jobs)),
    }
}

/// Usage and configuration problems exit 2, runtime failures 1.
fn exit_code(err: &anyhow::Error) -> ExitCode {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<avparse::Error>() {
            return ExitCode::from(if e.is_usage() { 2 } else { 1 });
        }
    }
    ExitCode::from(1)
}
