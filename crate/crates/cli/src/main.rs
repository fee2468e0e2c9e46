//! `fedglmm`: generate synthetic multi-site data, fit a random-intercept
//! logistic model over exchanged summary statistics (in one process or
//! across TCP), and score the fitted results.
//!
//! Verbosity is controlled by the FEDGLMM_LOG environment variable
//! (standard log filter syntax; default `info`). Exit codes are part of
//! the interface; see [`fail::Failure`].

mod commands;
mod config;
mod fail;
mod manifest;
mod report;

use std::ptr;
use std::sync::atomic::{AtomicBool, AtomicPtr, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "fedglmm",
    version,
    about = "Federated random-intercept logistic regression toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic multi-site datasets with their ground truth.
    Generate(commands::generate::GenerateArgs),
    /// Fit one data table in-process, partitioned by site id.
    Fit(commands::fit::FitArgs),
    /// Serve every site in a data table as agents of a coordinator.
    ServeSite(commands::serve_site::ServeSiteArgs),
    /// Coordinate a federated fit over connected site agents.
    Coordinate(commands::coordinate::CoordinateArgs),
    /// Score fitted results against their generation truth.
    Evaluate(commands::evaluate::EvaluateArgs),
}

/// Target of the SIGINT handler. Points into a leaked, process-lifetime
/// flag, so the async handler only ever touches one atomic store.
static INTERRUPT_TARGET: AtomicPtr<AtomicBool> = AtomicPtr::new(ptr::null_mut());

extern "C" fn on_sigint(_: libc::c_int) {
    let target = INTERRUPT_TARGET.load(Ordering::Acquire);
    if !target.is_null() {
        unsafe { (*target).store(true, Ordering::Release) };
    }
}

/// Install the SIGINT handler and return the flag it raises. Used only
/// by the long-running network commands; everything else keeps the
/// default terminate-on-interrupt behavior.
fn install_interrupt() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let keep_alive = Arc::clone(&flag);
    INTERRUPT_TARGET.store(Arc::as_ptr(&keep_alive) as *mut AtomicBool, Ordering::Release);
    std::mem::forget(keep_alive);
    unsafe {
        libc::signal(libc::SIGINT, on_sigint as extern "C" fn(libc::c_int) as libc::sighandler_t);
    }
    flag
}

fn main() {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("FEDGLMM_LOG", "info"),
    )
    .format_timestamp(None)
    .init();

    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Generate(args) => commands::generate::run(&args),
        Command::Fit(args) => commands::fit::run(&args),
        Command::ServeSite(args) => {
            let cancel = install_interrupt();
            commands::serve_site::run(&args, &cancel)
        }
        Command::Coordinate(args) => {
            let cancel = install_interrupt();
            commands::coordinate::run(&args, &cancel)
        }
        Command::Evaluate(args) => commands::evaluate::run(&args),
    };
    if let Err(failure) = outcome {
        eprintln!("fedglmm: {failure}");
        std::process::exit(failure.exit_code());
    }
}
