//! `fedglmm coordinate`: bind a TCP endpoint, wait for the expected
//! roster of site agents, drive the fit over summary exchanges, and
//! write the same result bundle as `fit` (minus predictions, since row
//! data never leaves the sites).

use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use fedglmm_core::federation::{run_coordinator, CoordinatorOptions};
use fedglmm_core::Error;

use crate::commands::ensure_out_dir;
use crate::config::{self, FitSettings};
use crate::fail::Failure;
use crate::manifest::Manifest;
use crate::report;

#[derive(Debug, clap::Args)]
pub struct CoordinateArgs {
    /// Listen endpoint (host:port; port 0 picks a free port).
    #[arg(long)]
    pub listen: String,

    /// Number of sites that must join before fitting starts.
    #[arg(long)]
    pub sites: usize,

    /// Directory receiving the result bundle and manifest.
    #[arg(long)]
    pub out_dir: PathBuf,

    #[command(flatten)]
    pub settings: FitSettings,

    /// Seconds to wait for the full roster.
    #[arg(long, default_value_t = 120)]
    pub accept_timeout_secs: u64,

    /// Write the bound listen address (host:port) to this file once
    /// ready, for scripts that passed port 0.
    #[arg(long)]
    pub port_file: Option<PathBuf>,

    /// Overwrite an existing run in --out-dir.
    #[arg(long)]
    pub force: bool,
}

pub fn run(args: &CoordinateArgs, cancel: &Arc<AtomicBool>) -> Result<(), Failure> {
    ensure_out_dir(&args.out_dir, args.force)?;
    let resolved = config::resolve(&args.settings)?;

    let listener = TcpListener::bind(&args.listen)
        .map_err(|e| Failure::Federation(format!("bind {}: {e}", args.listen)))?;
    let local = listener
        .local_addr()
        .map_err(|e| Failure::Federation(format!("local address: {e}")))?;
    if let Some(port_file) = &args.port_file {
        std::fs::write(port_file, format!("{local}\n"))?;
    }
    log::info!("listening on {local}, waiting for {} site(s)", args.sites);

    let mut options = CoordinatorOptions::new(args.sites);
    options.accept_timeout = Duration::from_secs(args.accept_timeout_secs);
    options.cancel = Some(cancel.clone());

    let mut manifest = Manifest::new("coordinate");
    manifest.config_all(resolved.provenance());
    manifest.config("expected_sites", args.sites.to_string());

    let extra = [
        ("command", "coordinate".to_string()),
        ("method", resolved.label.clone()),
        ("n_sites", args.sites.to_string()),
    ];

    match run_coordinator(listener, options, &resolved.model) {
        Ok(result) => {
            let written = report::write_result_files(&args.out_dir, &result, &extra)?;
            for path in &written {
                manifest.output(path)?;
            }
            manifest.write(&args.out_dir)?;
            log::info!(
                "converged in {} iteration(s): lambda {}, tau {:.6}, loglik {:.6}",
                result.iterations,
                result.lambda,
                result.tau,
                result.loglik
            );
            Ok(())
        }
        Err(Error::NonConvergence { summary, diagnostics }) => {
            let written =
                report::write_diagnostics(&args.out_dir, &extra, &summary, &diagnostics)?;
            for path in &written {
                manifest.output(path)?;
            }
            manifest.write(&args.out_dir)?;
            Err(Failure::NonConvergence(summary))
        }
        Err(e) if cancel.load(Ordering::Relaxed) => {
            log::warn!("interrupted: {e}");
            Err(Failure::Interrupted)
        }
        Err(e) => Err(Failure::Federation(e.to_string())),
    }
}
