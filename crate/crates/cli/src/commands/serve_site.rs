//! `fedglmm serve-site`: dial a coordinator and answer compute rounds
//! for every site found in a data table. Each site runs as its own
//! agent session on its own thread, so one process can stand in for
//! any number of participants.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;

use fedglmm_core::federation::{run_site, AgentOptions};

use crate::commands::read_input_dataset;
use crate::fail::Failure;

#[derive(Debug, clap::Args)]
pub struct ServeSiteArgs {
    /// Data table holding one or more sites, each served as an agent.
    #[arg(long)]
    pub data: PathBuf,

    /// Coordinator endpoint to dial (host:port).
    #[arg(long)]
    pub connect: String,

    /// Connection attempts per site before giving up.
    #[arg(long, default_value_t = 10)]
    pub attempts: u32,
}

pub fn run(args: &ServeSiteArgs, cancel: &Arc<AtomicBool>) -> Result<(), Failure> {
    let sites = read_input_dataset(&args.data)?;
    log::info!("serving {} site(s) from {} to {}", sites.len(), args.data.display(), args.connect);

    let mut handles = Vec::with_capacity(sites.len());
    for site in sites {
        let addr = args.connect.clone();
        let options = AgentOptions {
            connect_attempts: args.attempts,
            cancel: Some(cancel.clone()),
            ..AgentOptions::default()
        };
        handles.push(thread::spawn(move || {
            let site_id = site.site_id().to_string();
            (site_id, run_site(&addr, site, &options))
        }));
    }

    let mut first_failure: Option<Failure> = None;
    for handle in handles {
        let (site_id, outcome) = handle.join().expect("agent threads do not panic");
        match outcome {
            Ok(log) => {
                log::info!(
                    "site {site_id}: {} round(s), final model {}",
                    log.rounds,
                    if log.result.is_some() { "received" } else { "not broadcast" }
                );
            }
            Err(e) => {
                log::error!("site {site_id}: {e}");
                if first_failure.is_none() {
                    first_failure = Some(Failure::Federation(format!("site {site_id}: {e}")));
                }
            }
        }
    }
    if cancel.load(Ordering::Relaxed) {
        return Err(Failure::Interrupted);
    }
    match first_failure {
        Some(failure) => Err(failure),
        None => Ok(()),
    }
}
