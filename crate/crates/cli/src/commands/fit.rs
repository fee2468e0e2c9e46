//! `fedglmm fit`: one-process fit of a data table, partitioned by site
//! id and driven through the same summary exchange the network path
//! uses, so its results match a federated run over the same sites.

use std::path::PathBuf;

use fedglmm_core::federation::InProcessProvider;
use fedglmm_core::{fit, train_validation_split, Error};

use crate::commands::{ensure_out_dir, read_input_dataset};
use crate::config::{self, FitSettings};
use crate::fail::Failure;
use crate::manifest::Manifest;
use crate::report;

#[derive(Debug, clap::Args)]
pub struct FitArgs {
    /// Input data table (header `site_id,y,x1,...`).
    #[arg(long)]
    pub data: PathBuf,

    /// Directory receiving the result bundle and manifest.
    #[arg(long)]
    pub out_dir: PathBuf,

    #[command(flatten)]
    pub settings: FitSettings,

    /// Overwrite an existing run in --out-dir.
    #[arg(long)]
    pub force: bool,
}

pub fn run(args: &FitArgs) -> Result<(), Failure> {
    ensure_out_dir(&args.out_dir, args.force)?;
    let resolved = config::resolve(&args.settings)?;
    let sites = read_input_dataset(&args.data)?;

    let mut manifest = Manifest::new("fit");
    manifest.config_all(resolved.provenance());
    manifest.config("n_sites", sites.len().to_string());
    manifest.input(&args.data)?;

    let extra = [
        ("command", "fit".to_string()),
        ("method", resolved.label.clone()),
        ("data", args.data.display().to_string()),
        ("n_sites", sites.len().to_string()),
    ];

    let splits =
        train_validation_split(&sites, resolved.model.split_ratio, resolved.model.split_seed)?;
    let mut provider =
        InProcessProvider::new(splits, resolved.model.method, resolved.model.penalize_intercept)?;
    match fit(&mut provider, &resolved.model) {
        Ok(result) => {
            let mut written = report::write_result_files(&args.out_dir, &result, &extra)?;
            written.push(report::write_predictions(&args.out_dir, &sites, &result)?);
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
        Err(e) => Err(e.into()),
    }
}
