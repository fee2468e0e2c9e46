pub mod coordinate;
pub mod evaluate;
pub mod fit;
pub mod generate;
pub mod serve_site;

use std::path::Path;

use fedglmm_core::{read_dataset, Error, SiteData};

use crate::fail::Failure;

/// Read a site table, treating a missing or unreadable path as a usage
/// error: the path came straight from the command line.
pub fn read_input_dataset(path: &Path) -> Result<Vec<SiteData>, Failure> {
    match read_dataset(path) {
        Err(Error::Io(e)) => Err(Failure::Usage(format!("{}: {e}", path.display()))),
        other => other.map_err(Failure::from),
    }
}

/// Create the output directory and refuse to reuse one that already
/// holds a run (detected by its manifest) unless `--force` was given.
pub fn ensure_out_dir(dir: &Path, force: bool) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)?;
    if dir.join("manifest.txt").exists() && !force {
        return Err(Failure::Collision(format!(
            "{} already holds a run (manifest.txt present); pass --force to overwrite",
            dir.display()
        )));
    }
    Ok(())
}
