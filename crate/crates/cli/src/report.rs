//! The result bundle written by `fit` and `coordinate` and read back by
//! `evaluate`: a coefficient table, a key/value summary, the convergence
//! trajectory, the penalty sweep ledger, and (for `fit`, which holds the
//! rows) per-row predictions.
//!
//! Floats are rendered with 17 significant digits so the files parse
//! back to the exact in-memory values and re-runs are byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fedglmm_core::{sigmoid, FitResult, SiteData};

use crate::fail::Failure;

pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_float(field: &str, path: &Path, lineno: usize) -> Result<f64, Failure> {
    field.parse::<f64>().map_err(|_| {
        Failure::Usage(format!("{}:{}: '{field}' is not a number", path.display(), lineno))
    })
}

/// Write the bundle for a successful fit; returns every path written.
/// `extra` rows lead the summary table, so command-specific provenance
/// (command name, method tag, data path) sits before the shared fields.
pub fn write_result_files(
    dir: &Path,
    result: &FitResult,
    extra: &[(&str, String)],
) -> Result<Vec<PathBuf>, Failure> {
    let mut written = Vec::new();

    let p = result.beta.len();
    let mut table = String::from("term,coef,std_err,z,p_value,ci_low,ci_high\n");
    for j in 0..p {
        let _ = writeln!(
            table,
            "x{},{},{},{},{},{},{}",
            j + 1,
            fmt_float(result.beta[j]),
            fmt_float(result.se[j]),
            fmt_float(result.z[j]),
            fmt_float(result.p_values[j]),
            fmt_float(result.ci_lower[j]),
            fmt_float(result.ci_upper[j]),
        );
    }
    let result_path = dir.join("result.csv");
    fs::write(&result_path, table)?;
    written.push(result_path);

    let mut summary = String::from("key,value\n");
    for (k, v) in extra {
        let _ = writeln!(summary, "{k},{v}");
    }
    let scalars: [(&str, String); 12] = [
        ("lambda", fmt_float(result.lambda)),
        ("tau", fmt_float(result.tau)),
        ("loglik", fmt_float(result.loglik)),
        ("aic", fmt_float(result.aic)),
        ("bic", fmt_float(result.bic)),
        ("val_loglik", fmt_float(result.val_loglik)),
        ("val_aic", fmt_float(result.val_aic)),
        ("val_bic", fmt_float(result.val_bic)),
        ("n_train", result.n_train.to_string()),
        ("n_validation", result.n_validation.to_string()),
        ("iterations", result.iterations.to_string()),
        ("converged", result.converged.to_string()),
    ];
    for (k, v) in scalars {
        let _ = writeln!(summary, "{k},{v}");
    }
    for (site_id, mu) in &result.mu_hats {
        let _ = writeln!(summary, "mu_hat.{site_id},{}", fmt_float(*mu));
    }
    let summary_path = dir.join("summary.csv");
    fs::write(&summary_path, summary)?;
    written.push(summary_path);

    let mut trajectory = String::from("iteration,loglik,step_inf,mu_shift,damping,tau\n");
    for point in &result.trajectory {
        let _ = writeln!(
            trajectory,
            "{},{},{},{},{},{}",
            point.iteration,
            fmt_float(point.loglik),
            fmt_float(point.step_inf),
            fmt_float(point.mu_shift),
            fmt_float(point.damping),
            fmt_float(point.tau),
        );
    }
    let trajectory_path = dir.join("trajectory.csv");
    fs::write(&trajectory_path, trajectory)?;
    written.push(trajectory_path);

    let mut candidates = String::from("lambda,converged,iterations,objective,val_aic,val_bic\n");
    for c in &result.candidates {
        let _ = writeln!(
            candidates,
            "{},{},{},{},{},{}",
            fmt_float(c.lambda),
            c.converged,
            c.iterations,
            fmt_float(c.objective),
            fmt_float(c.val_aic),
            fmt_float(c.val_bic),
        );
    }
    let candidates_path = dir.join("candidates.csv");
    fs::write(&candidates_path, candidates)?;
    written.push(candidates_path);

    Ok(written)
}

/// Score every row of `sites` under the fitted model: the linear
/// predictor plus the site's fitted random intercept, squashed to a
/// probability. Row order follows the input file.
pub fn write_predictions(
    dir: &Path,
    sites: &[SiteData],
    result: &FitResult,
) -> Result<PathBuf, Failure> {
    let mut text = String::from("site_id,row,outcome,score\n");
    for site in sites {
        let mu = result
            .mu_hats
            .iter()
            .find(|(id, _)| id == site.site_id())
            .map(|(_, mu)| *mu)
            .ok_or_else(|| {
                Failure::Other(format!("no fitted intercept for site {}", site.site_id()))
            })?;
        for j in 0..site.len() {
            let eta: f64 =
                site.row(j).iter().zip(result.beta.iter()).map(|(x, b)| x * b).sum::<f64>() + mu;
            let _ = writeln!(
                text,
                "{},{},{},{}",
                site.site_id(),
                j,
                site.outcome(j),
                fmt_float(sigmoid(eta)),
            );
        }
    }
    let path = dir.join("predictions.csv");
    fs::write(&path, text)?;
    Ok(path)
}

/// Write the non-convergence bundle: a summary marking the failure plus
/// one diagnostics row per attempted penalty weight.
pub fn write_diagnostics(
    dir: &Path,
    extra: &[(&str, String)],
    summary_line: &str,
    diagnostics: &[(f64, u64, f64)],
) -> Result<Vec<PathBuf>, Failure> {
    let mut summary = String::from("key,value\n");
    for (k, v) in extra {
        let _ = writeln!(summary, "{k},{v}");
    }
    let _ = writeln!(summary, "converged,false");
    let _ = writeln!(summary, "failure,{}", summary_line.replace(',', ";"));
    let summary_path = dir.join("summary.csv");
    fs::write(&summary_path, summary)?;

    let mut table = String::from("lambda,iterations,last_step\n");
    for (lambda, iterations, last_step) in diagnostics {
        let _ = writeln!(
            table,
            "{},{iterations},{}",
            fmt_float(*lambda),
            fmt_float(*last_step),
        );
    }
    let diag_path = dir.join("diagnostics.csv");
    fs::write(&diag_path, table)?;
    Ok(vec![summary_path, diag_path])
}

/// The slice of a bundle that `evaluate` consumes.
#[derive(Clone, Debug)]
pub struct LoadedResult {
    pub dir: PathBuf,
    pub method: String,
    /// Data path recorded by `fit`; absent for coordinator bundles.
    pub data: Option<String>,
    pub converged: bool,
    pub beta: Vec<f64>,
    pub p_values: Vec<f64>,
}

fn summary_pairs(path: &Path) -> Result<Vec<(String, String)>, Failure> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "key,value")) => {}
        _ => {
            return Err(Failure::Usage(format!(
                "{}: expected a key,value summary table",
                path.display()
            )))
        }
    }
    let mut pairs = Vec::new();
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once(',') else {
            return Err(Failure::Usage(format!(
                "{}:{}: expected key,value",
                path.display(),
                lineno + 1
            )));
        };
        pairs.push((k.to_string(), v.to_string()));
    }
    Ok(pairs)
}

/// Load one result bundle directory.
pub fn read_bundle(dir: &Path) -> Result<LoadedResult, Failure> {
    let pairs = summary_pairs(&dir.join("summary.csv"))?;
    let get = |key: &str| pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone());
    let method = get("method")
        .ok_or_else(|| Failure::Usage(format!("{}: summary lacks a method", dir.display())))?;
    let converged = get("converged").as_deref() == Some("true");

    let result_path = dir.join("result.csv");
    let text = fs::read_to_string(&result_path)
        .map_err(|e| Failure::Usage(format!("{}: {e}", result_path.display())))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.starts_with("term,coef,std_err") => {}
        _ => {
            return Err(Failure::Usage(format!(
                "{}: not a coefficient table",
                result_path.display()
            )))
        }
    }
    let mut beta = Vec::new();
    let mut p_values = Vec::new();
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Failure::Usage(format!(
                "{}:{}: expected 7 fields, got {}",
                result_path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        beta.push(parse_float(fields[1], &result_path, lineno + 1)?);
        p_values.push(parse_float(fields[4], &result_path, lineno + 1)?);
    }
    Ok(LoadedResult { dir: dir.to_path_buf(), method, data: get("data"), converged, beta, p_values })
}

/// Read a bundle's predictions when present: (scores, outcomes).
pub fn read_predictions(dir: &Path) -> Result<Option<(Vec<f64>, Vec<u8>)>, Failure> {
    let path = dir.join("predictions.csv");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "site_id,row,outcome,score")) => {}
        _ => {
            return Err(Failure::Usage(format!(
                "{}: not a predictions table",
                path.display()
            )))
        }
    }
    let mut scores = Vec::new();
    let mut outcomes = Vec::new();
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Failure::Usage(format!(
                "{}:{}: expected 4 fields, got {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        outcomes.push(match fields[2] {
            "0" => 0u8,
            "1" => 1,
            other => {
                return Err(Failure::Usage(format!(
                    "{}:{}: outcome '{other}' must be 0 or 1",
                    path.display(),
                    lineno + 1
                )))
            }
        });
        scores.push(parse_float(fields[3], &path, lineno + 1)?);
    }
    Ok(Some((scores, outcomes)))
}
