//! `fedglmm evaluate`: score result bundles against generation truth.
//!
//! Bundles are grouped by their method tag, so a directory of Laplace
//! runs and quadrature runs comes out as side-by-side rows in every
//! table. All proportions carry 95% Wilson bounds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fedglmm_core::evaluation::ConfusionCounts;
use fedglmm_core::{
    coefficient_error, empirical_power, read_truth, roc_auc, significance_confusion,
    wilson_interval,
};

use crate::commands::ensure_out_dir;
use crate::fail::Failure;
use crate::manifest::Manifest;
use crate::report::{self, LoadedResult};

#[derive(Debug, clap::Args)]
pub struct EvaluateArgs {
    /// Glob matching result bundles (bundle directories or any file
    /// inside them).
    #[arg(long)]
    pub results: String,

    /// Directory holding the `<data stem>.truth.csv` sidecars.
    #[arg(long)]
    pub truth_dir: PathBuf,

    /// Directory receiving the metric tables and manifest.
    #[arg(long)]
    pub out_dir: PathBuf,

    /// Significance level for the detection confusion tables.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,

    /// Overwrite an existing run in --out-dir.
    #[arg(long)]
    pub force: bool,
}

fn fmt(v: f64) -> String {
    format!("{v:.9}")
}

/// Render `value,low,high` for a proportion of `successes` out of `n`,
/// or three empty fields when the metric is undefined.
fn bounded_cells(value: Option<f64>, successes: u64, n: u64) -> Result<String, Failure> {
    match value {
        None => Ok(",,".to_string()),
        Some(v) => {
            let (low, high) = wilson_interval(successes, n, 0.95)?;
            Ok(format!("{},{},{}", fmt(v), fmt(low), fmt(high)))
        }
    }
}

fn significance_row(method: &str, term: &str, c: &ConfusionCounts) -> Result<String, Failure> {
    let precision =
        bounded_cells(c.precision(), c.true_positives, c.true_positives + c.false_positives)?;
    let recall =
        bounded_cells(c.recall(), c.true_positives, c.true_positives + c.false_negatives)?;
    let tnr = bounded_cells(c.tnr(), c.true_negatives, c.true_negatives + c.false_positives)?;
    let accuracy = bounded_cells(
        (c.total() > 0).then(|| c.accuracy()),
        c.true_positives + c.true_negatives,
        c.total(),
    )?;
    Ok(format!(
        "{method},{term},{},{},{},{},{precision},{recall},{tnr},{accuracy}\n",
        c.true_positives, c.false_positives, c.true_negatives, c.false_negatives,
    ))
}

/// Find the truth sidecar for one bundle and check it against the fit.
fn truth_path_for(bundle: &LoadedResult, truth_dir: &Path) -> Result<PathBuf, Failure> {
    let Some(data) = &bundle.data else {
        return Err(Failure::Usage(format!(
            "{}: bundle records no data path, cannot pair a truth sidecar",
            bundle.dir.display()
        )));
    };
    let stem = Path::new(data).file_stem().map(|s| s.to_string_lossy().into_owned());
    let Some(stem) = stem else {
        return Err(Failure::Usage(format!(
            "{}: data path '{data}' has no file stem",
            bundle.dir.display()
        )));
    };
    let path = truth_dir.join(format!("{stem}.truth.csv"));
    if !path.exists() {
        return Err(Failure::Usage(format!(
            "{}: no matching truth at {}",
            bundle.dir.display(),
            path.display()
        )));
    }
    Ok(path)
}

pub fn run(args: &EvaluateArgs) -> Result<(), Failure> {
    ensure_out_dir(&args.out_dir, args.force)?;

    // Collect candidate bundle directories from the glob, deduplicated
    // and sorted so every pass over them is deterministic.
    let mut dirs: BTreeSet<PathBuf> = BTreeSet::new();
    let entries = glob::glob(&args.results)
        .map_err(|e| Failure::Usage(format!("bad glob '{}': {e}", args.results)))?;
    for entry in entries {
        let path = entry.map_err(|e| Failure::Other(e.to_string()))?;
        let dir = if path.is_dir() { path } else { path.parent().map(Path::to_path_buf).unwrap_or(path) };
        dirs.insert(dir);
    }

    let mut bundles = Vec::new();
    for dir in &dirs {
        if !dir.join("summary.csv").exists() {
            continue;
        }
        if !dir.join("result.csv").exists() {
            log::warn!("{}: no result table (non-converged run?), skipping", dir.display());
            continue;
        }
        let bundle = report::read_bundle(dir)?;
        if !bundle.converged {
            log::warn!("{}: fit did not converge, skipping", dir.display());
            continue;
        }
        bundles.push(bundle);
    }
    if bundles.is_empty() {
        return Err(Failure::Usage(format!("no result bundles match '{}'", args.results)));
    }

    // Every bundle must score against the same true coefficients;
    // different datasets of one setting share them by construction.
    let mut true_beta: Option<Vec<f64>> = None;
    let mut truth_files: BTreeSet<PathBuf> = BTreeSet::new();
    for bundle in &bundles {
        let path = truth_path_for(bundle, &args.truth_dir)?;
        let truth = read_truth(&path)?;
        if truth.beta.len() != bundle.beta.len() {
            return Err(Failure::Usage(format!(
                "{}: truth has {} coefficients, fit has {}",
                path.display(),
                truth.beta.len(),
                bundle.beta.len()
            )));
        }
        match &true_beta {
            None => true_beta = Some(truth.beta),
            Some(reference) => {
                if *reference != truth.beta {
                    return Err(Failure::Usage(format!(
                        "{}: true coefficients differ from the other bundles'",
                        path.display()
                    )));
                }
            }
        }
        truth_files.insert(path);
    }
    let true_beta = true_beta.expect("at least one bundle was loaded");

    let mut by_method: BTreeMap<String, Vec<&LoadedResult>> = BTreeMap::new();
    for bundle in &bundles {
        by_method.entry(bundle.method.clone()).or_default().push(bundle);
    }

    let alpha_grid: Vec<f64> = (1..=20).map(|i| f64::from(i) * 0.01).collect();
    let mut significance = String::from(
        "method,term,tp,fp,tn,fn,precision,precision_low,precision_high,\
         recall,recall_low,recall_high,tnr,tnr_low,tnr_high,\
         accuracy,accuracy_low,accuracy_high\n",
    );
    let mut power = String::from(
        "method,term,alpha,rejections,datasets,power,power_low,power_high\n",
    );
    let mut errors = String::from("method,term,min,q1,median,q3,max,mean,mean_abs\n");
    let mut roc = String::from(
        "method,n_rows,auc,best_threshold,precision,precision_low,precision_high,\
         recall,recall_low,recall_high,f1,f1_low,f1_high\n",
    );
    let mut roc_curve = String::from("method,threshold,fpr,tpr\n");

    for (method, group) in &by_method {
        let p_sets: Vec<Vec<f64>> = group.iter().map(|b| b.p_values.clone()).collect();
        let beta_sets: Vec<Vec<f64>> = group.iter().map(|b| b.beta.clone()).collect();

        let report = significance_confusion(&p_sets, &true_beta, args.alpha)?;
        for (j, counts) in report.per_coefficient.iter().enumerate() {
            significance.push_str(&significance_row(method, &format!("x{}", j + 1), counts)?);
        }
        significance.push_str(&significance_row(method, "overall", &report.overall)?);

        if p_sets.len() >= 2 {
            let curves = empirical_power(&p_sets, &true_beta, &alpha_grid)?;
            let datasets = p_sets.len() as u64;
            for curve in &curves.curves {
                let j = curve.coefficient;
                for (level, fraction) in curves.alpha_grid.iter().zip(&curve.power) {
                    let rejections =
                        p_sets.iter().filter(|set| set[j] < *level).count() as u64;
                    let (low, high) = wilson_interval(rejections, datasets, 0.95)?;
                    let _ = writeln!(
                        power,
                        "{method},x{},{},{rejections},{datasets},{},{},{}",
                        j + 1,
                        fmt(*level),
                        fmt(*fraction),
                        fmt(low),
                        fmt(high),
                    );
                }
            }
        } else {
            log::warn!("method {method}: one dataset only, power table skipped");
        }

        for summary in coefficient_error(&beta_sets, &true_beta)? {
            let _ = writeln!(
                errors,
                "{method},x{},{},{},{},{},{},{},{}",
                summary.coefficient + 1,
                fmt(summary.min),
                fmt(summary.q1),
                fmt(summary.median),
                fmt(summary.q3),
                fmt(summary.max),
                fmt(summary.mean),
                fmt(summary.mean_abs),
            );
        }

        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for bundle in group {
            if let Some((s, l)) = report::read_predictions(&bundle.dir)? {
                scores.extend(s);
                labels.extend(l);
            }
        }
        if scores.is_empty() {
            log::warn!("method {method}: no predictions found, ROC skipped");
        } else {
            let r = roc_auc(&scores, &labels)?;
            let _ = writeln!(
                roc,
                "{method},{},{},{},{},{},{},{},{},{},{},{},{}",
                scores.len(),
                fmt(r.auc),
                fmt(r.best_threshold),
                fmt(r.precision.value),
                fmt(r.precision.low),
                fmt(r.precision.high),
                fmt(r.recall.value),
                fmt(r.recall.low),
                fmt(r.recall.high),
                fmt(r.f1.value),
                fmt(r.f1.low),
                fmt(r.f1.high),
            );
            for ((threshold, fpr), tpr) in r.thresholds.iter().zip(&r.fpr).zip(&r.tpr) {
                let _ = writeln!(roc_curve, "{method},{},{},{}", fmt(*threshold), fmt(*fpr), fmt(*tpr));
            }
        }
    }

    let mut manifest = Manifest::new("evaluate");
    manifest.config("results_glob", args.results.clone());
    manifest.config("truth_dir", args.truth_dir.display().to_string());
    manifest.config("alpha", format!("{:.16e}", args.alpha));
    manifest.config("n_bundles", bundles.len().to_string());
    for bundle in &bundles {
        manifest.input(&bundle.dir.join("result.csv"))?;
    }
    for path in &truth_files {
        manifest.input(path)?;
    }

    let outputs = [
        ("significance.csv", significance),
        ("power.csv", power),
        ("errors.csv", errors),
        ("roc.csv", roc),
        ("roc_curve.csv", roc_curve),
    ];
    for (name, text) in outputs {
        let path = args.out_dir.join(name);
        std::fs::write(&path, text)?;
        manifest.output(&path)?;
    }
    manifest.write(&args.out_dir)?;
    log::info!(
        "evaluated {} bundle(s) across {} method(s) into {}",
        bundles.len(),
        by_method.len(),
        args.out_dir.display()
    );
    Ok(())
}
