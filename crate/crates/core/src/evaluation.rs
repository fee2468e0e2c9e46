//! Metrics for scoring fitted models against known ground truth.
//!
//! Covers significance-detection confusion counts, empirical test power
//! across a grid of levels, per-coefficient error distributions, ROC/AUC
//! with an operating threshold, and Wilson score intervals.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Pooled detection counts for one coefficient (or overall).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_positives: u64,
    pub false_positives: u64,
    pub true_negatives: u64,
    pub false_negatives: u64,
}

impl ConfusionCounts {
    fn add(&mut self, truth: bool, predicted: bool) {
        match (truth, predicted) {
            (true, true) => self.true_positives += 1,
            (true, false) => self.false_negatives += 1,
            (false, true) => self.false_positives += 1,
            (false, false) => self.true_negatives += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.true_positives + self.false_positives + self.true_negatives + self.false_negatives
    }

    /// tp / (tp + fp); `None` when nothing was predicted positive, so the
    /// undefined cell can be excluded from averages instead of polluting
    /// them with a 0/0 artifact.
    pub fn precision(&self) -> Option<f64> {
        ratio(self.true_positives, self.true_positives + self.false_positives)
    }

    /// tp / (tp + fn); `None` when no positives exist in the truth.
    pub fn recall(&self) -> Option<f64> {
        ratio(self.true_positives, self.true_positives + self.false_negatives)
    }

    /// tn / (tn + fp), the true negative rate; `None` when no negatives
    /// exist in the truth.
    pub fn tnr(&self) -> Option<f64> {
        ratio(self.true_negatives, self.true_negatives + self.false_positives)
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return f64::NAN;
        }
        (self.true_positives + self.true_negatives) as f64 / self.total() as f64
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Detection quality of "p-value below α" against "true coefficient is
/// nonzero", pooled across datasets.
#[derive(Clone, Debug, PartialEq)]
pub struct SignificanceReport {
    pub alpha: f64,
    /// One counts cell per coefficient, pooled over datasets.
    pub per_coefficient: Vec<ConfusionCounts>,
    /// All coefficients and datasets pooled together.
    pub overall: ConfusionCounts,
}

fn check_sets(sets: &[Vec<f64>], reference_dim: usize, what: &str) -> Result<()> {
    if sets.is_empty() {
        return Err(Error::invalid_argument(format!("no {what} provided")));
    }
    for (d, set) in sets.iter().enumerate() {
        if set.len() != reference_dim {
            return Err(Error::invalid_argument(format!(
                "{what} set {d} has {} entries, expected {reference_dim}",
                set.len()
            )));
        }
    }
    Ok(())
}

/// Score significance calls at level `alpha` across repeated fits of the
/// same truth. Coefficient `j` is truly significant iff `true_beta[j] != 0`;
/// a fit calls it significant iff its p-value is below `alpha`.
pub fn significance_confusion(
    p_value_sets: &[Vec<f64>],
    true_beta: &[f64],
    alpha: f64,
) -> Result<SignificanceReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid_argument(format!("alpha must be in (0,1), got {alpha}")));
    }
    check_sets(p_value_sets, true_beta.len(), "p-value")?;
    let mut per_coefficient = vec![ConfusionCounts::default(); true_beta.len()];
    let mut overall = ConfusionCounts::default();
    for set in p_value_sets {
        for (j, &p) in set.iter().enumerate() {
            let truth = true_beta[j] != 0.0;
            let predicted = p < alpha;
            per_coefficient[j].add(truth, predicted);
            overall.add(truth, predicted);
        }
    }
    Ok(SignificanceReport { alpha, per_coefficient, overall })
}

/// Rejection rate of one truly-nonzero coefficient across a level grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerCurve {
    /// Coefficient index into `true_beta`.
    pub coefficient: usize,
    /// Fraction of datasets with p below the level, aligned with the grid.
    pub power: Vec<f64>,
}

/// Power curves over `alpha_grid` for every truly-nonzero coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerCurves {
    pub alpha_grid: Vec<f64>,
    pub curves: Vec<PowerCurve>,
}

/// Empirical power per coefficient and level: the fraction of datasets
/// whose p-value falls below each grid level. Truly-zero coefficients
/// carry no power curve (rejections there are size, not power).
pub fn empirical_power(
    p_value_sets: &[Vec<f64>],
    true_beta: &[f64],
    alpha_grid: &[f64],
) -> Result<PowerCurves> {
    if p_value_sets.len() < 2 {
        return Err(Error::invalid_argument(
            "power needs at least 2 datasets".to_string(),
        ));
    }
    check_sets(p_value_sets, true_beta.len(), "p-value")?;
    if alpha_grid.is_empty() {
        return Err(Error::invalid_argument("empty level grid".to_string()));
    }
    if alpha_grid.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
        return Err(Error::invalid_argument(format!(
            "levels must lie in (0,1], got {alpha_grid:?}"
        )));
    }
    let datasets = p_value_sets.len() as f64;
    let curves = true_beta
        .iter()
        .enumerate()
        .filter(|(_, b)| **b != 0.0)
        .map(|(j, _)| PowerCurve {
            coefficient: j,
            power: alpha_grid
                .iter()
                .map(|&alpha| {
                    let hits = p_value_sets.iter().filter(|set| set[j] < alpha).count();
                    hits as f64 / datasets
                })
                .collect(),
        })
        .collect();
    Ok(PowerCurves { alpha_grid: alpha_grid.to_vec(), curves })
}

/// A point estimate with its 95% Wilson score bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounded {
    pub value: f64,
    pub low: f64,
    pub high: f64,
}

/// ROC sweep over the unique scores, descending.
#[derive(Clone, Debug, PartialEq)]
pub struct RocReport {
    /// Unique score thresholds in descending sweep order; a row is
    /// classified positive when its score is at or above the threshold.
    pub thresholds: Vec<f64>,
    /// True positive rate at each threshold; non-decreasing.
    pub tpr: Vec<f64>,
    /// False positive rate at each threshold; non-decreasing.
    pub fpr: Vec<f64>,
    /// Trapezoid area under the (fpr, tpr) polyline from (0,0) to (1,1).
    pub auc: f64,
    /// Threshold maximizing Youden's J = tpr - fpr (largest such
    /// threshold on ties).
    pub best_threshold: f64,
    pub precision: Bounded,
    pub recall: Bounded,
    pub f1: Bounded,
}

/// Build the ROC curve of `scores` against binary `labels`.
///
/// Tied scores flip together: each unique score contributes one sweep
/// point, so the curve is invariant to the input order of ties.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<RocReport> {
    if scores.len() != labels.len() {
        return Err(Error::invalid_argument(format!(
            "{} scores against {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::invalid_argument("empty score vector".to_string()));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::invalid_data(format!("non-finite score {bad}")));
    }
    if let Some(bad) = labels.iter().find(|l| **l > 1) {
        return Err(Error::invalid_data(format!("label {bad} is not binary")));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::invalid_data(
            "labels contain a single class; the curve is undefined".to_string(),
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (pos, neg) = (positives as f64, negatives as f64);
    let mut thresholds = Vec::new();
    let mut tpr = vec![];
    let mut fpr = vec![];
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut auc = 0.0;
    let (mut prev_tpr, mut prev_fpr) = (0.0f64, 0.0f64);
    let mut best = (f64::NEG_INFINITY, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        // Consume the whole tie group before emitting a sweep point.
        while i < order.len() && scores[order[i]] == threshold {
            match labels[order[i]] {
                1 => tp += 1,
                _ => fp += 1,
            }
            i += 1;
        }
        let t = tp as f64 / pos;
        let f = fp as f64 / neg;
        auc += 0.5 * (f - prev_fpr) * (t + prev_tpr);
        let j = t - f;
        if j > best.0 {
            best = (j, thresholds.len());
        }
        thresholds.push(threshold);
        tpr.push(t);
        fpr.push(f);
        (prev_tpr, prev_fpr) = (t, f);
    }

    // Re-derive the counts at the winning threshold for the operating point.
    let best_threshold = thresholds[best.1];
    let tp = order
        .iter()
        .filter(|&&r| scores[r] >= best_threshold && labels[r] == 1)
        .count() as u64;
    let fp = order
        .iter()
        .filter(|&&r| scores[r] >= best_threshold && labels[r] == 0)
        .count() as u64;
    let fn_count = positives as u64 - tp;
    let bounded = |num: u64, den: u64| -> Result<Bounded> {
        let (low, high) = wilson_interval(num, den, 0.95)?;
        Ok(Bounded { value: num as f64 / den as f64, low, high })
    };
    Ok(RocReport {
        auc,
        best_threshold,
        precision: bounded(tp, tp + fp)?,
        recall: bounded(tp, tp + fn_count)?,
        // f1 = 2tp / (2tp + fp + fn) is itself a proportion of counts, so
        // the same interval construction applies.
        f1: bounded(2 * tp, 2 * tp + fp + fn_count)?,
        thresholds,
        tpr,
        fpr,
    })
}

/// Wilson score interval for a binomial proportion.
///
/// Boundary cases are pinned: zero successes give a lower bound of
/// exactly 0, and all successes give an upper bound of exactly 1.
pub fn wilson_interval(successes: u64, n: u64, conf: f64) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::invalid_argument("interval needs n >= 1".to_string()));
    }
    if successes > n {
        return Err(Error::invalid_argument(format!("{successes} successes out of {n}")));
    }
    if !(conf > 0.0 && conf < 1.0) {
        return Err(Error::invalid_argument(format!("confidence must be in (0,1), got {conf}")));
    }
    let z = Normal::new(0.0, 1.0)
        .expect("unit normal parameters are valid")
        .inverse_cdf(0.5 + conf / 2.0);
    let n = n as f64;
    let p_hat = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p_hat + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p_hat * (1.0 - p_hat) / n + z2 / (4.0 * n * n)).sqrt();
    let low = if p_hat == 0.0 { 0.0 } else { (center - half).max(0.0) };
    let high = if p_hat == 1.0 { 1.0 } else { (center + half).min(1.0) };
    Ok((low, high))
}

/// Box-plot statistics of `estimate - truth` for one coefficient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorSummary {
    pub coefficient: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    /// Mean of |estimate - truth|, the scale used to compare methods.
    pub mean_abs: f64,
}

/// Linear-interpolation quantile on sorted data (R's default, type 7).
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    if lo + 1 == sorted.len() {
        return sorted[lo];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

/// Distribution of per-coefficient estimation errors across datasets.
pub fn coefficient_error(beta_hats: &[Vec<f64>], true_beta: &[f64]) -> Result<Vec<ErrorSummary>> {
    check_sets(beta_hats, true_beta.len(), "coefficient")?;
    let mut out = Vec::with_capacity(true_beta.len());
    for (j, &truth) in true_beta.iter().enumerate() {
        let mut errs: Vec<f64> = beta_hats.iter().map(|b| b[j] - truth).collect();
        if errs.iter().any(|e| !e.is_finite()) {
            return Err(Error::invalid_data(format!(
                "non-finite estimate for coefficient {j}"
            )));
        }
        errs.sort_by(f64::total_cmp);
        let n = errs.len() as f64;
        out.push(ErrorSummary {
            coefficient: j,
            min: errs[0],
            q1: quantile_sorted(&errs, 0.25),
            median: quantile_sorted(&errs, 0.5),
            q3: quantile_sorted(&errs, 0.75),
            max: errs[errs.len() - 1],
            mean: errs.iter().sum::<f64>() / n,
            mean_abs: errs.iter().map(|e| e.abs()).sum::<f64>() / n,
        });
    }
    Ok(out)
}
