//! Coordinator-side logic: aggregate site summaries, take damped Newton
//! steps in β, update τ on the log scale, sweep the ridge weight λ, and
//! derive Wald inference and information criteria from the final fit.
//!
//! Everything here is transport-agnostic: summaries arrive through the
//! [`SummaryProvider`] trait, implemented both by the in-process engine
//! list and by the TCP coordinator. The two share the per-site code path,
//! so a federated fit reproduces the corresponding single-process fit.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::model::{SiteData, Theta};
use crate::site::{ApproximationMethod, Partition, SiteSummary};

/// Two-sided 95% normal quantile used for Wald confidence intervals.
pub const WALD_Z_95: f64 = 1.959964;

/// A proposed step is accepted when the total log-likelihood does not drop
/// by more than this slack; exact ties at an optimum must not force the
/// damping loop to the cap.
const ACCEPT_SLACK: f64 = 1e-9;

/// Stopping rules and damping schedule for the global optimization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvergenceConfig {
    /// Stop when the max-abs parameter step falls below this.
    pub theta_tol: f64,
    /// After the parameter step converges, the refreshed random-intercept
    /// modes must move less than this.
    pub mu_tol: f64,
    /// Outer iteration budget per penalty weight.
    pub max_outer_iters: usize,
    /// First nonzero ridge added to −H when the undamped solve fails.
    pub damping_init: f64,
    /// Multiplier applied on each escalation.
    pub damping_growth: f64,
    /// Escalating past this damping aborts the step.
    pub damping_cap: f64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig {
            theta_tol: 1e-3,
            mu_tol: 1e-6,
            max_outer_iters: 200,
            damping_init: 1e-8,
            damping_growth: 10.0,
            damping_cap: 1e8,
        }
    }
}

impl ConvergenceConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.theta_tol > 0.0
            && self.mu_tol > 0.0
            && self.max_outer_iters >= 1
            && self.damping_init > 0.0
            && self.damping_growth > 1.0
            && self.damping_cap >= self.damping_init
            && [self.theta_tol, self.mu_tol, self.damping_init, self.damping_cap]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::invalid_argument("convergence config has a non-positive or non-finite field"))
        }
    }
}

/// How the ridge weight is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaSelection {
    /// Fit λ ∈ {0, 1, …, 10} and keep the best validation AIC.
    Sweep,
    /// Single fixed weight, no sweep.
    Fixed(f64),
}

/// Everything that determines one fitting session.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub method: ApproximationMethod,
    pub lambda: LambdaSelection,
    /// Include the intercept in the ridge penalty (off by default).
    pub penalize_intercept: bool,
    /// Fraction of each site's rows assigned to training.
    pub split_ratio: f64,
    /// Seed for the per-site stratified split.
    pub split_seed: u64,
    /// Starting value of the random-intercept scale.
    pub tau_init: f64,
    /// Freeze τ at this value instead of estimating it.
    pub fixed_tau: Option<f64>,
    pub convergence: ConvergenceConfig,
}

impl ModelConfig {
    pub fn new(method: ApproximationMethod) -> Self {
        ModelConfig {
            method,
            lambda: LambdaSelection::Sweep,
            penalize_intercept: false,
            split_ratio: 0.7,
            split_seed: 0,
            tau_init: 1.0,
            fixed_tau: None,
            convergence: ConvergenceConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.convergence.validate()?;
        if !(self.split_ratio > 0.0 && self.split_ratio <= 1.0) {
            return Err(Error::invalid_argument(format!(
                "split_ratio must be in (0, 1], got {}",
                self.split_ratio
            )));
        }
        if !(self.tau_init.is_finite() && self.tau_init > 0.0) {
            return Err(Error::invalid_argument(format!("tau_init must be positive, got {}", self.tau_init)));
        }
        if let Some(t) = self.fixed_tau {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::invalid_argument(format!("fixed_tau must be positive, got {t}")));
            }
        }
        if let LambdaSelection::Fixed(l) = self.lambda {
            if !(l.is_finite() && l >= 0.0) {
                return Err(Error::invalid_argument(format!("fixed lambda must be non-negative, got {l}")));
            }
        }
        if let ApproximationMethod::GaussHermite(k) = self.method {
            if !(1..=crate::quadrature::MAX_RULE_ORDER).contains(&k) {
                return Err(Error::invalid_argument(format!("quadrature order {k} out of range")));
            }
        }
        Ok(())
    }

    /// Number of free parameters for information criteria: the p
    /// coefficients plus τ when it is estimated.
    pub fn parameter_count(&self, p: usize) -> usize {
        p + usize::from(self.fixed_tau.is_none())
    }
}

/// One site's data after the train/validation split.
#[derive(Clone, Debug)]
pub struct SplitSite {
    pub train: SiteData,
    pub validation: Option<SiteData>,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn split_rng(seed: u64, site_id: &str) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a64(site_id.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&0x7370_6c69_745f_7631u64.to_le_bytes());
    ChaCha12Rng::from_seed(key)
}

/// Split every site's rows into train and validation partitions.
///
/// The split is per-site, stratified by outcome with largest-remainder
/// class allocation, and driven by a ChaCha stream keyed on the seed and
/// the site id, so a site's assignment is independent of the roster order.
/// Training row counts are round(ratio·n) clamped to at least one row; a
/// single-row site keeps everything in training. Row order within each
/// partition follows the original data.
pub fn train_validation_split(
    sites: &[SiteData],
    ratio: f64,
    seed: u64,
) -> Result<Vec<SplitSite>> {
    if sites.is_empty() {
        return Err(Error::invalid_argument("train_validation_split: no sites"));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid_argument(format!(
            "train_validation_split: ratio must be in (0, 1], got {ratio}"
        )));
    }
    let mut out = Vec::with_capacity(sites.len());
    for site in sites {
        let n = site.len();
        if n == 1 {
            log::warn!(
                "site {}: single row, keeping it in training with no validation slice",
                site.site_id()
            );
            out.push(SplitSite { train: site.clone(), validation: None });
            continue;
        }
        let train_total = ((ratio * n as f64).round() as usize).clamp(1, n);
        if train_total == n {
            out.push(SplitSite { train: site.clone(), validation: None });
            continue;
        }

        let mut class0: Vec<usize> = Vec::new();
        let mut class1: Vec<usize> = Vec::new();
        for j in 0..n {
            if site.outcome(j) == 1 {
                class1.push(j);
            } else {
                class0.push(j);
            }
        }
        // Largest-remainder allocation of train_total across the classes.
        let n0 = class0.len();
        let n1 = class1.len();
        let mut t0 = train_total * n0 / n;
        let mut t1 = train_total * n1 / n;
        let (r0, r1) = (train_total * n0 % n, train_total * n1 % n);
        let mut leftover = train_total - t0 - t1;
        if leftover > 0 {
            if r0 >= r1 {
                t0 += 1;
            } else {
                t1 += 1;
            }
            leftover -= 1;
        }
        if leftover > 0 {
            if r0 >= r1 {
                t1 += 1;
            } else {
                t0 += 1;
            }
        }
        // A class smaller than its quota hands the excess to the other.
        if t0 > n0 {
            t1 += t0 - n0;
            t0 = n0;
        }
        if t1 > n1 {
            t0 += t1 - n1;
            t1 = n1;
        }
        debug_assert_eq!(t0 + t1, train_total);

        let mut rng = split_rng(seed, site.site_id());
        let mut train_idx: Vec<usize> = Vec::with_capacity(train_total);
        for (class, take) in [(&mut class0, t0), (&mut class1, t1)] {
            let (chosen, _) = class.partial_shuffle(&mut rng, take);
            train_idx.extend_from_slice(chosen);
        }
        train_idx.sort_unstable();
        let mut val_idx: Vec<usize> = Vec::with_capacity(n - train_total);
        let mut cursor = 0;
        for j in 0..n {
            if cursor < train_idx.len() && train_idx[cursor] == j {
                cursor += 1;
            } else {
                val_idx.push(j);
            }
        }
        let train = site.subset(&train_idx, site.site_id().to_string());
        let validation = if val_idx.is_empty() {
            None
        } else {
            Some(site.subset(&val_idx, site.site_id().to_string()))
        };
        out.push(SplitSite { train, validation });
    }
    Ok(out)
}

/// Source of per-round site summaries, local or remote.
///
/// `collect` evaluates every site at the broadcast parameters and returns
/// the summaries in ascending site-id order (the aggregation order is part
/// of the reproducibility contract). The approximation method and penalty
/// shape are fixed when the provider is built.
pub trait SummaryProvider {
    fn site_count(&self) -> usize;
    /// Coefficient dimension shared by all sites.
    fn dim(&self) -> usize;
    /// Site ids in the same order `collect` returns summaries.
    fn site_ids(&self) -> Vec<String>;
    fn collect(
        &mut self,
        theta: &Theta,
        lambda: f64,
        partition: Partition,
    ) -> Result<Vec<SiteSummary>>;
}

struct Aggregate {
    loglik: f64,
    score: DVector<f64>,
    hessian: DMatrix<f64>,
    dtau: f64,
    n: usize,
}

fn aggregate(summaries: &[SiteSummary], p: usize) -> Result<Aggregate> {
    let mut agg = Aggregate {
        loglik: 0.0,
        score: DVector::zeros(p),
        hessian: DMatrix::zeros(p, p),
        dtau: 0.0,
        n: 0,
    };
    for s in summaries {
        agg.loglik += s.loglik;
        agg.score += &s.score;
        agg.hessian += &s.hessian;
        agg.dtau += s.dtau;
        agg.n += s.n_i;
    }
    let finite = agg.loglik.is_finite()
        && agg.dtau.is_finite()
        && agg.score.iter().all(|v| v.is_finite())
        && agg.hessian.iter().all(|v| v.is_finite());
    if !finite {
        return Err(Error::protocol("aggregated summaries contain non-finite values"));
    }
    Ok(agg)
}

fn check_round(
    summaries: &[SiteSummary],
    ids: &[String],
    theta: &Theta,
    lambda: f64,
    k: usize,
    p: usize,
) -> Result<()> {
    if summaries.len() != ids.len() {
        return Err(Error::protocol(format!(
            "expected {} summaries, got {}",
            ids.len(),
            summaries.len()
        )));
    }
    for (s, id) in summaries.iter().zip(ids) {
        if s.p != p {
            return Err(Error::protocol(format!("site {id}: dimension {} != {p}", s.p)));
        }
        if s.beta_echo != theta.beta || s.lambda_echo != lambda || s.k_echo != k {
            return Err(Error::protocol(format!("site {id}: summary echoes stale parameters")));
        }
    }
    Ok(())
}

/// Solve the damped ascent system (δI − H)Δ = S for the coefficient step.
///
/// H is the aggregated Hessian of the log-likelihood (negative definite
/// near the optimum), so δ = 0 reduces to the plain Newton step and a large
/// δ bends Δ toward the gradient S/δ. Fails if the damped matrix is not
/// positive definite or the step is not finite.
pub fn global_newton_step(
    score: &DVector<f64>,
    hessian: &DMatrix<f64>,
    damping: f64,
) -> Result<DVector<f64>> {
    let p = score.len();
    if hessian.nrows() != p || hessian.ncols() != p {
        return Err(Error::invalid_argument(format!(
            "global_newton_step: score has length {p} but hessian is {}x{}",
            hessian.nrows(),
            hessian.ncols()
        )));
    }
    if !(damping >= 0.0 && damping.is_finite()) {
        return Err(Error::invalid_argument(format!("global_newton_step: bad damping {damping}")));
    }
    let mut a = -hessian;
    for j in 0..p {
        a[(j, j)] += damping;
    }
    let chol = Cholesky::new(a).ok_or_else(|| Error::SolveFailed {
        round: 0,
        detail: format!("damped system not positive definite at damping {damping:e}"),
    })?;
    let delta = chol.solve(score);
    if delta.iter().all(|v| v.is_finite()) {
        Ok(delta)
    } else {
        Err(Error::SolveFailed {
            round: 0,
            detail: format!("non-finite step at damping {damping:e}"),
        })
    }
}

fn escalate(damping: f64, conv: &ConvergenceConfig, iteration: u64) -> Result<f64> {
    let next = if damping == 0.0 { conv.damping_init } else { damping * conv.damping_growth };
    if next > conv.damping_cap {
        Err(Error::SolveFailed {
            round: iteration,
            detail: format!(
                "no acceptable step below damping cap {:e}",
                conv.damping_cap
            ),
        })
    } else {
        Ok(next)
    }
}

/// Outcome of [`update_tau`].
#[derive(Debug)]
pub struct TauUpdate {
    pub theta: Theta,
    /// Summaries at the accepted τ; `None` when τ did not move.
    pub summaries: Option<Vec<SiteSummary>>,
}

/// One guarded gradient step on log τ.
///
/// The ascent direction is τ·∂l/∂τ (the chain rule onto the log scale); the
/// step length starts at 1 and halves, re-collecting summaries each trial,
/// until the total log-likelihood stops decreasing. After 20 halvings τ is
/// left unchanged. Steps below the resolution floor are skipped without a
/// round trip.
pub fn update_tau<P: SummaryProvider + ?Sized>(
    provider: &mut P,
    theta: &Theta,
    lambda: f64,
    current_loglik: f64,
    dtau_sum: f64,
    config: &ModelConfig,
) -> Result<TauUpdate> {
    let log_step = theta.tau * dtau_sum;
    if log_step.abs() < 1e-12 * theta.tau.ln().abs().max(1.0) {
        return Ok(TauUpdate { theta: theta.clone(), summaries: None });
    }
    let ids = provider.site_ids();
    let k = config.method.quadrature_order();
    let mut eta = 1.0;
    for _ in 0..=20 {
        let tau_new = (theta.tau.ln() + eta * log_step).exp();
        if tau_new.is_finite() && tau_new > 0.0 && tau_new != theta.tau {
            let cand = Theta::new(theta.beta.clone(), tau_new)?;
            let summaries = provider.collect(&cand, lambda, Partition::Train)?;
            check_round(&summaries, &ids, &cand, lambda, k, theta.beta.len())?;
            let agg = aggregate(&summaries, theta.beta.len())?;
            if agg.loglik >= current_loglik - ACCEPT_SLACK {
                return Ok(TauUpdate { theta: cand, summaries: Some(summaries) });
            }
        }
        eta *= 0.5;
    }
    Ok(TauUpdate { theta: theta.clone(), summaries: None })
}

/// Per-iteration trace of the global optimization.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPoint {
    pub iteration: u64,
    /// Penalized training log-likelihood after the iteration.
    pub loglik: f64,
    /// Max-abs parameter step taken this iteration.
    pub step_inf: f64,
    /// Max-abs shift of the site modes this iteration.
    pub mu_shift: f64,
    /// Damping that produced the accepted Newton step.
    pub damping: f64,
    pub tau: f64,
}

/// Outcome of one penalty weight in the sweep, reported in [`FitResult`].
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaCandidate {
    pub lambda: f64,
    pub converged: bool,
    pub iterations: u64,
    /// Penalized training log-likelihood at the candidate's optimum
    /// (NaN when the candidate failed to converge).
    pub objective: f64,
    /// Validation-partition information criteria (NaN without validation
    /// rows or for failed candidates).
    pub val_aic: f64,
    pub val_bic: f64,
}

/// Final fitted model with inference and selection diagnostics.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub beta: DVector<f64>,
    pub tau: f64,
    /// Selected ridge weight.
    pub lambda: f64,
    /// Unpenalized training log-likelihood at the optimum.
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    /// Unpenalized validation metrics (NaN when no validation rows exist).
    pub val_loglik: f64,
    pub val_aic: f64,
    pub val_bic: f64,
    pub se: DVector<f64>,
    pub z: DVector<f64>,
    pub p_values: DVector<f64>,
    pub ci_lower: DVector<f64>,
    pub ci_upper: DVector<f64>,
    pub n_train: usize,
    pub n_validation: usize,
    /// Outer iterations of the selected penalty weight.
    pub iterations: u64,
    pub converged: bool,
    /// Final random-intercept modes by site id, training partition.
    pub mu_hats: Vec<(String, f64)>,
    pub trajectory: Vec<TrajectoryPoint>,
    /// One entry per penalty weight tried, in sweep order.
    pub candidates: Vec<LambdaCandidate>,
}

struct Candidate {
    lambda: f64,
    theta: Theta,
    objective: f64,
    hessian: DMatrix<f64>,
    mu_hats: Vec<f64>,
    n_train: usize,
    iterations: u64,
    trajectory: Vec<TrajectoryPoint>,
    train_loglik: f64,
    val_loglik: f64,
    val_n: usize,
    sel_aic: f64,
    sel_bic: f64,
    val_aic: f64,
    val_bic: f64,
}

/// Fit the model over the configured penalty weights and select by
/// validation AIC (ties broken by BIC, then by the smaller weight).
///
/// Each weight restarts from β = 0 and the initial τ, alternates damped
/// Newton steps in β with guarded τ updates until the parameter step falls
/// below `theta_tol`, then confirms that freshly re-solved modes moved less
/// than `mu_tol`. Weights that fail to converge are recorded and skipped;
/// if every weight fails the error carries the per-weight diagnostics.
pub fn fit<P: SummaryProvider + ?Sized>(provider: &mut P, config: &ModelConfig) -> Result<FitResult> {
    config.validate()?;
    if provider.site_count() == 0 {
        return Err(Error::invalid_argument("fit: provider has no sites"));
    }
    let p = provider.dim();
    let lambdas: Vec<f64> = match config.lambda {
        LambdaSelection::Fixed(l) => vec![l],
        LambdaSelection::Sweep => (0..=10).map(f64::from).collect(),
    };

    let mut candidates: Vec<Candidate> = Vec::new();
    let mut ledger: Vec<LambdaCandidate> = Vec::new();
    let mut failures: Vec<(f64, u64, f64)> = Vec::new();
    for &lambda in &lambdas {
        match fit_one_lambda(provider, config, lambda, p) {
            Ok(c) => {
                ledger.push(LambdaCandidate {
                    lambda,
                    converged: true,
                    iterations: c.iterations,
                    objective: c.objective,
                    val_aic: c.val_aic,
                    val_bic: c.val_bic,
                });
                candidates.push(c);
            }
            Err(Error::NonConvergence { diagnostics, .. }) => {
                for d in &diagnostics {
                    ledger.push(LambdaCandidate {
                        lambda: d.0,
                        converged: false,
                        iterations: d.1,
                        objective: f64::NAN,
                        val_aic: f64::NAN,
                        val_bic: f64::NAN,
                    });
                }
                failures.extend(diagnostics);
                log::warn!("penalty weight {lambda}: no convergence, candidate skipped");
            }
            // Exhausting the damping schedule fails this weight only.
            Err(Error::SolveFailed { round, detail }) => {
                ledger.push(LambdaCandidate {
                    lambda,
                    converged: false,
                    iterations: round,
                    objective: f64::NAN,
                    val_aic: f64::NAN,
                    val_bic: f64::NAN,
                });
                failures.push((lambda, round, f64::NAN));
                log::warn!("penalty weight {lambda}: {detail}, candidate skipped");
            }
            Err(e) => return Err(e),
        }
    }
    if candidates.is_empty() {
        return Err(Error::NonConvergence {
            summary: format!(
                "no penalty weight converged within {} iterations",
                config.convergence.max_outer_iters
            ),
            diagnostics: failures,
        });
    }

    let mut best = 0;
    for i in 1..candidates.len() {
        let (a, b) = (&candidates[i], &candidates[best]);
        if a.sel_aic < b.sel_aic || (a.sel_aic == b.sel_aic && a.sel_bic < b.sel_bic) {
            best = i;
        }
    }
    let chosen = candidates.swap_remove(best);
    let wald = wald_inference(&chosen.theta.beta, &chosen.hessian)?;
    let k = config.parameter_count(p);
    let (aic, bic) = information_criteria(chosen.train_loglik, k, chosen.n_train);
    let (val_aic, val_bic) = if chosen.val_n > 0 {
        information_criteria(chosen.val_loglik, k, chosen.val_n)
    } else {
        (f64::NAN, f64::NAN)
    };
    let ids = provider.site_ids();
    Ok(FitResult {
        beta: chosen.theta.beta.clone(),
        tau: chosen.theta.tau,
        lambda: chosen.lambda,
        loglik: chosen.train_loglik,
        aic,
        bic,
        val_loglik: if chosen.val_n > 0 { chosen.val_loglik } else { f64::NAN },
        val_aic,
        val_bic,
        se: wald.se,
        z: wald.z,
        p_values: wald.p_values,
        ci_lower: wald.ci_lower,
        ci_upper: wald.ci_upper,
        n_train: chosen.n_train,
        n_validation: chosen.val_n,
        iterations: chosen.iterations,
        converged: true,
        mu_hats: ids.into_iter().zip(chosen.mu_hats).collect(),
        trajectory: chosen.trajectory,
        candidates: ledger,
    })
}

fn fit_one_lambda<P: SummaryProvider + ?Sized>(
    provider: &mut P,
    config: &ModelConfig,
    lambda: f64,
    p: usize,
) -> Result<Candidate> {
    let conv = &config.convergence;
    let ids = provider.site_ids();
    let k = config.method.quadrature_order();
    let mut theta = Theta::new(
        DVector::zeros(p),
        config.fixed_tau.unwrap_or(config.tau_init),
    )?;
    let mut summaries = provider.collect(&theta, lambda, Partition::Train)?;
    check_round(&summaries, &ids, &theta, lambda, k, p)?;
    let mut agg = aggregate(&summaries, p)?;
    if agg.n == 0 {
        return Err(Error::invalid_data("fit: training partition is empty"));
    }

    let mut trajectory = Vec::new();
    let mut iterations: u64 = 0;
    let mut converged = false;
    let mut last_step = f64::INFINITY;
    while iterations < conv.max_outer_iters as u64 {
        iterations += 1;
        let prev_mu: Vec<f64> = summaries.iter().map(|s| s.mu_hat).collect();

        // Damped Newton step in β with monotone-ascent acceptance.
        let mut damping = 0.0;
        let (beta_step, used_damping) = loop {
            let delta = match global_newton_step(&agg.score, &agg.hessian, damping) {
                Ok(d) => d,
                Err(Error::SolveFailed { .. }) => {
                    damping = escalate(damping, conv, iterations)?;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let trial = Theta::new(&theta.beta + &delta, theta.tau)?;
            let trial_summaries = provider.collect(&trial, lambda, Partition::Train)?;
            check_round(&trial_summaries, &ids, &trial, lambda, k, p)?;
            let trial_agg = aggregate(&trial_summaries, p)?;
            if trial_agg.loglik >= agg.loglik - ACCEPT_SLACK {
                theta = trial;
                summaries = trial_summaries;
                agg = trial_agg;
                break (delta.amax(), damping);
            }
            damping = escalate(damping, conv, iterations)?;
        };

        // Guarded τ step at the new β.
        let mut tau_step = 0.0;
        if config.fixed_tau.is_none() {
            let update = update_tau(provider, &theta, lambda, agg.loglik, agg.dtau, config)?;
            tau_step = (update.theta.tau - theta.tau).abs();
            theta = update.theta;
            if let Some(s) = update.summaries {
                agg = aggregate(&s, p)?;
                summaries = s;
            }
        }

        let step_inf = beta_step.max(tau_step);
        last_step = step_inf;
        let mu_shift = summaries
            .iter()
            .zip(&prev_mu)
            .map(|(s, m)| (s.mu_hat - m).abs())
            .fold(0.0, f64::max);
        trajectory.push(TrajectoryPoint {
            iteration: iterations,
            loglik: agg.loglik,
            step_inf,
            mu_shift,
            damping: used_damping,
            tau: theta.tau,
        });

        if step_inf < conv.theta_tol {
            // Parameters have settled; confirm the modes have too.
            let fresh = provider.collect(&theta, lambda, Partition::Train)?;
            check_round(&fresh, &ids, &theta, lambda, k, p)?;
            let refresh_shift = fresh
                .iter()
                .zip(&summaries)
                .map(|(a, b)| (a.mu_hat - b.mu_hat).abs())
                .fold(0.0, f64::max);
            agg = aggregate(&fresh, p)?;
            summaries = fresh;
            if refresh_shift < conv.mu_tol {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            summary: format!(
                "penalty weight {lambda}: step {last_step:.3e} after {iterations} iterations"
            ),
            diagnostics: vec![(lambda, iterations, last_step)],
        });
    }

    // Unpenalized training metrics; the λ = 0 summaries are the ones we
    // already hold when no penalty was applied.
    let train_loglik = if lambda == 0.0 {
        agg.loglik
    } else {
        let plain = provider.collect(&theta, 0.0, Partition::Train)?;
        check_round(&plain, &ids, &theta, 0.0, k, p)?;
        aggregate(&plain, p)?.loglik
    };
    // Unpenalized validation metrics for selection.
    let val = provider.collect(&theta, 0.0, Partition::Validation)?;
    check_round(&val, &ids, &theta, 0.0, k, p)?;
    let val_agg = aggregate(&val, p)?;
    let k_params = config.parameter_count(p);
    let (val_aic, val_bic) = if val_agg.n > 0 {
        information_criteria(val_agg.loglik, k_params, val_agg.n)
    } else {
        (f64::NAN, f64::NAN)
    };
    // Without validation rows the sweep falls back to training AIC.
    let (sel_aic, sel_bic) = if val_agg.n > 0 {
        (val_aic, val_bic)
    } else {
        information_criteria(train_loglik, k_params, agg.n)
    };

    Ok(Candidate {
        lambda,
        mu_hats: summaries.iter().map(|s| s.mu_hat).collect(),
        objective: agg.loglik,
        hessian: agg.hessian.clone(),
        n_train: agg.n,
        iterations,
        trajectory,
        train_loglik,
        val_loglik: val_agg.loglik,
        val_n: val_agg.n,
        sel_aic,
        sel_bic,
        val_aic,
        val_bic,
        theta,
    })
}

/// Wald statistics from the aggregated Hessian at the optimum.
#[derive(Clone, Debug)]
pub struct WaldInference {
    pub se: DVector<f64>,
    pub z: DVector<f64>,
    pub p_values: DVector<f64>,
    pub ci_lower: DVector<f64>,
    pub ci_upper: DVector<f64>,
}

/// Standard errors are the square roots of the diagonal of (−H)⁻¹; the
/// two-sided p-value is erfc(|z|/√2) and the 95% interval is β ∓ z₀.₉₇₅·SE.
pub fn wald_inference(beta: &DVector<f64>, hessian: &DMatrix<f64>) -> Result<WaldInference> {
    let p = beta.len();
    if hessian.nrows() != p || hessian.ncols() != p {
        return Err(Error::invalid_argument(format!(
            "wald_inference: beta has length {p} but hessian is {}x{}",
            hessian.nrows(),
            hessian.ncols()
        )));
    }
    let neg_h = -hessian;
    let chol = Cholesky::new(neg_h).ok_or_else(|| {
        Error::invalid_argument("wald_inference: Hessian is not negative definite at the optimum")
    })?;
    let cov = chol.inverse();
    let mut se = DVector::zeros(p);
    let mut z = DVector::zeros(p);
    let mut pv = DVector::zeros(p);
    let mut lo = DVector::zeros(p);
    let mut hi = DVector::zeros(p);
    for j in 0..p {
        let v = cov[(j, j)];
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::invalid_argument(format!(
                "wald_inference: non-positive variance {v:e} for coefficient {j}"
            )));
        }
        se[j] = v.sqrt();
        z[j] = beta[j] / se[j];
        pv[j] = erfc(z[j].abs() / std::f64::consts::SQRT_2);
        lo[j] = beta[j] - WALD_Z_95 * se[j];
        hi[j] = beta[j] + WALD_Z_95 * se[j];
    }
    Ok(WaldInference { se, z, p_values: pv, ci_lower: lo, ci_upper: hi })
}

/// AIC and BIC for a log-likelihood with k free parameters and n rows.
pub fn information_criteria(loglik: f64, k: usize, n: usize) -> (f64, f64) {
    let k = k as f64;
    let aic = -2.0 * loglik + 2.0 * k;
    let bic = -2.0 * loglik + k * (n as f64).ln();
    (aic, bic)
}
