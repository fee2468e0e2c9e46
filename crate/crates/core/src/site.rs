//! Per-site computation: the inner mode search for the random intercept and
//! the summary statistics exchanged with the coordinator.
//!
//! A site never ships rows. One round of the protocol asks it to evaluate,
//! at the broadcast (β, τ) and regularization weight λ, the penalized
//! marginal log-likelihood
//!
//! ```text
//! l(β, τ) = log L(β, τ) − λ·‖β‖²      (intercept excluded by default)
//! ```
//!
//! together with its analytic gradient and Hessian in β and the scalar
//! τ-gradient. The marginal is the adaptive Gauss–Hermite approximation of
//! the [`quadrature`](crate::quadrature) module; Laplace is the K = 1 rule,
//! so a single assembly covers both methods.
//!
//! Because μ̂(β) and ω̂(β) are re-solved whenever β moves, the exchanged
//! derivatives include the implicit-function terms: with all quantities
//! evaluated at the mode,
//!
//! ```text
//! ∂μ̂/∂β = −g_μβ / g_μμ
//! ∂ω̂/∂β = −½·c^(−3/2)·∂c/∂β,   c = −g_μμ(μ̂),
//! ```
//!
//! and second-order analogues obtained by differentiating the stationarity
//! condition g_μ(μ̂(β), β) = 0 once more.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{g_moments, g_value_d1_d2, RandomEffectMode, SiteData, Theta};
use crate::quadrature::{hermite_rule, log_sum_exp, HermiteRule};

/// Which marginal approximation a site runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ApproximationMethod {
    Laplace,
    /// Adaptive Gauss–Hermite with the given node count (1..=20).
    GaussHermite(usize),
}

impl ApproximationMethod {
    /// Node count of the underlying rule; Laplace is the one-node rule.
    pub fn quadrature_order(&self) -> usize {
        match self {
            ApproximationMethod::Laplace => 1,
            ApproximationMethod::GaussHermite(k) => *k,
        }
    }

    /// Short stable label used in configs and on the wire.
    pub fn label(&self) -> &'static str {
        match self {
            ApproximationMethod::Laplace => "la",
            ApproximationMethod::GaussHermite(_) => "gh",
        }
    }
}

/// Summary statistics one site sends back for one round.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteSummary {
    /// Coefficient dimension, echoed for consistency checks.
    pub p: usize,
    /// Rows that entered this summary (0 for an empty validation slice).
    pub n_i: usize,
    /// Penalized marginal log-likelihood at the broadcast parameters.
    pub loglik: f64,
    /// ∂loglik/∂β.
    pub score: DVector<f64>,
    /// ∂²loglik/∂β², symmetric.
    pub hessian: DMatrix<f64>,
    /// Mode of the random intercept at the broadcast parameters.
    pub mu_hat: f64,
    /// ∂loglik/∂τ.
    pub dtau: f64,
    /// Parameters this summary was computed at, echoed back.
    pub beta_echo: DVector<f64>,
    pub lambda_echo: f64,
    /// Quadrature order used (1 for Laplace).
    pub k_echo: usize,
}

impl SiteSummary {
    /// Summary of an empty row set: zero contribution to every aggregate.
    pub fn empty(theta: &Theta, lambda: f64, k: usize) -> SiteSummary {
        let p = theta.beta.len();
        SiteSummary {
            p,
            n_i: 0,
            loglik: 0.0,
            score: DVector::zeros(p),
            hessian: DMatrix::zeros(p, p),
            mu_hat: 0.0,
            dtau: 0.0,
            beta_echo: theta.beta.clone(),
            lambda_echo: lambda,
            k_echo: k,
        }
    }

    fn check_finite(&self, site_id: &str) -> Result<()> {
        let ok = self.loglik.is_finite()
            && self.mu_hat.is_finite()
            && self.dtau.is_finite()
            && self.score.iter().all(|v| v.is_finite())
            && self.hessian.iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::NonFiniteSummary {
                site_id: site_id.to_string(),
                detail: format!("mu_hat = {}, loglik = {}", self.mu_hat, self.loglik),
            })
        }
    }
}

/// Inner Newton tolerance on |g_mu(μ̂)|, scaled by max(1, n).
const MODE_TOL: f64 = 1e-12;
/// Documented upper bound the returned mode always satisfies.
const MODE_TOL_BOUND: f64 = 1e-10;
const MODE_MAX_NEWTON: usize = 100;
const MODE_MAX_BISECT: usize = 200;

/// Locate the mode μ̂ of μ ↦ g(μ; β, τ) for one site.
///
/// Newton iteration from `start` (or 0) with step-halving whenever a step
/// fails to increase g; g is strictly concave in μ (g_μμ ≤ −1/τ²), so the
/// mode exists and is unique. If Newton has not converged after 100
/// iterations, falls back to bisection on a bracket grown from
/// [−50τ, 50τ]. The result satisfies |g_mu(μ̂)| < 1e−10·max(1, n).
pub fn fit_random_effect(
    site: &SiteData,
    theta: &Theta,
    start: Option<f64>,
) -> Result<RandomEffectMode> {
    theta.validate()?;
    if theta.beta.len() != site.dim() {
        return Err(Error::invalid_argument(format!(
            "fit_random_effect: beta has length {}, site {} has p = {}",
            theta.beta.len(),
            site.site_id(),
            site.dim()
        )));
    }
    let n_scale = (site.len() as f64).max(1.0);
    let tol = MODE_TOL * n_scale;

    let mut mu = start.filter(|s| s.is_finite()).unwrap_or(0.0);
    let (mut g, mut d1, mut d2) = g_value_d1_d2(site, theta, mu);
    let mut converged = d1.abs() <= tol;
    if !converged {
        for _ in 0..MODE_MAX_NEWTON {
            let step = -d1 / d2; // d2 < 0 always
            let mut alpha = 1.0;
            let (mut cand, mut gc, mut d1c, mut d2c);
            loop {
                cand = mu + alpha * step;
                (gc, d1c, d2c) = g_value_d1_d2(site, theta, cand);
                if gc >= g || alpha < 1e-12 {
                    break;
                }
                alpha *= 0.5;
            }
            let moved = (cand - mu).abs();
            mu = cand;
            (g, d1, d2) = (gc, d1c, d2c);
            if d1.abs() <= tol {
                converged = true;
                break;
            }
            if moved <= f64::EPSILON * mu.abs().max(1.0) {
                // Step resolution exhausted; |g_mu| is as small as it gets.
                converged = d1.abs() <= MODE_TOL_BOUND * n_scale;
                break;
            }
        }
    }
    if !converged {
        let (bmu, bg, bd1, bd2) = bisect_mode(site, theta, tol)?;
        mu = bmu;
        (g, d1, d2) = (bg, bd1, bd2);
        if d1.abs() > MODE_TOL_BOUND * n_scale {
            return Err(Error::ModeFinding {
                site_id: site.site_id().to_string(),
                detail: format!("residual |g_mu| = {:.3e} at mu = {:.6e} after bisection", d1.abs(), mu),
            });
        }
    }
    let omega_hat = (-1.0 / d2).sqrt();
    let mode = RandomEffectMode { mu_hat: mu, omega_hat, g_at_mode: g };
    mode.validate().map_err(|_| Error::ModeFinding {
        site_id: site.site_id().to_string(),
        detail: format!("non-finite mode bundle: mu = {mu}, omega = {omega_hat}, g = {g}"),
    })?;
    Ok(mode)
}

/// Bisection fallback: g_mu is strictly decreasing with opposite signs at
/// ±∞, so a sign-changing bracket always exists.
fn bisect_mode(site: &SiteData, theta: &Theta, tol: f64) -> Result<(f64, f64, f64, f64)> {
    let mut lo = -50.0 * theta.tau;
    let mut hi = 50.0 * theta.tau;
    for _ in 0..64 {
        let d_lo = g_value_d1_d2(site, theta, lo).1;
        let d_hi = g_value_d1_d2(site, theta, hi).1;
        if d_lo > 0.0 && d_hi < 0.0 {
            break;
        }
        if d_lo <= 0.0 {
            lo *= 2.0;
        }
        if d_hi >= 0.0 {
            hi *= 2.0;
        }
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::ModeFinding {
                site_id: site.site_id().to_string(),
                detail: "bracket expansion overflowed".to_string(),
            });
        }
    }
    let mut best = (0.0, f64::NEG_INFINITY, f64::INFINITY, -1.0);
    for _ in 0..MODE_MAX_BISECT {
        let mid = 0.5 * (lo + hi);
        let (g, d1, d2) = g_value_d1_d2(site, theta, mid);
        if best.2.abs() > d1.abs() {
            best = (mid, g, d1, d2);
        }
        if d1.abs() <= tol || hi - lo <= f64::EPSILON * mid.abs().max(1.0) {
            break;
        }
        if d1 > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best)
}

/// Options for [`site_summary`] beyond the parameter vector itself.
#[derive(Clone, Copy, Debug)]
pub struct SummaryOptions {
    /// Ridge weight λ ≥ 0 on the coefficient norm.
    pub lambda: f64,
    /// Include the intercept (column 0) in the penalty. Default: excluded.
    pub penalize_intercept: bool,
    /// Warm start for the inner mode search.
    pub warm_start: Option<f64>,
}

impl Default for SummaryOptions {
    fn default() -> Self {
        SummaryOptions { lambda: 0.0, penalize_intercept: false, warm_start: None }
    }
}

/// Compute one site's round summary at the broadcast parameters.
///
/// The score and Hessian are total derivatives of the penalized marginal
/// log-likelihood: the chain rule runs through the re-solved mode, so the
/// statistics agree with finite differences of the evaluated objective in
/// which μ̂ is re-fit at every perturbed β.
pub fn site_summary(
    site: &SiteData,
    theta: &Theta,
    method: ApproximationMethod,
    opts: &SummaryOptions,
) -> Result<SiteSummary> {
    if !(opts.lambda.is_finite() && opts.lambda >= 0.0) {
        return Err(Error::invalid_argument(format!(
            "site_summary: lambda must be finite and non-negative, got {}",
            opts.lambda
        )));
    }
    let rule = hermite_rule(method.quadrature_order())?;
    let mode = fit_random_effect(site, theta, opts.warm_start)?;
    let summary = assemble_summary(site, theta, &mode, &rule, opts)?;
    summary.check_finite(site.site_id())?;
    Ok(summary)
}

fn assemble_summary(
    site: &SiteData,
    theta: &Theta,
    mode: &RandomEffectMode,
    rule: &HermiteRule,
    opts: &SummaryOptions,
) -> Result<SiteSummary> {
    let p = site.dim();
    let tau = theta.tau;
    let k = rule.order();

    // Moments of g at the mode drive every implicit-function term.
    let at_mode = g_moments(site, theta, mode.mu_hat)?;
    let d2 = at_mode.d2;
    let c = -d2;

    // ∂μ̂/∂β and ∂²μ̂/∂β² from differentiating g_mu(μ̂(β), β) = 0.
    let dmu: DVector<f64> = -&at_mode.mu_beta / d2;
    let dmu_outer = &dmu * dmu.transpose();
    let d2mu: DMatrix<f64> = -(&dmu_outer * at_mode.d3
        + &at_mode.mumu_beta * dmu.transpose()
        + &dmu * at_mode.mumu_beta.transpose()
        + &at_mode.mu_beta_beta)
        / d2;

    // c(β) = −g_mumu(μ̂(β), β): gradient and Hessian, then ω̂ = c^(−1/2).
    let dc: DVector<f64> = -(&dmu * at_mode.d3 + &at_mode.mumu_beta);
    let d2c: DMatrix<f64> = -(&dmu_outer * at_mode.d4
        + &at_mode.mumumu_beta * dmu.transpose()
        + &dmu * at_mode.mumumu_beta.transpose()
        + &at_mode.mumu_beta_beta
        + &d2mu * at_mode.d3);
    let c_m32 = c.powf(-1.5);
    let domega: DVector<f64> = -0.5 * c_m32 * &dc;
    let d2omega: DMatrix<f64> =
        0.75 * c.powf(-2.5) * (&dc * dc.transpose()) - 0.5 * c_m32 * &d2c;

    // τ-direction analogues.
    let dmu_tau = -at_mode.mu_tau / d2;
    let dc_tau = -(at_mode.d3 * dmu_tau + 2.0 / (tau * tau * tau));
    let domega_tau = -0.5 * c_m32 * dc_tau;

    let scale = std::f64::consts::SQRT_2 * mode.omega_hat;

    // Per-node log-terms and their β/τ derivatives.
    let mut a = Vec::with_capacity(k);
    let mut da: Vec<DVector<f64>> = Vec::with_capacity(k);
    let mut d2a: Vec<DMatrix<f64>> = Vec::with_capacity(k);
    let mut da_tau = Vec::with_capacity(k);
    for (&x, &lw) in rule.nodes().iter().zip(rule.log_weights()) {
        let at_node;
        let node_ref = if x == 0.0 {
            &at_mode
        } else {
            at_node = g_moments(site, theta, mode.mu_hat + scale * x)?;
            &at_node
        };
        a.push(lw + node_ref.value + x * x);

        let dm: DVector<f64> = &dmu + &domega * (std::f64::consts::SQRT_2 * x);
        let d2m: DMatrix<f64> = &d2mu + &d2omega * (std::f64::consts::SQRT_2 * x);
        let da_k: DVector<f64> = &dm * node_ref.d1 + &node_ref.beta;
        let d2a_k: DMatrix<f64> = (&dm * dm.transpose()) * node_ref.d2
            + &node_ref.mu_beta * dm.transpose()
            + &dm * node_ref.mu_beta.transpose()
            + &node_ref.beta_beta
            + &d2m * node_ref.d1;
        let dm_tau = dmu_tau + std::f64::consts::SQRT_2 * x * domega_tau;
        da_tau.push(node_ref.d1 * dm_tau + node_ref.tau);
        da.push(da_k);
        d2a.push(d2a_k);
    }

    // Softmax weights over the shifted node terms.
    let lse = log_sum_exp(&a);
    let a_max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = a.iter().map(|v| (v - a_max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    let w: Vec<f64> = exps.iter().map(|e| e / denom).collect();

    let log_omega_term = scale.ln();
    let inv_omega = 1.0 / mode.omega_hat;

    let mut sbar = DVector::zeros(p);
    for (wk, dak) in w.iter().zip(&da) {
        sbar += dak * *wk;
    }
    let mut curvature = DMatrix::zeros(p, p);
    for ((wk, dak), d2ak) in w.iter().zip(&da).zip(&d2a) {
        curvature += (d2ak + dak * dak.transpose()) * *wk;
    }
    let mut dtau = domega_tau * inv_omega;
    for (wk, dtk) in w.iter().zip(&da_tau) {
        dtau += wk * dtk;
    }

    let dlogomega: DVector<f64> = &domega * inv_omega;
    let mut score: DVector<f64> = &dlogomega + &sbar;
    let mut hessian: DMatrix<f64> = &d2omega * inv_omega - &dlogomega * dlogomega.transpose()
        + curvature
        - &sbar * sbar.transpose();

    // The assembly is symmetric analytically but not bitwise (addition
    // order differs across the diagonal); enforce exact symmetry.
    for i in 0..p {
        for j in 0..i {
            let avg = 0.5 * (hessian[(i, j)] + hessian[(j, i)]);
            hessian[(i, j)] = avg;
            hessian[(j, i)] = avg;
        }
    }

    // Ridge penalty −λ‖β‖²: −2λβ on the score, −2λI on the Hessian.
    let mut penalty = 0.0;
    let first = usize::from(!opts.penalize_intercept);
    for j in first..p {
        let b = theta.beta[j];
        penalty += b * b;
        score[j] -= 2.0 * opts.lambda * b;
        hessian[(j, j)] -= 2.0 * opts.lambda;
    }

    Ok(SiteSummary {
        p,
        n_i: site.len(),
        loglik: log_omega_term + lse - opts.lambda * penalty,
        score,
        hessian,
        mu_hat: mode.mu_hat,
        dtau,
        beta_echo: theta.beta.clone(),
        lambda_echo: opts.lambda,
        k_echo: k,
    })
}

/// One site's stateful engine for a fitting session: holds the training and
/// validation slices and warm-starts the inner mode search per partition.
#[derive(Clone, Debug)]
pub struct SiteEngine {
    train: SiteData,
    validation: Option<SiteData>,
    warm_train: Option<f64>,
    warm_validation: Option<f64>,
}

/// Which data slice a round is evaluated on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    Train,
    Validation,
}

impl Partition {
    pub fn label(&self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Validation => "validation",
        }
    }
}

impl SiteEngine {
    pub fn new(train: SiteData, validation: Option<SiteData>) -> Self {
        SiteEngine { train, validation, warm_train: None, warm_validation: None }
    }

    pub fn site_id(&self) -> &str {
        self.train.site_id()
    }

    pub fn dim(&self) -> usize {
        self.train.dim()
    }

    pub fn rows(&self, partition: Partition) -> usize {
        match partition {
            Partition::Train => self.train.len(),
            Partition::Validation => self.validation.as_ref().map_or(0, SiteData::len),
        }
    }

    /// Total rows across both partitions.
    pub fn total_rows(&self) -> usize {
        self.rows(Partition::Train) + self.rows(Partition::Validation)
    }

    /// Round summary on the requested partition; an absent validation slice
    /// contributes the zero summary.
    pub fn summary(
        &mut self,
        theta: &Theta,
        method: ApproximationMethod,
        lambda: f64,
        penalize_intercept: bool,
        partition: Partition,
    ) -> Result<SiteSummary> {
        let (data, warm) = match partition {
            Partition::Train => (Some(&self.train), &mut self.warm_train),
            Partition::Validation => (self.validation.as_ref(), &mut self.warm_validation),
        };
        let Some(data) = data else {
            return Ok(SiteSummary::empty(theta, lambda, method.quadrature_order()));
        };
        let opts =
            SummaryOptions { lambda, penalize_intercept, warm_start: *warm };
        let summary = site_summary(data, theta, method, &opts)?;
        *warm = Some(summary.mu_hat);
        Ok(summary)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;

    fn demo_site() -> SiteData {
        SiteData::new(
            "demo",
            vec![
                vec![1.0, 0.4],
                vec![1.0, -1.1],
                vec![1.0, 0.9],
                vec![1.0, 0.0],
                vec![1.0, -0.3],
            ],
            vec![1, 0, 1, 0, 1],
        )
        .unwrap()
    }

    #[test]
    fn mode_satisfies_stationarity() {
        let site = demo_site();
        let theta = Theta::new(DVector::from_vec(vec![0.3, -0.4]), 1.2).unwrap();
        let mode = fit_random_effect(&site, &theta, None).unwrap();
        let (_, d1, d2) = g_value_d1_d2(&site, &theta, mode.mu_hat);
        assert!(d1.abs() < 1e-10 * 5.0);
        assert_abs_diff_eq!(mode.omega_hat, (-1.0 / d2).sqrt(), epsilon = 1e-15);
        // Warm start from the answer converges immediately to the same mode.
        let warm = fit_random_effect(&site, &theta, Some(mode.mu_hat)).unwrap();
        assert_abs_diff_eq!(warm.mu_hat, mode.mu_hat, epsilon = 1e-10);
    }

    #[test]
    fn mode_extreme_tau_still_converges() {
        let site = demo_site();
        for tau in [1e-3, 1.0, 1e6] {
            let theta = Theta::new(DVector::from_vec(vec![0.0, 0.0]), tau).unwrap();
            let mode = fit_random_effect(&site, &theta, None).unwrap();
            let (_, d1, _) = g_value_d1_d2(&site, &theta, mode.mu_hat);
            assert!(d1.abs() < 1e-10 * 5.0, "tau = {tau}: residual {d1:.3e}");
        }
    }

    #[test]
    fn laplace_summary_equals_gh1() {
        let site = demo_site();
        let theta = Theta::new(DVector::from_vec(vec![0.1, 0.2]), 0.9).unwrap();
        let opts = SummaryOptions { lambda: 1.5, ..Default::default() };
        let la = site_summary(&site, &theta, ApproximationMethod::Laplace, &opts).unwrap();
        let gh1 = site_summary(&site, &theta, ApproximationMethod::GaussHermite(1), &opts).unwrap();
        assert_eq!(la.loglik, gh1.loglik);
        assert_eq!(la.score, gh1.score);
        assert_eq!(la.hessian, gh1.hessian);
        assert_eq!(la.dtau, gh1.dtau);
        assert_eq!(la.k_echo, 1);
    }

    #[test]
    fn penalty_shifts_score_and_hessian() {
        let site = demo_site();
        let theta = Theta::new(DVector::from_vec(vec![0.7, -0.6]), 1.0).unwrap();
        let base = site_summary(
            &site,
            &theta,
            ApproximationMethod::GaussHermite(4),
            &SummaryOptions::default(),
        )
        .unwrap();
        let pen = site_summary(
            &site,
            &theta,
            ApproximationMethod::GaussHermite(4),
            &SummaryOptions { lambda: 5.0, ..Default::default() },
        )
        .unwrap();
        // Intercept untouched, slope shifted by −2λβ, diagonal by −2λ.
        assert_abs_diff_eq!(pen.score[0], base.score[0], epsilon = 1e-12);
        assert_abs_diff_eq!(pen.score[1], base.score[1] - 2.0 * 5.0 * (-0.6), epsilon = 1e-12);
        assert_abs_diff_eq!(pen.hessian[(1, 1)], base.hessian[(1, 1)] - 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pen.hessian[(0, 0)], base.hessian[(0, 0)], epsilon = 1e-12);
        assert_abs_diff_eq!(pen.loglik, base.loglik - 5.0 * 0.36, epsilon = 1e-12);

        let pen_all = site_summary(
            &site,
            &theta,
            ApproximationMethod::GaussHermite(4),
            &SummaryOptions { lambda: 5.0, penalize_intercept: true, warm_start: None },
        )
        .unwrap();
        assert_abs_diff_eq!(pen_all.score[0], base.score[0] - 2.0 * 5.0 * 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(pen_all.loglik, base.loglik - 5.0 * (0.49 + 0.36), epsilon = 1e-12);
    }

    #[test]
    fn summary_rejects_bad_lambda() {
        let site = demo_site();
        let theta = Theta::new(DVector::from_vec(vec![0.0, 0.0]), 1.0).unwrap();
        let opts = SummaryOptions { lambda: -1.0, ..Default::default() };
        assert!(site_summary(&site, &theta, ApproximationMethod::Laplace, &opts).is_err());
        let opts = SummaryOptions { lambda: f64::NAN, ..Default::default() };
        assert!(site_summary(&site, &theta, ApproximationMethod::Laplace, &opts).is_err());
        assert!(site_summary(
            &site,
            &theta,
            ApproximationMethod::GaussHermite(0),
            &SummaryOptions::default()
        )
        .is_err());
    }

    #[test]
    fn engine_empty_validation_contributes_zero() {
        let mut engine = SiteEngine::new(demo_site(), None);
        let theta = Theta::new(DVector::from_vec(vec![0.0, 0.0]), 1.0).unwrap();
        let s = engine
            .summary(&theta, ApproximationMethod::Laplace, 0.0, false, Partition::Validation)
            .unwrap();
        assert_eq!(s.n_i, 0);
        assert_eq!(s.loglik, 0.0);
        assert!(s.score.iter().all(|&v| v == 0.0));
    }
}
