//! Hermite quadrature rules and the two marginal log-likelihood
//! approximations built on them.
//!
//! The marginal likelihood of one site integrates the joint density over the
//! random intercept, L = ∫ e^{g(μ)} dμ. With μ̂ the mode of g and
//! ω̂ = sqrt(−1/g''(μ̂)):
//!
//! * Laplace: `log L ≈ g(μ̂) + ½·log(2π) + log ω̂`
//! * Adaptive Gauss–Hermite with nodes x_k and weights h_k of the
//!   physicists' rule of order K:
//!   `log L ≈ log(√2·ω̂) + logΣ_k exp[ log h_k + g(μ̂ + √2·ω̂·x_k) + x_k² ]`
//!
//! The √2·ω̂ scaling makes K = 1 (single node at 0, weight √π) collapse
//! exactly to the Laplace expression. Sums over nodes are always formed in
//! log space through [`log_sum_exp`].

use crate::error::{Error, Result};
use crate::model::{g_value, RandomEffectMode, SiteData, Theta};

/// Largest polynomial order accepted by [`hermite_polynomial`]; recurrence
/// accuracy is unvalidated beyond this.
pub const MAX_HERMITE_ORDER: usize = 50;

/// Largest rule order accepted by [`hermite_rule`].
pub const MAX_RULE_ORDER: usize = 20;

/// Physicists' Hermite polynomial H_k(x) by the three-term recurrence
/// H_0 = 1, H_1 = 2x, H_{k+1} = 2x·H_k − 2k·H_{k−1}.
pub fn hermite_polynomial(k: usize, x: f64) -> Result<f64> {
    if k > MAX_HERMITE_ORDER {
        return Err(Error::invalid_argument(format!(
            "hermite_polynomial: order {k} exceeds supported maximum {MAX_HERMITE_ORDER}"
        )));
    }
    if !x.is_finite() {
        return Err(Error::invalid_argument("hermite_polynomial: non-finite x"));
    }
    Ok(hermite_eval(k, x))
}

#[inline]
fn hermite_eval(k: usize, x: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let mut prev = 1.0;
    let mut cur = 2.0 * x;
    for i in 1..k {
        let next = 2.0 * x * cur - 2.0 * (i as f64) * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Gauss–Hermite rule for weight e^{−x²}: nodes, weights, and log-weights.
///
/// Nodes are strictly increasing and exactly antisymmetric (x_k = −x_{K+1−k});
/// paired weights are bit-identical and sum to √π.
#[derive(Clone, Debug, PartialEq)]
pub struct HermiteRule {
    order: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
}

impl HermiteRule {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }
}

/// Build the order-K Gauss–Hermite rule, 1 ≤ K ≤ [`MAX_RULE_ORDER`].
///
/// The K nodes are the roots of H_K, found by safeguarded Newton iteration
/// inside the interlacing brackets formed by the roots of H_{K−1} together
/// with the outer bounds ±sqrt(2K + 1). Weights follow from
///
/// ```text
/// h_k = 2^{K−1} K! √π / (K² [H_{K−1}(x_k)]²)
/// ```
///
/// evaluated in log space so the factorial never overflows.
pub fn hermite_rule(order: usize) -> Result<HermiteRule> {
    if order == 0 || order > MAX_RULE_ORDER {
        return Err(Error::invalid_argument(format!(
            "hermite_rule: order must be in 1..={MAX_RULE_ORDER}, got {order}"
        )));
    }
    // Root ladder: level 1 is exactly [0]; each level k interlaces level k−1.
    let mut roots = vec![0.0f64];
    for k in 2..=order {
        roots = next_level_roots(k, &roots);
    }
    let nodes = roots;

    // log h_k = (K−1)·ln 2 + ln K! + ½·ln π − 2·ln K − 2·ln |H_{K−1}(x_k)|
    let k_f = order as f64;
    let mut log_factorial = 0.0;
    for i in 2..=order {
        log_factorial += (i as f64).ln();
    }
    let log_pi = std::f64::consts::PI.ln();
    let base = (k_f - 1.0) * std::f64::consts::LN_2 + log_factorial + 0.5 * log_pi - 2.0 * k_f.ln();

    let half = order / 2;
    let mut log_weights = vec![0.0f64; order];
    for i in 0..half {
        // Mirror the positive-side weight so symmetric pairs are bit-equal.
        let x = nodes[order - 1 - i];
        let hw = base - 2.0 * hermite_eval(order - 1, x).abs().ln();
        log_weights[order - 1 - i] = hw;
        log_weights[i] = hw;
    }
    if order % 2 == 1 {
        let hw = base - 2.0 * hermite_eval(order - 1, 0.0).abs().ln();
        log_weights[half] = hw;
    }
    let weights: Vec<f64> = log_weights.iter().map(|lw| lw.exp()).collect();

    Ok(HermiteRule { order, nodes, weights, log_weights })
}

/// Roots of H_k given the (sorted, symmetric) roots of H_{k−1}.
fn next_level_roots(k: usize, prev: &[f64]) -> Vec<f64> {
    let bound = ((2 * k + 1) as f64).sqrt();
    let mut out = vec![0.0f64; k];
    let half = k / 2;
    if k % 2 == 1 {
        out[half] = 0.0; // odd order: middle root exact
    }
    // Positive-side brackets, innermost to outermost. For even k the first
    // positive root lies in (0, s_1); every later one in (s_i, s_{i+1}) and
    // the last in (s_last, bound), with s_i the positive roots of H_{k−1}.
    let prev_pos: Vec<f64> = prev.iter().copied().filter(|&r| r > 0.0).collect();
    let mut lo_list = Vec::with_capacity(half);
    let mut hi_list = Vec::with_capacity(half);
    if k % 2 == 0 {
        let first_hi = if prev_pos.is_empty() { bound } else { prev_pos[0] };
        lo_list.push(0.0);
        hi_list.push(first_hi);
    }
    for w in prev_pos.windows(2) {
        lo_list.push(w[0]);
        hi_list.push(w[1]);
    }
    if !prev_pos.is_empty() {
        lo_list.push(*prev_pos.last().unwrap());
        hi_list.push(bound);
    }
    debug_assert_eq!(lo_list.len(), half);
    for (i, (&lo, &hi)) in lo_list.iter().zip(&hi_list).enumerate() {
        let r = newton_in_bracket(k, lo, hi);
        out[k - half + i] = r;
        out[half - 1 - i] = -r;
    }
    // Positive roots ascend with the brackets; mirroring keeps the full list
    // sorted and exactly antisymmetric.
    out
}

/// Safeguarded Newton for the single root of H_k inside (lo, hi): Newton
/// steps that stay in the bracket, bisection otherwise.
fn newton_in_bracket(k: usize, lo: f64, hi: f64) -> f64 {
    let f = |x: f64| hermite_eval(k, x);
    // H_k'(x) = 2k·H_{k−1}(x)
    let df = |x: f64| 2.0 * (k as f64) * hermite_eval(k - 1, x);
    let (mut lo, mut hi) = (lo, hi);
    let mut f_lo = f(lo);
    debug_assert!(f_lo == 0.0 || f(hi) == 0.0 || (f_lo > 0.0) != (f(hi) > 0.0));
    let mut x = 0.5 * (lo + hi);
    for _ in 0..100 {
        let fx = f(x);
        if fx == 0.0 {
            return x;
        }
        if (fx > 0.0) == (f_lo > 0.0) {
            lo = x;
            f_lo = fx;
        } else {
            hi = x;
        }
        let d = df(x);
        let mut next = if d != 0.0 { x - fx / d } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 4.0 * f64::EPSILON * x.abs().max(1.0) {
            return next;
        }
        x = next;
    }
    x
}

/// Numerically stable log Σ exp(v_i) by shifting with the maximum entry.
///
/// Returns −∞ for an empty slice (the empty-sum convention). Entries of −∞
/// are admitted and drop out of the sum; NaN inputs are the caller's bug.
#[inline]
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // Empty, all −∞, or a +∞ entry: the shifted sum is degenerate.
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Laplace approximation to the marginal log-likelihood of `site` given the
/// located mode: g(μ̂) + ½·log(2π) + log ω̂.
pub fn log_marginal_la(site: &SiteData, theta: &Theta, mode: &RandomEffectMode) -> Result<f64> {
    theta.validate()?;
    if theta.beta.len() != site.dim() {
        return Err(Error::invalid_argument("log_marginal_la: beta/site dimension mismatch"));
    }
    mode.validate()?;
    Ok(log_marginal_la_from_mode(mode))
}

/// Laplace expression from the mode bundle alone; usable with any scalar
/// log-integrand, not just the site model.
pub fn log_marginal_la_from_mode(mode: &RandomEffectMode) -> f64 {
    mode.g_at_mode + 0.5 * crate::model::LN_2PI + mode.omega_hat.ln()
}

/// Adaptive Gauss–Hermite approximation to the marginal log-likelihood of
/// `site`, recentred and rescaled by the mode bundle.
pub fn log_marginal_gh(
    site: &SiteData,
    theta: &Theta,
    mode: &RandomEffectMode,
    rule: &HermiteRule,
) -> Result<f64> {
    theta.validate()?;
    if theta.beta.len() != site.dim() {
        return Err(Error::invalid_argument("log_marginal_gh: beta/site dimension mismatch"));
    }
    log_marginal_gh_of(|mu| g_value(site, theta, mu).expect("validated above"), mode, rule)
}

/// Gauss–Hermite marginal for an arbitrary scalar log-integrand g:
/// log(√2·ω̂) + logΣ_k exp[log h_k + g(μ̂ + √2·ω̂·x_k) + x_k²].
pub fn log_marginal_gh_of(
    g: impl Fn(f64) -> f64,
    mode: &RandomEffectMode,
    rule: &HermiteRule,
) -> Result<f64> {
    mode.validate()?;
    let scale = std::f64::consts::SQRT_2 * mode.omega_hat;
    let mut terms = Vec::with_capacity(rule.order());
    for (x, lw) in rule.nodes().iter().zip(rule.log_weights()) {
        terms.push(lw + g(mode.mu_hat + scale * x) + x * x);
    }
    Ok(scale.ln() + log_sum_exp(&terms))
}
