//! Random-intercept logistic model: data containers and the joint log-density.
//!
//! For one site with rows (x_j, y_j), j = 1..n, coefficients β and random
//! intercept μ ~ N(0, τ²), the joint log-density of outcomes and random
//! effect is
//!
//! ```text
//! g(μ; β, τ) = Σ_j [ y_j·log π_j + (1 − y_j)·log(1 − π_j) ] + log φ(μ; τ)
//! π_j = sigmoid(x_j·β + μ)
//! log φ(μ; τ) = −½·log(2π) − log τ − μ²/(2τ²)
//! ```
//!
//! Everything downstream (mode search, Laplace and Gauss–Hermite marginals,
//! exchanged score/Hessian statistics) is assembled from `g` and its partial
//! derivatives, all of which are analytic and computed here in one pass over
//! the rows.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// log(2π), used by the Gaussian prior term.
pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Outcomes and covariates held by one site.
///
/// Invariants enforced at construction: at least one row, at least one
/// covariate column, the first column is the intercept (all ones), all
/// covariates finite, outcomes in {0, 1}.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteData {
    site_id: String,
    n: usize,
    p: usize,
    /// Row-major n×p covariate matrix.
    x: Vec<f64>,
    y: Vec<u8>,
}

impl SiteData {
    /// Build a site from covariate rows and binary outcomes.
    pub fn new(site_id: impl Into<String>, rows: Vec<Vec<f64>>, outcomes: Vec<u8>) -> Result<Self> {
        let site_id = site_id.into();
        let n = rows.len();
        if n == 0 {
            return Err(Error::invalid_data(format!("site {site_id}: no rows")));
        }
        if outcomes.len() != n {
            return Err(Error::invalid_data(format!(
                "site {site_id}: {} outcomes for {n} rows",
                outcomes.len()
            )));
        }
        let p = rows[0].len();
        if p == 0 {
            return Err(Error::invalid_data(format!("site {site_id}: zero covariates")));
        }
        let mut x = Vec::with_capacity(n * p);
        for (j, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err(Error::invalid_data(format!(
                    "site {site_id}: row {j} has {} columns, expected {p}",
                    row.len()
                )));
            }
            if row[0] != 1.0 {
                return Err(Error::invalid_data(format!(
                    "site {site_id}: row {j} intercept column is {}, expected 1",
                    row[0]
                )));
            }
            for (c, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::invalid_data(format!(
                        "site {site_id}: non-finite covariate at row {j}, column {c}"
                    )));
                }
            }
            x.extend_from_slice(row);
        }
        for (j, &v) in outcomes.iter().enumerate() {
            if v > 1 {
                return Err(Error::invalid_data(format!(
                    "site {site_id}: outcome at row {j} is {v}, expected 0 or 1"
                )));
            }
        }
        Ok(SiteData { site_id, n, p, x, y: outcomes })
    }

    pub fn site_id(&self) -> &str {
        &self.site_id
    }

    /// Number of rows n.
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false // n ≥ 1 by construction
    }

    /// Number of covariate columns p.
    pub fn dim(&self) -> usize {
        self.p
    }

    /// Covariate row j as a slice of length p.
    pub fn row(&self, j: usize) -> &[f64] {
        &self.x[j * self.p..(j + 1) * self.p]
    }

    /// Outcome of row j.
    pub fn outcome(&self, j: usize) -> u8 {
        self.y[j]
    }

    /// Covariate rows, reassembled (used by writers and the Python layer).
    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|j| self.row(j).to_vec()).collect()
    }

    pub fn outcomes(&self) -> &[u8] {
        &self.y
    }

    /// Restrict to a subset of row indices (ascending, deduplicated by caller).
    pub(crate) fn subset(&self, indices: &[usize], site_id: String) -> SiteData {
        let mut x = Vec::with_capacity(indices.len() * self.p);
        let mut y = Vec::with_capacity(indices.len());
        for &j in indices {
            x.extend_from_slice(self.row(j));
            y.push(self.y[j]);
        }
        SiteData { site_id, n: indices.len(), p: self.p, x, y }
    }
}

/// Global parameters: fixed-effect coefficients and the random-intercept
/// standard deviation τ > 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Theta {
    pub beta: DVector<f64>,
    pub tau: f64,
}

impl Theta {
    pub fn new(beta: DVector<f64>, tau: f64) -> Result<Self> {
        let theta = Theta { beta, tau };
        theta.validate()?;
        Ok(theta)
    }

    /// Check the container invariants; cheap enough to run at entry points.
    pub fn validate(&self) -> Result<()> {
        if self.beta.is_empty() {
            return Err(Error::invalid_argument("theta: empty coefficient vector"));
        }
        if self.beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid_argument("theta: non-finite coefficient"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid_argument(format!(
                "theta: tau must be positive and finite, got {}",
                self.tau
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }
}

/// Located mode of μ ↦ g(μ; β, τ) for one site.
///
/// `omega_hat` is the curvature scale sqrt(−1/g_μμ(μ̂)); it is always finite
/// and positive because g_μμ ≤ −1/τ² < 0 everywhere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RandomEffectMode {
    pub mu_hat: f64,
    pub omega_hat: f64,
    pub g_at_mode: f64,
}

impl RandomEffectMode {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega_hat > 0.0 && self.omega_hat.is_finite()) {
            return Err(Error::invalid_argument(format!(
                "mode: omega_hat must be positive and finite, got {}",
                self.omega_hat
            )));
        }
        if !self.mu_hat.is_finite() || !self.g_at_mode.is_finite() {
            return Err(Error::invalid_argument("mode: non-finite field"));
        }
        Ok(())
    }
}

/// Logistic function 1/(1 + e^(−x)), branch split on the sign of x so that
/// neither branch ever forms exp of a large positive argument.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log sigmoid(x), stable for large |x|.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn check_eval_args(site: &SiteData, theta: &Theta, mu: f64) -> Result<()> {
    theta.validate()?;
    if theta.beta.len() != site.dim() {
        return Err(Error::invalid_argument(format!(
            "beta has length {}, site {} has p = {}",
            theta.beta.len(),
            site.site_id(),
            site.dim()
        )));
    }
    if !mu.is_finite() {
        return Err(Error::invalid_argument("mu must be finite"));
    }
    Ok(())
}

/// Joint log-density g(μ; β, τ) of one site's outcomes and random intercept.
pub fn g_value(site: &SiteData, theta: &Theta, mu: f64) -> Result<f64> {
    check_eval_args(site, theta, mu)?;
    let p = site.dim();
    let mut acc = 0.0;
    for j in 0..site.len() {
        let row = site.row(j);
        let mut z = mu;
        for c in 0..p {
            z += row[c] * theta.beta[c];
        }
        // y·log π + (1−y)·log(1−π), with log(1−π(z)) = log π(−z).
        acc += if site.outcome(j) == 1 { log_sigmoid(z) } else { log_sigmoid(-z) };
    }
    Ok(acc + log_normal_density(mu, theta.tau))
}

#[inline]
fn log_normal_density(mu: f64, tau: f64) -> f64 {
    -0.5 * LN_2PI - tau.ln() - mu * mu / (2.0 * tau * tau)
}

/// First- and second-order partial derivatives of g, as exchanged with the
/// coordinator and consumed by both marginal approximations.
#[derive(Clone, Debug)]
pub struct GDerivs {
    pub g_mu: f64,
    pub g_mumu: f64,
    pub g_beta: DVector<f64>,
    pub g_betabeta: DMatrix<f64>,
    pub g_mubeta: DVector<f64>,
    pub g_tau: f64,
}

/// Analytic derivative bundle at (μ; β, τ).
///
/// With z_j = x_j·β + μ, s_j = π_j(1 − π_j):
///
/// ```text
/// g_mu       = Σ (y_j − π_j) − μ/τ²
/// g_mumu     = −Σ s_j − 1/τ²                 (strictly negative)
/// g_beta     = Σ x_j (y_j − π_j)
/// g_betabeta = −Σ s_j x_j x_jᵀ
/// g_mubeta   = −Σ s_j x_j
/// g_tau      = μ²/τ³ − 1/τ
/// ```
pub fn g_derivs(site: &SiteData, theta: &Theta, mu: f64) -> Result<GDerivs> {
    let m = g_moments(site, theta, mu)?;
    Ok(GDerivs {
        g_mu: m.d1,
        g_mumu: m.d2,
        g_beta: m.beta,
        g_betabeta: m.beta_beta,
        g_mubeta: m.mu_beta,
        g_tau: m.tau,
    })
}

/// Value and first two μ-derivatives only; the hot path of the inner Newton
/// search for μ̂.
pub(crate) fn g_value_d1_d2(site: &SiteData, theta: &Theta, mu: f64) -> (f64, f64, f64) {
    let p = site.dim();
    let tau = theta.tau;
    let mut value = 0.0;
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    for j in 0..site.len() {
        let row = site.row(j);
        let mut z = mu;
        for c in 0..p {
            z += row[c] * theta.beta[c];
        }
        let pi = sigmoid(z);
        let s = pi * (1.0 - pi);
        value += if site.outcome(j) == 1 { log_sigmoid(z) } else { log_sigmoid(-z) };
        d1 += f64::from(site.outcome(j)) - pi;
        d2 -= s;
    }
    value += log_normal_density(mu, tau);
    d1 -= mu / (tau * tau);
    d2 -= 1.0 / (tau * tau);
    (value, d1, d2)
}

/// Full derivative bundle of g at (μ; β, τ), through fourth order in μ and
/// second order in β, in a single pass over the rows.
///
/// Letting ℓ(z) = y·z − log(1 + e^z) denote the per-row data term so that
/// every mixed partial of the data part of order (a in μ, b in β) equals
/// Σ_j ℓ^(a+b)(z_j) · x_j^⊗b, the per-row derivative chain is
///
/// ```text
/// ℓ'   = y − π       ℓ''  = −s          s = π(1 − π)
/// ℓ''' = −s(1 − 2π)  ℓ'''' = −s[(1 − 2π)² − 2s]
/// ```
///
/// The Gaussian prior contributes only to the pure-μ and μτ entries.
#[derive(Clone, Debug)]
pub(crate) struct GMoments {
    pub value: f64,
    /// ∂g/∂μ … ∂⁴g/∂μ⁴.
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub d4: f64,
    /// ∂g/∂β.
    pub beta: DVector<f64>,
    /// ∂²g/∂μ∂β, ∂³g/∂μ²∂β, ∂⁴g/∂μ³∂β.
    pub mu_beta: DVector<f64>,
    pub mumu_beta: DVector<f64>,
    pub mumumu_beta: DVector<f64>,
    /// ∂²g/∂β∂βᵀ, ∂³g/∂μ∂β∂βᵀ, ∂⁴g/∂μ²∂β∂βᵀ.
    pub beta_beta: DMatrix<f64>,
    pub mu_beta_beta: DMatrix<f64>,
    pub mumu_beta_beta: DMatrix<f64>,
    /// ∂g/∂τ and ∂²g/∂μ∂τ.
    pub tau: f64,
    pub mu_tau: f64,
}

pub(crate) fn g_moments(site: &SiteData, theta: &Theta, mu: f64) -> Result<GMoments> {
    check_eval_args(site, theta, mu)?;
    let p = site.dim();
    let tau = theta.tau;

    let mut value = 0.0;
    let (mut d1, mut d2, mut d3, mut d4) = (0.0, 0.0, 0.0, 0.0);
    let mut beta = DVector::zeros(p);
    let mut mu_beta = DVector::zeros(p);
    let mut mumu_beta = DVector::zeros(p);
    let mut mumumu_beta = DVector::zeros(p);
    let mut beta_beta = DMatrix::zeros(p, p);
    let mut mu_beta_beta = DMatrix::zeros(p, p);
    let mut mumu_beta_beta = DMatrix::zeros(p, p);

    for j in 0..site.len() {
        let row = site.row(j);
        let mut z = mu;
        for c in 0..p {
            z += row[c] * theta.beta[c];
        }
        let pi = sigmoid(z);
        let s = pi * (1.0 - pi);
        let l1 = f64::from(site.outcome(j)) - pi;
        let l2 = -s;
        let one_minus_2pi = 1.0 - 2.0 * pi;
        let l3 = -s * one_minus_2pi;
        let l4 = -s * (one_minus_2pi * one_minus_2pi - 2.0 * s);

        value += if site.outcome(j) == 1 { log_sigmoid(z) } else { log_sigmoid(-z) };
        d1 += l1;
        d2 += l2;
        d3 += l3;
        d4 += l4;
        for a in 0..p {
            let xa = row[a];
            beta[a] += l1 * xa;
            mu_beta[a] += l2 * xa;
            mumu_beta[a] += l3 * xa;
            mumumu_beta[a] += l4 * xa;
            // Upper triangle; mirrored below.
            for b in a..p {
                let xab = xa * row[b];
                beta_beta[(a, b)] += l2 * xab;
                mu_beta_beta[(a, b)] += l3 * xab;
                mumu_beta_beta[(a, b)] += l4 * xab;
            }
        }
    }
    for a in 0..p {
        for b in (a + 1)..p {
            beta_beta[(b, a)] = beta_beta[(a, b)];
            mu_beta_beta[(b, a)] = mu_beta_beta[(a, b)];
            mumu_beta_beta[(b, a)] = mumu_beta_beta[(a, b)];
        }
    }

    value += log_normal_density(mu, tau);
    d1 -= mu / (tau * tau);
    d2 -= 1.0 / (tau * tau);
    let tau3 = tau * tau * tau;

    Ok(GMoments {
        value,
        d1,
        d2,
        d3,
        d4,
        beta,
        mu_beta,
        mumu_beta,
        mumumu_beta,
        beta_beta,
        mu_beta_beta,
        mumu_beta_beta,
        tau: mu * mu / tau3 - 1.0 / tau,
        mu_tau: 2.0 * mu / tau3,
    })
}
