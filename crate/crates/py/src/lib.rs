//! Python bindings for the random-intercept logistic fitting engine.
//!
//! Site data crosses the boundary as plain `(site_id, rows, outcomes)`
//! triples of lists; results come back as small frozen classes. The
//! numeric work runs in the Rust crate, so a fit from Python matches a
//! fit of the same rows and configuration from the command line bit for
//! bit.

use fedglmm_core::coordinator::{LambdaSelection, ModelConfig};
use fedglmm_core::datagen::GenSetting;
use fedglmm_core::evaluation::{Bounded, RocReport};
use fedglmm_core::federation::InProcessProvider;
use fedglmm_core::site::SummaryOptions;
use fedglmm_core::{quadrature, ApproximationMethod, Error, FitResult, SiteData, Theta};
use nalgebra::DVector;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

/// A site as Python hands it over: id, covariate rows, 0/1 outcomes.
type SiteTriple = (String, Vec<Vec<f64>>, Vec<u8>);

fn err_to_py(e: Error) -> PyErr {
    match &e {
        Error::InvalidData(_) | Error::InvalidArgument(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn build_sites(sites: Vec<SiteTriple>) -> PyResult<Vec<SiteData>> {
    sites
        .into_iter()
        .map(|(id, rows, outcomes)| SiteData::new(id, rows, outcomes).map_err(err_to_py))
        .collect()
}

fn build_theta(beta: Vec<f64>, tau: f64) -> PyResult<Theta> {
    Theta::new(DVector::from_vec(beta), tau).map_err(err_to_py)
}

fn parse_method(method: &str, gh_order: usize) -> PyResult<ApproximationMethod> {
    match method {
        "la" => Ok(ApproximationMethod::Laplace),
        "gh" => Ok(ApproximationMethod::GaussHermite(gh_order)),
        other => {
            Err(PyValueError::new_err(format!("method must be 'la' or 'gh', got '{other}'")))
        }
    }
}

/// Logistic function 1/(1 + exp(-x)).
#[pyfunction]
fn sigmoid(x: f64) -> f64 {
    fedglmm_core::sigmoid(x)
}

/// log(sum(exp(values))) without overflow; -inf for an empty list.
#[pyfunction]
fn log_sum_exp(values: Vec<f64>) -> f64 {
    quadrature::log_sum_exp(&values)
}

/// Gauss-Hermite nodes and weights for exp(-x^2) of the given order.
#[pyfunction]
fn hermite_rule(order: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let rule = quadrature::hermite_rule(order).map_err(err_to_py)?;
    Ok((rule.nodes().to_vec(), rule.weights().to_vec()))
}

/// Wilson score interval (low, high) for `successes` out of `n`.
#[pyfunction]
#[pyo3(signature = (successes, n, conf = 0.95))]
fn wilson_interval(successes: u64, n: u64, conf: f64) -> PyResult<(f64, f64)> {
    fedglmm_core::wilson_interval(successes, n, conf).map_err(err_to_py)
}

/// (AIC, BIC) from a log-likelihood, parameter count, and sample size.
#[pyfunction]
fn information_criteria(loglik: f64, n_params: usize, n_obs: usize) -> (f64, f64) {
    fedglmm_core::information_criteria(loglik, n_params, n_obs)
}

/// Mode of one site's random-intercept profile at fixed coefficients.
///
/// Returns `(mu_hat, omega_hat)`: the maximizer of the joint log-density
/// over the intercept, and the curvature scale sqrt(-1/g''(mu_hat)).
#[pyfunction]
#[pyo3(signature = (rows, outcomes, beta, tau, start = None))]
fn random_effect_mode(
    rows: Vec<Vec<f64>>,
    outcomes: Vec<u8>,
    beta: Vec<f64>,
    tau: f64,
    start: Option<f64>,
) -> PyResult<(f64, f64)> {
    let site = SiteData::new("1", rows, outcomes).map_err(err_to_py)?;
    let theta = build_theta(beta, tau)?;
    let mode = fedglmm_core::fit_random_effect(&site, &theta, start).map_err(err_to_py)?;
    Ok((mode.mu_hat, mode.omega_hat))
}

/// Approximate marginal log-likelihood of one site, the random intercept
/// integrated out: Laplace when `gh_order` is None, otherwise adaptive
/// Gauss-Hermite of that order.
#[pyfunction]
#[pyo3(signature = (rows, outcomes, beta, tau, gh_order = None))]
fn site_log_marginal(
    rows: Vec<Vec<f64>>,
    outcomes: Vec<u8>,
    beta: Vec<f64>,
    tau: f64,
    gh_order: Option<usize>,
) -> PyResult<f64> {
    let site = SiteData::new("1", rows, outcomes).map_err(err_to_py)?;
    let theta = build_theta(beta, tau)?;
    let mode = fedglmm_core::fit_random_effect(&site, &theta, None).map_err(err_to_py)?;
    match gh_order {
        None => quadrature::log_marginal_la(&site, &theta, &mode),
        Some(k) => {
            let rule = quadrature::hermite_rule(k).map_err(err_to_py)?;
            quadrature::log_marginal_gh(&site, &theta, &mode, &rule)
        }
    }
    .map_err(err_to_py)
}

/// One fitting round's exchange for a single site: the tuple
/// `(loglik, score, hessian, mu_hat, dtau)` of the penalized marginal
/// log-likelihood and its derivatives at the given parameters.
#[pyfunction]
#[pyo3(signature = (rows, outcomes, beta, tau, gh_order = None, ridge = 0.0, penalize_intercept = false))]
#[allow(clippy::type_complexity, clippy::too_many_arguments)]
fn site_summary(
    rows: Vec<Vec<f64>>,
    outcomes: Vec<u8>,
    beta: Vec<f64>,
    tau: f64,
    gh_order: Option<usize>,
    ridge: f64,
    penalize_intercept: bool,
) -> PyResult<(f64, Vec<f64>, Vec<Vec<f64>>, f64, f64)> {
    let site = SiteData::new("1", rows, outcomes).map_err(err_to_py)?;
    let theta = build_theta(beta, tau)?;
    let method = match gh_order {
        None => ApproximationMethod::Laplace,
        Some(k) => ApproximationMethod::GaussHermite(k),
    };
    let opts = SummaryOptions { lambda: ridge, penalize_intercept, warm_start: None };
    let s = fedglmm_core::site_summary(&site, &theta, method, &opts).map_err(err_to_py)?;
    let hessian =
        (0..s.p).map(|i| (0..s.p).map(|j| s.hessian[(i, j)]).collect()).collect::<Vec<Vec<f64>>>();
    Ok((s.loglik, s.score.iter().copied().collect(), hessian, s.mu_hat, s.dtau))
}

/// A synthetic multi-site dataset with its generating coefficients.
#[pyclass(frozen)]
struct Dataset {
    sites: Vec<SiteTriple>,
    true_beta: Vec<f64>,
}

#[pymethods]
impl Dataset {
    /// `(site_id, rows, outcomes)` triples, ready to pass to `fit`.
    #[getter]
    fn sites(&self) -> Vec<SiteTriple> {
        self.sites.clone()
    }

    /// Coefficients the outcomes were simulated from.
    #[getter]
    fn true_beta(&self) -> Vec<f64> {
        self.true_beta.clone()
    }

    fn __repr__(&self) -> String {
        let rows: usize = self.sites.iter().map(|(_, r, _)| r.len()).sum();
        format!("Dataset({} sites, {} rows, {} coefficients)", self.sites.len(), rows, self.true_beta.len())
    }
}

/// Simulate one dataset of a standard setting (1..=8): settings pair a
/// site layout (2x500, 10x300, 2x30, 10x30, ...) with a random-effect
/// scale, and every draw is a pure function of (setting_id, seed, index).
#[pyfunction]
#[pyo3(signature = (setting_id, seed = 0, dataset_index = 1))]
fn generate(setting_id: u8, seed: u64, dataset_index: u32) -> PyResult<Dataset> {
    let setting = GenSetting::standard(setting_id).map_err(err_to_py)?;
    let dataset = fedglmm_core::generate(&setting, seed, dataset_index);
    let sites = dataset
        .sites
        .into_iter()
        .map(|s| {
            let rows = s.rows();
            let outcomes = s.outcomes().to_vec();
            (s.site_id().to_string(), rows, outcomes)
        })
        .collect();
    Ok(Dataset { sites, true_beta: dataset.truth.beta })
}

/// Fitted model: coefficient table, random-intercept scale, fit indices,
/// and the per-iteration trajectory.
#[pyclass(frozen)]
struct FitSummary {
    inner: FitResult,
}

#[pymethods]
impl FitSummary {
    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.inner.beta.iter().copied().collect()
    }

    #[getter]
    fn se(&self) -> Vec<f64> {
        self.inner.se.iter().copied().collect()
    }

    #[getter]
    fn z(&self) -> Vec<f64> {
        self.inner.z.iter().copied().collect()
    }

    #[getter]
    fn p_values(&self) -> Vec<f64> {
        self.inner.p_values.iter().copied().collect()
    }

    /// 95% Wald interval endpoints, one pair per coefficient.
    #[getter]
    fn confidence_intervals(&self) -> Vec<(f64, f64)> {
        self.inner.ci_lower.iter().copied().zip(self.inner.ci_upper.iter().copied()).collect()
    }

    /// Estimated (or frozen) random-intercept scale.
    #[getter]
    fn tau(&self) -> f64 {
        self.inner.tau
    }

    /// Selected ridge weight ("lambda" everywhere else; renamed here
    /// because lambda is a Python keyword).
    #[getter]
    fn ridge(&self) -> f64 {
        self.inner.lambda
    }

    #[getter]
    fn loglik(&self) -> f64 {
        self.inner.loglik
    }

    #[getter]
    fn aic(&self) -> f64 {
        self.inner.aic
    }

    #[getter]
    fn bic(&self) -> f64 {
        self.inner.bic
    }

    /// Validation-partition log-likelihood (NaN when everything trains).
    #[getter]
    fn val_loglik(&self) -> f64 {
        self.inner.val_loglik
    }

    #[getter]
    fn n_train(&self) -> usize {
        self.inner.n_train
    }

    #[getter]
    fn n_validation(&self) -> usize {
        self.inner.n_validation
    }

    #[getter]
    fn iterations(&self) -> u64 {
        self.inner.iterations
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    /// Fitted random intercept per site id.
    #[getter]
    fn mu_hats(&self) -> Vec<(String, f64)> {
        self.inner.mu_hats.clone()
    }

    /// `(iteration, loglik, step_inf, mu_shift, damping, tau)` rows.
    #[getter]
    fn trajectory(&self) -> Vec<(u64, f64, f64, f64, f64, f64)> {
        self.inner
            .trajectory
            .iter()
            .map(|t| (t.iteration, t.loglik, t.step_inf, t.mu_shift, t.damping, t.tau))
            .collect()
    }

    /// `(ridge, converged, iterations, objective, val_aic, val_bic)` per
    /// penalty weight tried, in sweep order.
    #[getter]
    fn candidates(&self) -> Vec<(f64, bool, u64, f64, f64, f64)> {
        self.inner
            .candidates
            .iter()
            .map(|c| (c.lambda, c.converged, c.iterations, c.objective, c.val_aic, c.val_bic))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "FitSummary(p={}, tau={:.6}, ridge={}, loglik={:.6}, iterations={}, converged={})",
            self.inner.beta.len(),
            self.inner.tau,
            self.inner.lambda,
            self.inner.loglik,
            self.inner.iterations,
            self.inner.converged,
        )
    }
}

/// Fit the random-intercept logistic model to a list of sites.
///
/// `ridge=None` sweeps the built-in penalty grid and keeps the weight
/// with the best validation AIC; a number freezes the weight. `method`
/// is "la" (Laplace) or "gh" (adaptive Gauss-Hermite of `gh_order`).
/// Raises RuntimeError when no penalty candidate converges.
#[pyfunction]
#[pyo3(signature = (
    sites,
    method = "la",
    gh_order = 4,
    ridge = None,
    split_ratio = 0.7,
    split_seed = 0,
    tau_init = 1.0,
    fixed_tau = None,
    penalize_intercept = false,
    max_iterations = 200,
))]
#[allow(clippy::too_many_arguments)]
fn fit(
    sites: Vec<SiteTriple>,
    method: &str,
    gh_order: usize,
    ridge: Option<f64>,
    split_ratio: f64,
    split_seed: u64,
    tau_init: f64,
    fixed_tau: Option<f64>,
    penalize_intercept: bool,
    max_iterations: usize,
) -> PyResult<FitSummary> {
    let data = build_sites(sites)?;
    let mut config = ModelConfig::new(parse_method(method, gh_order)?);
    config.lambda = match ridge {
        Some(weight) => LambdaSelection::Fixed(weight),
        None => LambdaSelection::Sweep,
    };
    config.split_ratio = split_ratio;
    config.split_seed = split_seed;
    config.tau_init = tau_init;
    config.fixed_tau = fixed_tau;
    config.penalize_intercept = penalize_intercept;
    config.convergence.max_outer_iters = max_iterations;
    config.validate().map_err(err_to_py)?;

    let splits = fedglmm_core::train_validation_split(&data, config.split_ratio, config.split_seed)
        .map_err(err_to_py)?;
    let mut provider = InProcessProvider::new(splits, config.method, config.penalize_intercept)
        .map_err(err_to_py)?;
    let result = fedglmm_core::fit(&mut provider, &config).map_err(err_to_py)?;
    Ok(FitSummary { inner: result })
}

/// ROC sweep: thresholds, rates, area, and the Youden-best operating
/// point with Wilson-bounded precision/recall/F1.
#[pyclass(frozen)]
struct RocCurve {
    inner: RocReport,
}

fn bounded_triple(b: &Bounded) -> (f64, f64, f64) {
    (b.value, b.low, b.high)
}

#[pymethods]
impl RocCurve {
    #[getter]
    fn thresholds(&self) -> Vec<f64> {
        self.inner.thresholds.clone()
    }

    #[getter]
    fn tpr(&self) -> Vec<f64> {
        self.inner.tpr.clone()
    }

    #[getter]
    fn fpr(&self) -> Vec<f64> {
        self.inner.fpr.clone()
    }

    #[getter]
    fn auc(&self) -> f64 {
        self.inner.auc
    }

    #[getter]
    fn best_threshold(&self) -> f64 {
        self.inner.best_threshold
    }

    /// `(value, low, high)` at the best threshold, 95% Wilson bounds.
    #[getter]
    fn precision(&self) -> (f64, f64, f64) {
        bounded_triple(&self.inner.precision)
    }

    #[getter]
    fn recall(&self) -> (f64, f64, f64) {
        bounded_triple(&self.inner.recall)
    }

    #[getter]
    fn f1(&self) -> (f64, f64, f64) {
        bounded_triple(&self.inner.f1)
    }

    fn __repr__(&self) -> String {
        format!("RocCurve(auc={:.6}, best_threshold={:.6})", self.inner.auc, self.inner.best_threshold)
    }
}

/// ROC curve and AUC for scores against 0/1 labels.
#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<RocCurve> {
    fedglmm_core::roc_auc(&scores, &labels).map(|inner| RocCurve { inner }).map_err(err_to_py)
}

#[pymodule]
fn fedglmm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(sigmoid, m)?)?;
    m.add_function(wrap_pyfunction!(log_sum_exp, m)?)?;
    m.add_function(wrap_pyfunction!(hermite_rule, m)?)?;
    m.add_function(wrap_pyfunction!(wilson_interval, m)?)?;
    m.add_function(wrap_pyfunction!(information_criteria, m)?)?;
    m.add_function(wrap_pyfunction!(random_effect_mode, m)?)?;
    m.add_function(wrap_pyfunction!(site_log_marginal, m)?)?;
    m.add_function(wrap_pyfunction!(site_summary, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_class::<Dataset>()?;
    m.add_class::<FitSummary>()?;
    m.add_class::<RocCurve>()?;
    m.add("TRUE_COEFFICIENTS", fedglmm_core::TRUE_BETA.to_vec())?;
    Ok(())
}
