//! Federated fitting of a random-intercept logistic regression model.
//!
//! Sites hold patient-level rows that never leave the site. Each fitting
//! round, every site maximizes its own random-intercept profile, applies a
//! Laplace or adaptive Gauss–Hermite approximation to its marginal
//! likelihood, and ships back a fixed-size summary: log-likelihood, score,
//! Hessian, and the τ-gradient. The coordinator aggregates the summaries,
//! takes a damped Newton step in β and a log-scale gradient step in τ, and
//! broadcasts the updated parameters. Because the summaries are exact
//! derivatives of the sitewise objective, the federated fit reproduces the
//! pooled fit to floating-point accuracy.
//!
//! Module map:
//! - [`model`]: data containers and the joint log-density g(μ; β, τ) with
//!   its derivative bundle.
//! - [`quadrature`]: Gauss–Hermite rules, log-sum-exp, and the marginal
//!   log-likelihood approximations.
//! - [`site`]: the inner mode search and per-round summary assembly.
//! - [`coordinator`]: damped Newton aggregation, τ updates, λ selection,
//!   Wald inference, and information criteria.
//! - [`federation`]: wire protocol, codec, TCP coordinator and site agent,
//!   plus an in-process transport that shares the same code path.
//! - [`datagen`]: synthetic multi-site data with known ground truth.
//! - [`evaluation`]: significance confusion, power, ROC/AUC, Wilson
//!   intervals, and coefficient-error summaries.

pub mod coordinator;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod federation;
pub mod model;
pub mod quadrature;
pub mod site;

pub use coordinator::{
    fit, information_criteria, train_validation_split, ConvergenceConfig, FitResult,
    LambdaSelection, ModelConfig, SummaryProvider,
};
pub use datagen::{generate, read_dataset, read_truth, write_dataset, GenSetting, TRUE_BETA};
pub use error::{Error, Result};
pub use evaluation::{
    coefficient_error, empirical_power, roc_auc, significance_confusion, wilson_interval,
};
pub use model::{sigmoid, RandomEffectMode, SiteData, Theta};
pub use quadrature::{hermite_rule, log_sum_exp, HermiteRule};
pub use site::{
    fit_random_effect, site_summary, ApproximationMethod, Partition, SiteEngine, SiteSummary,
    SummaryOptions,
};
