//! Model configuration: an optional TOML file overlaid with flags.
//!
//! Every knob lives in both places; a flag that is present always wins
//! over the file value, and anything left unset falls back to the
//! engine defaults. The resolved configuration is stamped into the run
//! manifest so an output directory fully records how it was produced.

use std::path::PathBuf;

use serde::Deserialize;

use fedglmm_core::{ApproximationMethod, LambdaSelection, ModelConfig};

use crate::fail::Failure;

/// Approximation selector shared by the command line and the config file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodName {
    /// Laplace approximation of each site's marginal likelihood.
    La,
    /// Adaptive Gauss-Hermite quadrature (see --gh-order).
    Gh,
}

/// Spelled `"auto"` in files; the only spelling accepted for the word arm.
#[derive(Clone, Copy, Debug, Deserialize)]
pub enum AutoWord {
    #[serde(rename = "auto")]
    Auto,
}

/// Ridge selection: `"auto"` sweeps the grid, a number pins the weight.
#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(untagged)]
pub enum LambdaField {
    Fixed(f64),
    Auto(AutoWord),
}

pub fn parse_lambda(text: &str) -> Result<LambdaField, String> {
    if text == "auto" {
        return Ok(LambdaField::Auto(AutoWord::Auto));
    }
    text.parse::<f64>()
        .map(LambdaField::Fixed)
        .map_err(|_| format!("expected 'auto' or a number, got '{text}'"))
}

/// File half of the configuration. Unknown keys are rejected rather than
/// silently ignored, so typos cannot masquerade as defaults.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub method: Option<MethodName>,
    pub gh_order: Option<usize>,
    pub lambda: Option<LambdaField>,
    pub split_ratio: Option<f64>,
    pub split_seed: Option<u64>,
    pub tau_init: Option<f64>,
    pub fixed_tau: Option<f64>,
    pub penalize_intercept: Option<bool>,
    pub theta_tol: Option<f64>,
    pub mu_tol: Option<f64>,
    pub max_outer_iters: Option<usize>,
}

/// Model flags shared by `fit` and `coordinate`.
#[derive(Clone, Debug, clap::Args)]
pub struct FitSettings {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Marginal approximation method.
    #[arg(long, value_enum)]
    pub method: Option<MethodName>,

    /// Quadrature nodes for --method gh; ignored under --method la.
    #[arg(long)]
    pub gh_order: Option<usize>,

    /// Ridge weight: 'auto' sweeps 0..=10 and keeps the best validation
    /// AIC, a number pins the weight.
    #[arg(long, value_parser = parse_lambda)]
    pub lambda: Option<LambdaField>,

    /// Fraction of each site's rows assigned to training.
    #[arg(long)]
    pub split_ratio: Option<f64>,

    /// Seed of the per-site train/validation shuffle.
    #[arg(long)]
    pub split_seed: Option<u64>,

    /// Starting value of the random-intercept scale.
    #[arg(long)]
    pub tau_init: Option<f64>,

    /// Freeze the random-intercept scale at this value instead of
    /// estimating it.
    #[arg(long)]
    pub fixed_tau: Option<f64>,

    /// Include the intercept in the ridge penalty.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub penalize_intercept: Option<bool>,

    /// Stop when the max-abs parameter step falls below this.
    #[arg(long)]
    pub theta_tol: Option<f64>,

    /// Refreshed site modes must move less than this at convergence.
    #[arg(long)]
    pub mu_tol: Option<f64>,

    /// Outer iteration budget per penalty weight.
    #[arg(long)]
    pub max_iters: Option<usize>,
}

/// Fully resolved settings, ready to run and to stamp into a manifest.
#[derive(Clone, Debug)]
pub struct ResolvedConfig {
    pub model: ModelConfig,
    /// Short method tag used in output files: "la", "gh4", ...
    pub label: String,
}

impl ResolvedConfig {
    /// Every resolved knob as manifest `key=value` pairs, in a fixed order.
    pub fn provenance(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let lambda = match m.lambda {
            LambdaSelection::Sweep => "auto".to_string(),
            LambdaSelection::Fixed(v) => format!("{v:.16e}"),
        };
        let fixed_tau = m.fixed_tau.map_or("none".to_string(), |v| format!("{v:.16e}"));
        vec![
            ("method".into(), self.label.clone()),
            ("lambda".into(), lambda),
            ("split_ratio".into(), format!("{:.16e}", m.split_ratio)),
            ("split_seed".into(), m.split_seed.to_string()),
            ("tau_init".into(), format!("{:.16e}", m.tau_init)),
            ("fixed_tau".into(), fixed_tau),
            ("penalize_intercept".into(), m.penalize_intercept.to_string()),
            ("theta_tol".into(), format!("{:.16e}", m.convergence.theta_tol)),
            ("mu_tol".into(), format!("{:.16e}", m.convergence.mu_tol)),
            ("max_outer_iters".into(), m.convergence.max_outer_iters.to_string()),
            ("damping_init".into(), format!("{:.16e}", m.convergence.damping_init)),
            ("damping_growth".into(), format!("{:.16e}", m.convergence.damping_growth)),
            ("damping_cap".into(), format!("{:.16e}", m.convergence.damping_cap)),
        ]
    }
}

/// Overlay the flag set on the config file and validate the result.
pub fn resolve(settings: &FitSettings) -> Result<ResolvedConfig, Failure> {
    let file: FileConfig = match &settings.config {
        None => FileConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            toml::from_str(&text)
                .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
    };

    let method_name = settings.method.or(file.method).unwrap_or(MethodName::La);
    let gh_order = settings.gh_order.or(file.gh_order);
    let method = match method_name {
        MethodName::La => ApproximationMethod::Laplace,
        MethodName::Gh => ApproximationMethod::GaussHermite(gh_order.unwrap_or(4)),
    };

    let mut model = ModelConfig::new(method);
    if let Some(choice) = settings.lambda.or(file.lambda) {
        model.lambda = match choice {
            LambdaField::Auto(_) => LambdaSelection::Sweep,
            LambdaField::Fixed(v) => LambdaSelection::Fixed(v),
        };
    }
    if let Some(v) = settings.split_ratio.or(file.split_ratio) {
        model.split_ratio = v;
    }
    if let Some(v) = settings.split_seed.or(file.split_seed) {
        model.split_seed = v;
    }
    if let Some(v) = settings.tau_init.or(file.tau_init) {
        model.tau_init = v;
    }
    if let Some(v) = settings.fixed_tau.or(file.fixed_tau) {
        model.fixed_tau = Some(v);
    }
    if let Some(v) = settings.penalize_intercept.or(file.penalize_intercept) {
        model.penalize_intercept = v;
    }
    if let Some(v) = settings.theta_tol.or(file.theta_tol) {
        model.convergence.theta_tol = v;
    }
    if let Some(v) = settings.mu_tol.or(file.mu_tol) {
        model.convergence.mu_tol = v;
    }
    if let Some(v) = settings.max_iters.or(file.max_outer_iters) {
        model.convergence.max_outer_iters = v;
    }
    model.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let label = match method {
        ApproximationMethod::Laplace => "la".to_string(),
        ApproximationMethod::GaussHermite(k) => format!("gh{k}"),
    };
    Ok(ResolvedConfig { model, label })
}
