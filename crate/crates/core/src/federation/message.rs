//! Message vocabulary of the coordination protocol.
//!
//! A session is: every site sends `HELLO`, the coordinator answers with
//! `CONFIG`, then rounds of `COMPUTE` (coordinator → sites) and `SUMMARY`
//! (site → coordinator) until the fit finishes with `RESULT` + `BYE` or
//! fails with `ABORT`. `CONFIG` is re-broadcast whenever the penalty weight
//! or the evaluated partition changes mid-session.

use nalgebra::DVector;

use crate::coordinator::FitResult;
use crate::site::{ApproximationMethod, Partition, SiteSummary};

/// Version tag carried in every `HELLO`; peers must match exactly.
pub const PROTOCOL_VERSION: u64 = 1;

/// Session-level settings the coordinator pushes to every site.
///
/// The split parameters travel with the config so each site derives its
/// train/validation partition locally with the shared splitter; the
/// coordinator never sees rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionConfig {
    pub method: ApproximationMethod,
    pub lambda: f64,
    pub penalize_intercept: bool,
    pub partition: Partition,
    pub split_ratio: f64,
    pub split_seed: u64,
}

/// The final fit as sent over the wire: the scalar and per-coefficient
/// fields of [`FitResult`], without the site modes, the iteration
/// trajectory, or the sweep ledger.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultPayload {
    pub beta: DVector<f64>,
    pub tau: f64,
    pub lambda: f64,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub val_loglik: f64,
    pub val_aic: f64,
    pub val_bic: f64,
    pub se: DVector<f64>,
    pub z: DVector<f64>,
    pub p_values: DVector<f64>,
    pub ci_lower: DVector<f64>,
    pub ci_upper: DVector<f64>,
    pub n_train: u64,
    pub n_validation: u64,
    pub iterations: u64,
    pub converged: bool,
}

impl From<&FitResult> for ResultPayload {
    fn from(fit: &FitResult) -> Self {
        ResultPayload {
            beta: fit.beta.clone(),
            tau: fit.tau,
            lambda: fit.lambda,
            loglik: fit.loglik,
            aic: fit.aic,
            bic: fit.bic,
            val_loglik: fit.val_loglik,
            val_aic: fit.val_aic,
            val_bic: fit.val_bic,
            se: fit.se.clone(),
            z: fit.z.clone(),
            p_values: fit.p_values.clone(),
            ci_lower: fit.ci_lower.clone(),
            ci_upper: fit.ci_upper.clone(),
            n_train: fit.n_train as u64,
            n_validation: fit.n_validation as u64,
            iterations: fit.iterations,
            converged: fit.converged,
        }
    }
}

/// One protocol frame.
#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    /// Site introduces itself with its dimensions and protocol version.
    Hello { site_id: String, n_i: u64, p: u64, protocol_version: u64 },
    Config(SessionConfig),
    /// Coordinator broadcasts parameters for a round; rounds strictly
    /// increase within a session.
    Compute { round: u64, beta: DVector<f64>, tau: f64 },
    /// Site answers a round with its summary statistics.
    Summary { round: u64, payload: SiteSummary },
    Result(ResultPayload),
    /// Fatal error; the sender closes after this.
    Abort { reason: String },
    /// Orderly end of session.
    Bye,
}

impl Message {
    /// Frame tag as it appears on the wire.
    pub fn tag(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "HELLO",
            Message::Config(_) => "CONFIG",
            Message::Compute { .. } => "COMPUTE",
            Message::Summary { .. } => "SUMMARY",
            Message::Result(_) => "RESULT",
            Message::Abort { .. } => "ABORT",
            Message::Bye => "BYE",
        }
    }
}
