//! Crate-wide error type.
//!
//! One enum covers every layer so that call sites can bubble errors with `?`
//! while still letting the CLI map failure classes to distinct exit codes.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input data: dimension mismatches, non-finite covariates,
    /// outcomes outside {0, 1}, empty sites.
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// Invalid argument to a numeric routine (out-of-range order, bad
    /// tolerance, non-positive tau, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The inner mode search for a site's random effect failed.
    #[error("mode finding failed for site {site_id}: {detail}")]
    ModeFinding { site_id: String, detail: String },

    /// A site produced a non-finite summary statistic.
    #[error("non-finite summary for site {site_id}: {detail}")]
    NonFiniteSummary { site_id: String, detail: String },

    /// The damped Newton solve failed even at the damping cap.
    #[error("global Newton step failed at round {round}: {detail}")]
    SolveFailed { round: u64, detail: String },

    /// No regularization candidate converged.
    #[error("fit did not converge: {summary}")]
    NonConvergence {
        summary: String,
        /// Per-candidate diagnostics: (lambda, iterations, last max |Δθ|).
        diagnostics: Vec<(f64, u64, f64)>,
    },

    /// Wire payload exceeds the frame-size cap.
    #[error("frame of {len} bytes exceeds cap of {cap} bytes")]
    FrameTooLarge { len: u64, cap: u64 },

    /// Frame or message body that does not parse.
    #[error("malformed frame: {0}")]
    MalformedFrame(String),

    /// Peer speaks a different protocol revision.
    #[error("protocol version mismatch: peer sent {peer}, expected {expected}")]
    VersionMismatch { peer: u64, expected: u64 },

    /// Protocol state violation (wrong message for the session phase,
    /// duplicate site, round echo mismatch, ...).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A federation round did not complete within the configured bound.
    #[error("round {round} timed out after {waited_secs:.1}s")]
    RoundTimeout { round: u64, waited_secs: f64 },

    /// The session was terminated by an ABORT, locally or from the peer.
    #[error("session aborted: {0}")]
    Aborted(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid_data(msg: impl Into<String>) -> Self {
        Error::InvalidData(msg.into())
    }

    pub(crate) fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn malformed(msg: impl Into<String>) -> Self {
        Error::MalformedFrame(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
}
