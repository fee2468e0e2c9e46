//! Process exit contract, kept stable for scripting:
//! 0 success, 1 internal error, 2 usage or parse error, 3 output
//! collision, 4 non-convergence (diagnostics written), 5 federation
//! failure, 130 interrupted.

use std::fmt;

use fedglmm_core::Error;

#[derive(Debug)]
pub enum Failure {
    /// Bad flags, unparseable config, or malformed input files.
    Usage(String),
    /// The output directory already holds a run and --force was absent.
    Collision(String),
    /// The optimizer exhausted its budget; diagnostics were written.
    NonConvergence(String),
    /// A federation session failed: connectivity, protocol, timeout, abort.
    Federation(String),
    /// Interrupted by SIGINT after cleanup ran.
    Interrupted,
    /// Anything else, chiefly I/O and internal numeric failures.
    Other(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Other(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Collision(_) => 3,
            Failure::NonConvergence(_) => 4,
            Failure::Federation(_) => 5,
            Failure::Interrupted => 130,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Collision(m) => write!(f, "{m}"),
            Failure::NonConvergence(m) => write!(f, "fit did not converge: {m}"),
            Failure::Federation(m) => write!(f, "federation failure: {m}"),
            Failure::Interrupted => write!(f, "interrupted"),
            Failure::Other(m) => write!(f, "{m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        match e {
            Error::InvalidData(_) | Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            Error::NonConvergence { summary, .. } => Failure::NonConvergence(summary),
            Error::FrameTooLarge { .. }
            | Error::MalformedFrame(_)
            | Error::VersionMismatch { .. }
            | Error::Protocol(_)
            | Error::RoundTimeout { .. }
            | Error::Aborted(_) => Failure::Federation(e.to_string()),
            other => Failure::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Failure {
        Failure::Other(e.to_string())
    }
}
