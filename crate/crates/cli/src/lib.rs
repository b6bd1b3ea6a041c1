//! Experiment commands behind the `lightattn` binary. Each command reads an
//! [`ExperimentConfig`], writes its CSV/JSON artifacts, and returns an
//! in-memory report so the same code paths can be driven from tests.

pub mod commands;
pub mod config;
pub mod report;

pub use config::{DataSource, ExperimentConfig};

/// Raised when a gradient check exceeds its tolerance; maps to exit code 1.
#[derive(Debug)]
pub struct GradcheckFailure {
    pub failures: Vec<String>,
}

impl std::fmt::Display for GradcheckFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gradient check failed: {}", self.failures.join(", "))
    }
}

impl std::error::Error for GradcheckFailure {}

/// Raised when a structural law (parameter ordering, score-element count)
/// does not hold; maps to exit code 1.
#[derive(Debug)]
pub struct AssertionFailure(pub String);

impl std::fmt::Display for AssertionFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for AssertionFailure {}

/// Process exit code for an error returned by any command:
/// 3 for numerical divergence, 1 for failed checks, 2 for everything else
/// (bad config, unreadable data, I/O).
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(lightattn::Error::Divergence { .. }) = cause.downcast_ref::<lightattn::Error>() {
            return 3;
        }
        if cause.is::<GradcheckFailure>() || cause.is::<AssertionFailure>() {
            return 1;
        }
    }
    2
}
