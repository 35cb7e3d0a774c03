//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library's fallible entry points.
///
/// Shape mismatches inside the autodiff tape are programming errors and
/// panic instead; everything that depends on user input (files, configs,
/// numeric domains) flows through this enum.
#[derive(Debug, Error)]
pub enum RgfmError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed graph / checkpoint / dump file contents.
    #[error("parse error: {0}")]
    Parse(String),

    /// Invalid run configuration (missing paths, bad ranges, ...).
    #[error("config error: {0}")]
    Config(String),

    /// The memory budget cannot accommodate even the 1-hop subgraph.
    #[error("infeasible budget: 1-hop cost {needed} exceeds budget {budget}")]
    InfeasibleBudget { needed: u64, budget: u64 },

    /// Caller violated a documented numeric precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A point left the valid domain of a constant-curvature chart.
    #[error("manifold domain violation: {0}")]
    ManifoldDomain(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl RgfmError {
    /// Process exit code used by the CLI for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            RgfmError::InfeasibleBudget { .. } => 3,
            _ => 2,
        }
    }
}
