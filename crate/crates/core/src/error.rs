use thiserror::Error;

/// Errors raised by the scheduling kernels, the workload pipeline and the
/// simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value for {key}: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("placement inconsistency: {0}")]
    PlacementInconsistent(String),

    #[error("placement infeasible: no GPU has {needed_mb} MB free for replica (layer {layer}, expert {expert}, replica {ordinal})")]
    PlacementInfeasible {
        layer: usize,
        expert: usize,
        ordinal: u32,
        needed_mb: f64,
    },

    #[error("placement infeasible at iteration {iteration}, layer {layer}: {source}")]
    SimulationInfeasible {
        iteration: usize,
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("instance exceeds brute-force guard: {0}")]
    GuardExceeded(String),

    #[error("trace line {line}: {reason}")]
    TraceParse { line: usize, reason: String },

    #[error("mismatched inputs: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
