use thiserror::Error;

/// Error taxonomy shared by every module in the crate.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("input error: {0}")]
    Input(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("resource cap exceeded: {0}")]
    Resource(String),

    #[error("degenerate measure: {0}")]
    Degenerate(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// The ball-split admissibility condition m(B) > sigma failed.
    /// `deficit` is sigma - m(B); `step` identifies where in an inductive
    /// construction the failure occurred (0 for a bare split).
    #[error("inadmissible split at step {step}: ball mass {ball_mass} <= sigma {sigma} (deficit {deficit})")]
    InadmissibleSplit {
        step: usize,
        ball_mass: f64,
        sigma: f64,
        deficit: f64,
    },
}

pub type Result<T> = std::result::Result<T, CoreError>;
