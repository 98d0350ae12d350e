use thiserror::Error;

/// Which pair of bodies tripped the overlap guard.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairKind {
    EvaderHerder,
    EvaderEvader,
}

#[derive(Debug, Error)]
pub enum HerdError {
    #[error("guard violation ({kind:?}) between {first} and {second}: distance {distance:.3e} m")]
    GuardViolation { kind: PairKind, first: usize, second: usize, distance: f64 },

    #[error("input Jacobian is rank deficient: rank {rank}, expected {expected}")]
    RankDeficient { rank: usize, expected: usize },

    #[error("excitation of evader {evader} too low for adaptation (|f| = {norm:.3e})")]
    LowExcitation { evader: usize, norm: f64 },

    #[error("Levenberg-Marquardt did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("traces do not share a time grid: {0}")]
    GridMismatch(String),

    #[error("herder {herder} sits at the ellipse center")]
    DegenerateAngle { herder: usize },

    #[error("herder {herder} is on the barrier perimeter point")]
    DegenerateBarrier { herder: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("unknown plot kind `{0}`")]
    UnknownKind(String),

    #[error("no data for plot kind `{0}`")]
    EmptyData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HerdError {
    /// True for errors caused by bad user input rather than a failing run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            HerdError::InvalidParameter(_)
                | HerdError::Config(_)
                | HerdError::Schema(_)
                | HerdError::Json(_)
                | HerdError::UnknownKind(_)
                | HerdError::EmptyData(_)
                | HerdError::GridMismatch(_)
        )
    }
}

pub type Result<T, E = HerdError> = std::result::Result<T, E>;
