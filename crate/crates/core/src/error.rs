use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("order parameter undefined for zero vacancy concentration")]
    UndefinedOrderParameter,

    #[error("conductance model outside its valid range: {0}")]
    ModelRange(String),

    #[error("linear solve failed: {reason} (relative residual {residual:e})")]
    Solver { reason: String, residual: f64 },

    #[error("current density map undefined: zero total current")]
    DegenerateMap,

    #[error("fit error: {0}")]
    Fit(String),

    #[error("trial {trial_id} at c_v={c_v} (seed {seed}) failed: {source}")]
    Trial {
        trial_id: usize,
        c_v: f64,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("calibration failed: best error {best_error:e} 1/K exceeds tolerance {tolerance:e}")]
    Calibration {
        best_error: f64,
        tolerance: f64,
        best: Box<crate::network::ConductanceModel>,
    },

    #[error("grid saturated: no unoccupied site left")]
    Saturated,

    #[error("drift out of range: 1 + t_alpha*dT = {0} <= 0")]
    DriftRange(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("conductance {0:e} S not covered by any range")]
    Uncovered(f64),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("parse error in {field} at byte {offset}: {reason}")]
    Parse {
        field: String,
        offset: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
