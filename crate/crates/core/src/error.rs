use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("model evaluation failed: {0}")]
    Evaluation(String),

    /// A simulated trajectory left the configured magnitude bound (or became non-finite).
    #[error("trajectory escaped at step {step}")]
    Escape { step: usize },

    #[error("finite-difference perturbation of {component} escaped at step {step}")]
    PerturbationEscape { component: String, step: usize },

    #[error(
        "{jacobian}[{row},{col}] deviates from finite differences: analytic {analytic:e}, \
         numeric {numeric:e} (relative deviation {deviation:e})"
    )]
    JacobianMismatch {
        jacobian: String,
        row: usize,
        col: usize,
        analytic: f64,
        numeric: f64,
        deviation: f64,
    },

    #[error("invalid window [{j}, {k}) for {len} stored records")]
    InvalidWindow { j: usize, k: usize, len: usize },

    #[error("malformed data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn check_len(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            what: what.to_string(),
            expected,
            got,
        });
    }
    Ok(())
}
