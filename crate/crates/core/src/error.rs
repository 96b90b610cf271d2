use thiserror::Error;

/// Errors raised by the search toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite {what}: {values:?}")]
    NonFinite { what: &'static str, values: Vec<f64> },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("gain is not stabilizing (sqrt(gamma) * spectral radius = {radius:.6})")]
    UnstableGain { radius: f64 },

    #[error("discounted Lyapunov iteration did not converge in {iterations} iterations")]
    LyapunovNonConvergence { iterations: usize },

    #[error("kernel matrix is ill-conditioned after jitter {jitter:e}")]
    IllConditioned { jitter: f64 },

    #[error("contraction condition violated: gamma * L_p * (1 + L_pi) = {value:.6} >= 1")]
    ContractionViolated { value: f64 },

    #[error("unknown environment `{0}`")]
    UnknownEnv(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("output error: {0}")]
    Output(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_finite(what: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what,
            values: values.to_vec(),
        })
    }
}
