use thiserror::Error;

/// Errors shared across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {what} at row {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("matrix is not symmetric: |a[{i}][{j}] - a[{j}][{i}]| = {delta:e}")]
    NotSymmetric { i: usize, j: usize, delta: f64 },
    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {off_norm:e})")]
    NoConvergence { sweeps: usize, off_norm: f64 },
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("NaN in forward pass at layer {layer}")]
    ForwardNaN { layer: usize },
    #[error("non-finite gradient; model left unchanged")]
    NonFiniteGradient,
    #[error("non-finite state at integration step {step}")]
    NonFiniteState { step: usize },
    #[error("CFL violation: dt = {dt:e} exceeds admissible {admissible:e}")]
    CflViolation { dt: f64, admissible: f64 },
    #[error("training diverged at iteration {iteration} (loss {loss:e}); last good checkpoint retained")]
    Diverged { iteration: usize, loss: f64 },
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
