use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected} values, found {found}")]
    ShapeMismatch { expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("stream function does not vanish on the boundary (max |ψ| = {max_boundary:.3e})")]
    NotTangent { max_boundary: f64 },

    #[error("assumption violated: {0}")]
    Assumption(String),

    #[error("blow-up at step {step}: norm {norm:.6e} exceeds a-priori bound {bound:.6e}")]
    BlowUp { step: usize, norm: f64, bound: f64 },

    #[error("initial state is not in the constraint set (distance {distance:.3e})")]
    NotInConstraint { distance: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
