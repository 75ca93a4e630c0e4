use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("singular linear system: zero pivot at row {row}")]
    Singular { row: usize },

    #[error("degenerate geometry: Jacobian {jacobian:.3e} at quadrature point {point}")]
    GeometryDegenerate { point: usize, jacobian: f64 },

    #[error("elastic operator is not coercive: {0}")]
    Coercivity(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("mesh mismatch: {0}")]
    MeshMismatch(String),

    #[error("Picard iteration did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    PicardFailure {
        iterations: usize,
        residual: f64,
        last_u: Vec<[f64; 2]>,
        last_v: Vec<f64>,
    },

    #[error("snapshot format error: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
