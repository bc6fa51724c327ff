use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("mode {mode} out of range for a tensor of order {order}")]
    Mode { mode: usize, order: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid configuration: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Config(Vec<crate::system::Violation>),
    #[error("pilot matrix is not row-orthonormal (max deviation from X·Xᴴ = I is {0:.3e})")]
    NonOrthonormalPilot(f64),
    #[error("invalid experiment: {0}")]
    Experiment(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
