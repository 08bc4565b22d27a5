use thiserror::Error;

use crate::ipm::WeightSolution;

pub type Result<T> = std::result::Result<T, NpagError>;

#[derive(Debug, Error)]
pub enum NpagError {
    #[error("invalid parameter space: {0}")]
    ParameterSpace(String),

    #[error("invalid model: {0}")]
    Model(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("theta {theta:?} lies outside the parameter box on axis `{axis}`")]
    OutsideBox { theta: Vec<f64>, axis: String },

    #[error("invalid subject `{id}`: {reason}")]
    Subject { id: String, reason: String },

    #[error("degenerate subject `{id}`: zero likelihood at every grid point")]
    DegenerateSubject { id: String },

    #[error("distribution assigns zero likelihood to subject `{id}`")]
    ZeroMixtureLikelihood { id: String },

    #[error("weight solver needs {0}")]
    Solver(String),

    #[error("weight solver hit the iteration cap after {} iterations (kkt residual {:.3e})", .best.iterations, .best.kkt_residual)]
    IterationLimit { best: Box<WeightSolution> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("result and configuration disagree: {0}")]
    Mismatch(String),

    #[error("data error at line {line}: {reason}")]
    Data { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
