use nalgebra::DVector;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("newton did not converge after {iterations} iterations (residual {residual:.3e})")]
    NewtonFailed {
        best: DVector<f64>,
        residual: f64,
        iterations: usize,
    },

    #[error("degenerate mixed hessian at x={x:?}, y={y:?}")]
    Degenerate { x: Vec<f64>, y: Vec<f64> },

    #[error("cost evaluated below the separation guard: |x-y| = {dist:.3e} < {guard:.3e}")]
    Separation { dist: f64, guard: f64 },

    #[error("density error: {0}")]
    Density(String),

    #[error("W is not positive definite at node {node} (min eigenvalue {min_eig:.3e})")]
    Positivity { node: usize, min_eig: f64 },

    #[error("obliqueness lost at boundary node {node} (beta.nu = {value:.3e})")]
    Obliqueness { node: usize, value: f64 },

    #[error("boundary sweeps did not converge: max |G| = {residual:.3e} after {sweeps} sweeps")]
    Boundary { residual: f64, sweeps: usize },

    #[error("assembly failed: {flagged} of {total} nodes flagged")]
    Assembly { flagged: usize, total: usize },

    #[error("step failed after {rejections} consecutive rejections")]
    StepFailure { rejections: usize },

    #[error("finite-difference stencil left the admissible range: {0}")]
    Range(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("continuation failed at s={failed_s:.4} (last good s={last_good_s:.4}): {reason}")]
    Continuation {
        last_good_s: f64,
        failed_s: f64,
        reason: String,
    },

    #[error("coverage error: {unreachable} of {total} target nodes unreachable")]
    Coverage { unreachable: usize, total: usize },

    #[error("problem too large: {0}")]
    Size(String),

    #[error("oracle not applicable: {0}")]
    OracleInapplicable(String),

    #[error("flow did not converge: {0}")]
    Flow(String),

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
