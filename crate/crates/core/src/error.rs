use thiserror::Error;

use crate::solver::SolveStatus;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A point left its declared domain box.
    #[error("{what}[{index}] = {value} outside [{lo}, {hi}]")]
    Range {
        what: &'static str,
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("inversion of the output window did not converge (residual {residual:e} after {iterations} iterations)")]
    NonConvergence { residual: f64, iterations: usize },

    #[error("dictionary entry `{label}` evaluated to a non-finite value{}", column.map(|c| format!(" at column {c}")).unwrap_or_default())]
    Evaluation { label: String, column: Option<usize> },

    #[error("experiment {experiment} left the safety box at step {step}")]
    ExperimentDivergence { experiment: usize, step: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("conic solver failure: {0}")]
    Solver(String),

    #[error("unknown variable descriptor (program {program}, offset {offset})")]
    UnknownDescriptor { program: u64, offset: usize },

    #[error("SDP not solved (status {status:?}); numerical rank of [U0; Y0; V0; Q0] is {rank} of {rows} rows")]
    Infeasible {
        status: SolveStatus,
        rank: usize,
        rows: usize,
    },

    #[error("post-solve check `{what}` failed: residual {residual:e} > {tol:e}")]
    PostValidation {
        what: &'static str,
        residual: f64,
        tol: f64,
    },

    #[error("P1 numerically singular (condition number {condition:e})")]
    SingularP1 { condition: f64 },

    #[error("Lyapunov decrease certificate failed (minimum eigenvalue {min_eigenvalue:e})")]
    Certificate { min_eigenvalue: f64 },

    #[error("controller rejected: {0}")]
    ControllerRejected(String),

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Process exit code: 1 validation, 2 experiment divergence, 3 synthesis.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ExperimentDivergence { .. } => 2,
            Error::Solver(_)
            | Error::Infeasible { .. }
            | Error::PostValidation { .. }
            | Error::SingularP1 { .. }
            | Error::Certificate { .. }
            | Error::ControllerRejected(_) => 3,
            _ => 1,
        }
    }
}
