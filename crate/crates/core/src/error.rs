use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse model: {0}")]
    Parse(#[from] serde_json::Error),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("duplicate bus id {0}")]
    DuplicateBus(u32),

    #[error("{what} references unknown bus {bus}")]
    UnknownBus { what: String, bus: u32 },

    #[error("generator at bus {bus}: inertia must be positive, got {m}")]
    NonPositiveInertia { bus: u32, m: f64 },

    #[error("non-uniform damping: d/m ratios range over [{min}, {max}]")]
    NonUniformDamping { min: f64, max: f64 },

    #[error("singular network matrix ({0})")]
    SingularNetwork(String),

    #[error("reduced network is lossy: residual conductance {0:e} pu exceeds 1e-8")]
    ResidualConductance(f64),

    #[error("equilibrium solve diverged after {iterations} iterations (residual {residual:e})")]
    NewtonDivergence { iterations: usize, residual: f64 },

    #[error("equilibrium is not stable: max manifold eigenvalue real part {0:e}")]
    NotStableEquilibrium(f64),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("integration step size underflow at t = {time}")]
    StepUnderflow { time: f64, last_state: Vec<f64> },

    #[error("empty LVRT curve")]
    EmptyCurve,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no feasible vertex placement for phase {phase} with {n_line} line(s)")]
    NoFeasibleFit { phase: f64, n_line: usize },

    #[error("equilibrium violates polytope row {row} ({tag}) by {violation:e}")]
    SepInfeasible {
        row: usize,
        tag: String,
        violation: f64,
    },

    #[error("point is not on facet {facet}: residual {residual:e}")]
    NotOnFacet { facet: usize, residual: f64 },

    #[error("LMI infeasible: best phase-I slack {slack:e}")]
    LmiInfeasible { slack: f64 },

    #[error("optimization problem is unbounded")]
    Unbounded,

    #[error("solver did not converge: {0}")]
    SolverFailure(String),

    #[error("state grid too large: {cells} cells exceeds limit {limit}")]
    GridTooLarge { cells: usize, limit: usize },

    #[error("oracle guard: {0}")]
    OracleGuard(String),

    #[error("unstable even with instantaneous clearing")]
    UnstableAtZero,

    #[error("grid and estimate do not describe the same system: {0}")]
    Mismatch(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
