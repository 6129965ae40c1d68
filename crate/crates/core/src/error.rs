use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("scenario validation failed: {0}")]
    Validation(String),

    #[error("scenario parse error: {0}")]
    Parse(String),

    #[error("station at unknown node {0}")]
    UnknownStationNode(usize),

    #[error("duplicate station at node {0}")]
    DuplicateStation(usize),

    #[error("station at node {node} has invalid charge option {amount} kWh")]
    InvalidChargeOption { node: usize, amount: f64 },

    #[error("class {class} has no feasible path from node {origin} to node {destination}")]
    InfeasibleClass {
        class: usize,
        origin: usize,
        destination: usize,
    },

    #[error("path enumeration for class {class} exceeded the cap of {cap} paths")]
    PathCapExceeded { class: usize, cap: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("missing electricity price for bus {0}")]
    MissingPrice(usize),

    #[error("negative flow {0} on arc")]
    NegativeFlow(f64),

    #[error("empty path set")]
    EmptyPathSet,

    #[error("{solver} did not converge within {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("power network is disconnected")]
    DisconnectedNetwork,

    #[error("dispatch infeasible: {0}")]
    DispatchInfeasible(String),

    #[error("linear program infeasible")]
    LpInfeasible,

    #[error("linear program unbounded")]
    LpUnbounded,

    #[error("degenerate dual-cone sample {0}: zero reserve coefficients with positive violation")]
    DegenerateSample(usize),

    #[error("uncertainty set is empty or too thin to sample: {0}")]
    EmptyUncertaintySet(String),

    #[error("dual variables diverged (norm {norm:e} above {limit:e}); reduce the step size")]
    Divergence { norm: f64, limit: f64 },

    #[error("iteration index must be at least 1")]
    ZeroIteration,
}
