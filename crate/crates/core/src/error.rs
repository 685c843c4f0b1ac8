use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A coefficient evaluated to a non-finite value.
    #[error("non-finite {what} at coordinate {coord} (x = {x:?})")]
    NumericDomain {
        what: &'static str,
        coord: usize,
        x: Vec<f64>,
    },

    /// An observed killing rate exceeded the declared bound kappa_max.
    #[error("kappa(x) = {observed} exceeds declared kappa_max = {bound}")]
    KappaBoundViolated { observed: f64, bound: f64 },

    #[error("invalid coefficient field: {0}")]
    InvalidField(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// The principal eigenvector could not be made strictly positive.
    #[error("eigensolver failure: {0}")]
    SolverFailure(String),

    #[error("measure error: {0}")]
    Measure(String),

    /// Genealogy reconstruction asked for data the run did not retain.
    #[error("missing path storage: {0}")]
    MissingPaths(String),

    /// Ancestral map not yet constant within the available horizon.
    #[error("ancestry not fixed within horizon t = {horizon}")]
    Unfixed { horizon: f64 },

    #[error("particle index {index} out of range for N = {n}")]
    IndexOutOfRange { index: usize, n: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
