use thiserror::Error;

use crate::types::MixtureWeights;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("subset has no element with positive weight; renormalization is undefined")]
    DegenerateSubset,

    #[error("subset is empty")]
    EmptySubset,

    #[error("enumeration of {count} subsets exceeds the cap of {cap}")]
    SizeLimit { count: u128, cap: u128 },

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// The iteration limit was hit. The best iterate found so far is attached.
    #[error("solver did not converge within {iterations} iterations (objective {objective:.6e})")]
    SolverDivergence {
        iterations: usize,
        objective: f64,
        best: Box<MixtureWeights>,
    },

    #[error("fewer than {needed} elements carry positive weight (support size {support})")]
    DegenerateLambda { support: usize, needed: usize },

    #[error("indicator component {index} = {value} is not binary")]
    NonBinarySolution { index: usize, value: f64 },

    #[error("homogenizing scale t = {0:e} is too small to recover indicators")]
    DegenerateScale(f64),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("linear program is {0}")]
    LpStatus(&'static str),

    #[error("{candidates} candidates exceed the per-sample budget of {budget}")]
    BudgetInfeasible { candidates: usize, budget: usize },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("line {line}: non-finite value")]
    NonFiniteValue { line: usize },

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Whether the failure originates in floating-point computation rather
    /// than in malformed inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SolverDivergence { .. }
                | Error::NonBinarySolution { .. }
                | Error::DegenerateScale(_)
                | Error::NumericalFailure(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
