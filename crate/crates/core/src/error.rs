use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library reports.
///
/// Variants split into two families: problems with the inputs (malformed
/// tables, inconsistent identifiers, out-of-range arguments) and numerical
/// failures (non-convergence, loss of definiteness). [`Error::is_numerical`]
/// tells them apart.
#[derive(Debug, Error)]
pub enum Error {
    #[error("self-loop on unit `{id}` at row {row}")]
    SelfLoop { row: usize, id: String },

    #[error("unknown unit identifier `{0}`")]
    UnknownUnit(String),

    #[error("duplicate unit identifier `{0}`")]
    DuplicateUnit(String),

    #[error("unit `{0}` has empty geometry")]
    EmptyGeometry(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate key {0}")]
    DuplicateKey(String),

    #[error("negative count {value} at {context}")]
    NegativeCount { context: String, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("zero population: {0}")]
    ZeroPopulation(String),

    #[error("model specification does not match the data: {0}")]
    SpecMismatch(String),

    #[error("unknown quantity `{0}`")]
    UnknownQuantity(String),

    #[error("effect `{0}` is not part of the model")]
    EffectAbsent(String),

    #[error("impossible observation: y = {y} has zero probability")]
    ImpossibleObservation { y: f64 },

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("mode finding failed after {iterations} iterations: {reason}; trace: {trace:?}")]
    ModeNotFound {
        iterations: usize,
        reason: String,
        trace: Vec<f64>,
    },

    #[error("hyperparameter optimizer did not converge after {evaluations} evaluations (best log marginal {best_value})")]
    OptimizerNotConverged {
        evaluations: usize,
        best_theta: Vec<f64>,
        best_value: f64,
    },

    #[error("oracle failed to mix (acceptance {acceptance:.3})")]
    OracleFailedToMix { acceptance: f64 },

    #[error("too many failed replicates: {failed} of {total}")]
    ExperimentFailed { failed: usize, total: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    /// True for failures of the numerical machinery rather than of the input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::ModeNotFound { .. }
                | Error::OptimizerNotConverged { .. }
                | Error::OracleFailedToMix { .. }
                | Error::ExperimentFailed { .. }
        )
    }
}
