//! Error type shared by every module in the crate.

use thiserror::Error;

/// Unified error enum.
///
/// Variants are grouped by origin: algebraic preconditions
/// ([`DimensionMismatch`](Error::DimensionMismatch),
/// [`NotNormalizable`](Error::NotNormalizable),
/// [`DegenerateInput`](Error::DegenerateInput)), oracle diagnostics
/// ([`ChainDiverged`](Error::ChainDiverged),
/// [`GridTooCoarse`](Error::GridTooCoarse),
/// [`EmptyTestSet`](Error::EmptyTestSet)), data ingestion
/// ([`Parse`](Error::Parse), [`Schema`](Error::Schema), [`Io`](Error::Io)),
/// and configuration ([`ConfigInvalid`](Error::ConfigInvalid),
/// [`MissingReference`](Error::MissingReference)).
#[derive(Debug, Error)]
pub enum Error {
    /// Operands disagree on dimension or block structure.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A Gaussian factor has a precision that is not positive definite, so it
    /// has no moment representation, or a sample covariance is singular.
    #[error("not normalizable: {0}")]
    NotNormalizable(String),

    /// An input is degenerate for the requested computation (all mixture
    /// responsibilities underflow, too few samples, a non-finite value).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A Markov chain proposed into zero-probability regions almost always,
    /// so its output cannot be trusted.
    #[error("chain diverged: {0}")]
    ChainDiverged(String),

    /// A quadrature grid leaves non-negligible probability mass on its
    /// boundary, so the computed moments would be truncated.
    #[error("grid too coarse: {0}")]
    GridTooCoarse(String),

    /// Test metrics were requested on an empty test set.
    #[error("empty test set")]
    EmptyTestSet,

    /// A CSV cell failed to parse.
    #[error("parse error at data row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    /// A file is structurally wrong (missing column, ragged rows, no header).
    #[error("schema error: {0}")]
    Schema(String),

    /// A configuration value is outside its documented range or the
    /// combination of settings is unsupported.
    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    /// An evaluation step needs reference moments that were not provided or
    /// do not match the run being evaluated.
    #[error("missing reference: {0}")]
    MissingReference(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
