//! Crate-wide error type.

use std::path::PathBuf;

/// Errors surfaced by geometry construction, sampling, solvers, and estimators.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A scalar argument is out of its documented range.
    #[error("invalid {field}: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    /// A field's length does not match the geometry it is used with.
    #[error("size mismatch: {what} has length {got}, geometry requires {want}")]
    SizeMismatch {
        what: &'static str,
        got: usize,
        want: usize,
    },

    /// A distribution specification fails validation.
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    /// The same edge appears twice in a defect set.
    #[error("duplicate edge in defect set: base {base}, axis {axis}")]
    DuplicateDefect { base: usize, axis: usize },

    /// Applying defects would leave a conductance that is not strictly
    /// positive and finite.
    #[error("defect at base {base}, axis {axis} yields non-elliptic conductance {value}")]
    NonElliptic { base: usize, axis: usize, value: f64 },

    /// A right-hand side that must sum to zero does not.
    #[error("right-hand side is not mean-zero: imbalance {imbalance:e} exceeds {limit:e}")]
    NotMeanZero { imbalance: f64, limit: f64 },

    /// The iterative solver hit its iteration budget before reaching the
    /// requested residual.
    #[error("solver failed to converge: residual {residual:e} after {iterations} iterations")]
    NonConvergence { iterations: usize, residual: f64 },

    /// The direct solver refuses systems above its size cap.
    #[error("dense solve limited to {cap} sites, geometry has {site_count}")]
    TooLargeForDense { site_count: usize, cap: usize },

    /// The assembled linear system could not be factorized.
    #[error("linear system is singular or numerically indefinite")]
    SingularSystem,

    /// Exhaustive enumeration would visit more configurations than the cap.
    #[error("enumeration would visit {configurations} configurations, cap is {cap}")]
    EnumerationTooLarge { configurations: u128, cap: u128 },

    /// A fit grid has too few usable points or is not strictly increasing.
    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),

    /// A Monte Carlo sample failed; the index identifies the sample.
    #[error("sample {index} failed: {source}")]
    SampleFailed {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    /// Reading or writing a file failed.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A cache file exists but its header or length is wrong.
    #[error("bad cache file {path}: {reason}")]
    CacheFormat { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field,
            reason: reason.into(),
        }
    }

    /// True when the error, possibly wrapped in sample context, is a solver
    /// convergence failure.
    pub fn is_solver_failure(&self) -> bool {
        match self {
            Error::NonConvergence { .. } => true,
            Error::SampleFailed { source, .. } => source.is_solver_failure(),
            _ => false,
        }
    }
}
