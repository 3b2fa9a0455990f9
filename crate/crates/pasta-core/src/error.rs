//! Error type shared by all workbench modules.

use thiserror::Error;

/// Errors surfaced by model construction, training, evaluation, and file IO.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Tensor or batch dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A configuration violates its invariants (divisibility, ranges, ...).
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// An argument is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A loss or parameter became NaN/Inf; the message names the stage.
    #[error("non-finite value during {0}")]
    NonFinite(String),

    /// A run-time postcondition failed (e.g. a frozen quantity moved).
    #[error("invariant violated: {0}")]
    Invariant(String),

    /// Underlying IO failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// A serialized container is corrupt or has the wrong version.
    #[error("malformed file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
