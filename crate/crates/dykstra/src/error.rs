//! Error type shared by every module of the crate.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes of the library.
///
/// The split mirrors how callers should react: `Structural` and
/// `Precondition` mean the input data is bad, `Capability` means the
/// requested operation is not defined for the given function kind,
/// `UnsupportedSchedule` means a block set cannot be executed as a single
/// step, and `Consistency` signals a broken internal invariant (a bug or
/// deliberately corrupted state, never a user mistake).
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed object: shape mismatch, empty range, duplicate edge, ...
    #[error("structural error: {0}")]
    Structural(String),

    /// A documented precondition of an operation does not hold.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Operation not defined for this function kind (e.g. a subgradient of
    /// an indicator).
    #[error("capability error: {0}")]
    Capability(String),

    /// The schedule asked for a step the engine refuses to take.
    #[error("unsupported schedule: {0}")]
    UnsupportedSchedule(String),

    /// Internal state fails one of its own invariants.
    #[error("consistency error: {0}")]
    Consistency(String),

    /// Valid input, but outside what this build implements.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// File system failure while reading or writing artifacts.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// An engine step failed; carries the (cycle, inner) coordinates.
    #[error("step (n={cycle}, w={inner}) failed: {source}")]
    Step {
        cycle: usize,
        inner: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wrap an error with the (cycle, inner) coordinates of the failing step.
    pub fn at_step(self, cycle: usize, inner: usize) -> Self {
        Error::Step {
            cycle,
            inner,
            source: Box::new(self),
        }
    }
}
