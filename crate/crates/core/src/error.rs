use thiserror::Error;

/// Errors surfaced by the tensor, factorization, and distribution routines.
///
/// Collective operations report [`NttError::CollectiveContract`] identically
/// on every rank of the group, so a violated contract fails the whole worker
/// group instead of deadlocking it.
#[derive(Debug, Error)]
pub enum NttError {
    /// A shape or divisibility requirement was violated.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An index lies outside the bounds of a tensor or matrix.
    #[error("index error: {0}")]
    Index(String),

    /// A rank vector is inconsistent with the shape it factorizes.
    #[error("rank error: {0}")]
    Rank(String),

    /// The input is degenerate for the requested operation, e.g. zero norm.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Ranks disagreed about a collective call (kind, shape, or ordering).
    #[error("collective contract violation: {0}")]
    CollectiveContract(String),

    /// An on-disk store is missing, malformed, or unreadable.
    #[error("store error: {0}")]
    Store(String),

    /// An iterative numerical routine failed to converge or produced
    /// non-finite values.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Negative entries appeared where nonnegativity is required.
    #[error("nonnegativity violation: {0}")]
    Nonnegativity(String),

    /// A configuration value failed validation before any work started.
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, NttError>;

impl NttError {
    /// Wraps an I/O failure with the path it occurred on.
    pub fn store_io(path: &std::path::Path, err: std::io::Error) -> Self {
        NttError::Store(format!("{}: {}", path.display(), err))
    }

    /// Prepends context to the message while keeping the variant, so exit
    /// code mapping still sees the original failure class.
    pub fn with_context(self, context: &str) -> Self {
        match self {
            NttError::Dimension(m) => NttError::Dimension(format!("{context}: {m}")),
            NttError::Index(m) => NttError::Index(format!("{context}: {m}")),
            NttError::Rank(m) => NttError::Rank(format!("{context}: {m}")),
            NttError::DegenerateInput(m) => {
                NttError::DegenerateInput(format!("{context}: {m}"))
            }
            NttError::CollectiveContract(m) => {
                NttError::CollectiveContract(format!("{context}: {m}"))
            }
            NttError::Store(m) => NttError::Store(format!("{context}: {m}")),
            NttError::Numerical(m) => NttError::Numerical(format!("{context}: {m}")),
            NttError::Nonnegativity(m) => NttError::Nonnegativity(format!("{context}: {m}")),
            NttError::Config(m) => NttError::Config(format!("{context}: {m}")),
        }
    }
}
