use thiserror::Error;

/// Errors produced by container construction, transfer/render/loss
/// evaluation, optimization and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument was violated (non-finite value,
    /// non-positive support size, length mismatch, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A gradient or cached state does not match the shape it was
    /// produced for.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A particle channel required by the requested operation is absent.
    #[error("missing particle channel {0:?}")]
    MissingChannel(String),

    /// A file does not look like the expected format (bad magic, bad
    /// color type, malformed table, ...).
    #[error("format error: {0}")]
    Format(String),

    /// The file magic matched but the version is not supported.
    #[error("unsupported version {found} (expected {expected})")]
    UnsupportedVersion { expected: u32, found: u32 },

    /// A payload or channel is shorter than its header promises.
    #[error("truncated data: {0}")]
    Truncated(String),

    /// A run configuration failed validation.
    #[error("config error: {0}")]
    Config(String),

    /// The optimization produced a non-finite loss.
    #[error("optimization diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Prefix message-carrying variants with the offending file path.
    pub(crate) fn with_path(self, path: &std::path::Path) -> Error {
        let prefix = path.display();
        match self {
            Error::Io(e) => {
                Error::Io(std::io::Error::new(e.kind(), format!("{prefix}: {e}")))
            }
            Error::Format(m) => Error::Format(format!("{prefix}: {m}")),
            Error::Truncated(m) => Error::Truncated(format!("{prefix}: {m}")),
            Error::InvalidArgument(m) => Error::InvalidArgument(format!("{prefix}: {m}")),
            other => other,
        }
    }
}
