use std::fmt;

/// Errors raised anywhere in the pipeline.
///
/// Each variant maps to a stable category string (see [`Error::category`]) that
/// the CLI prints so scripts can branch on failure kind.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents do not fit the operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// An API was used out of contract (non-scalar loss, missing gradient, ...).
    #[error("usage error: {0}")]
    Usage(String),
    /// A configuration value is invalid.
    #[error("config error: {0}")]
    Config(String),
    /// Window grids or feature pyramids do not line up.
    #[error("geometry error: {0}")]
    Geometry(String),
    /// User-provided data (frames, corpora) is unusable.
    #[error("input error: {0}")]
    Input(String),
    /// A file was readable but malformed.
    #[error("format error: {0}")]
    Format(String),
    /// A NaN or infinity appeared in a forward value.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Usage(_) => "usage",
            Error::Config(_) => "config",
            Error::Geometry(_) => "geometry",
            Error::Input(_) => "input",
            Error::Format(_) => "format",
            Error::Numeric(_) => "numeric",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(context: impl fmt::Display, source: std::io::Error) -> Self {
        Error::Io {
            context: context.to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(format!($($arg)*))
    };
}
pub(crate) use dim_err;
