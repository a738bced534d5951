use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent dimensions, missing schedule entries, invalid parameters.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("matrix `{name}` is singular or ill-conditioned (condition number {cond:.3e})")]
    Singular { name: String, cond: f64 },

    #[error("matrix `{name}` is not symmetric positive definite")]
    NotPositiveDefinite { name: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("homographic transform undefined: denominator is singular (condition number {cond:.3e})")]
    TransformUndefined { cond: f64 },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("at t = {t}: {source}")]
    AtTime {
        t: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn at(self, t: usize) -> Self {
        match self {
            e @ Error::AtTime { .. } => e,
            e => Error::AtTime {
                t,
                source: Box::new(e),
            },
        }
    }

    /// Strips any time annotation.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtTime { source, .. } => source.root(),
            e => e,
        }
    }

    /// True for failures that come from the numerics rather than the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self.root(),
            Error::Singular { .. } | Error::NotPositiveDefinite { .. } | Error::TransformUndefined { .. }
        )
    }
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
