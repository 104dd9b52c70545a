use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model head is {actual}, expected {expected}")]
    WrongHead {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("parameter sets are not congruent: {0}")]
    Incongruent(String),

    #[error("bespoke fit diverged at iteration {iteration}")]
    BespokeDiverged {
        iteration: usize,
        last_finite: Box<crate::bespoke::BespokeTransform>,
    },

    #[error("malformed blob {path:?}: {detail}")]
    Format { path: Option<PathBuf>, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }
}
