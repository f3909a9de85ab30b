use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("decoder state corrupted: {0}")]
    StateCorruption(String),

    #[error("supervision inconsistency{}: pointer label on token {token} absent from source", doc.map(|d| format!(" in document {d}")).unwrap_or_default())]
    SupervisionInconsistency { token: u32, doc: Option<usize> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("alignment error: {left} outputs vs {right} references")]
    Alignment { left: usize, right: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Attaches a document index to supervision errors raised deep inside a loss.
    pub fn with_doc(self, doc: usize) -> Self {
        match self {
            Error::SupervisionInconsistency { token, .. } => {
                Error::SupervisionInconsistency {
                    token,
                    doc: Some(doc),
                }
            }
            other => other,
        }
    }
}
