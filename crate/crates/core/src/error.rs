use std::path::PathBuf;

use crate::dataset::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid box ({cx}, {cy}, {w}, {h}): {reason}")]
    InvalidBox {
        cx: f64,
        cy: f64,
        w: f64,
        h: f64,
        reason: &'static str,
    },

    /// A caller passed arguments that violate an operation's preconditions.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// An invariant that the algorithms are supposed to maintain was broken.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("detector failed in epoch {epoch}: {message}")]
    Detector { epoch: usize, message: String },

    #[error("dataset failed validation with {} violation(s): {}", .0.len(), format_violations(.0))]
    Validation(Vec<Violation>),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: line {}, column {}: {source}", .path.display(), .source.line(), .source.column())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{}: {message}", .path.display())]
    Format { path: PathBuf, message: String },
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
