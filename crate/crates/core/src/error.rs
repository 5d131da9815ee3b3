use thiserror::Error;

/// Error type shared across the crate.
///
/// Variants are grouped by how the CLI maps them to exit codes:
/// configuration and data-validation problems exit with 1, numerical
/// failures (non-finite values, domain violations) exit with 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite values in {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid meta-path: {0}")]
    MetaPath(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("view has no off-diagonal edges; cannot sample positive pairs")]
    NoPositivePairs,

    #[error("view is a complete graph; cannot sample negative pairs")]
    NoNegativePairs,

    #[error("class {class} has {have} labeled nodes, needs at least {need} for a {k}-shot split")]
    Split {
        class: usize,
        have: usize,
        need: usize,
        k: usize,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code the CLI uses for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Domain { .. } | Error::NonFinite { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
