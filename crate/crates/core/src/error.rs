use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {dim} expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid shape for {op}: {reason}")]
    InvalidShape { op: &'static str, reason: String },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("layer ordering: start index {start} is after end index {end}")]
    Ordering { start: usize, end: usize },

    #[error("cannot split height {height} into {stripes} stripes{hint}")]
    Partition {
        height: usize,
        stripes: usize,
        hint: String,
    },

    #[error("partition at layer {layer} with {stripes} stripes is not effective: subsequent receptive field {subsequent_rf} < stripe height {stripe_height}")]
    IneffectivePartition {
        layer: usize,
        stripes: usize,
        subsequent_rf: usize,
        stripe_height: usize,
    },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("batch: {0}")]
    Batch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("format: {0}")]
    Format(String),
}

impl Error {
    /// Stable, machine-parseable class name used by the CLI on failure.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::InvalidShape { .. } => "shape",
            Error::InvalidParams(_) => "invalid-params",
            Error::Ordering { .. } => "ordering",
            Error::Partition { .. } | Error::IneffectivePartition { .. } => "partition",
            Error::Label { .. } => "label",
            Error::Batch(_) => "batch",
            Error::NonFinite(_) => "non-finite",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::Eval(_) => "eval",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Format(_) => "format",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
