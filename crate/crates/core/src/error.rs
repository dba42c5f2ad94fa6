use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("duplicate parameter '{0}'")]
    DuplicateParam(String),
    #[error("backward requires a scalar output node, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("non-finite gradient for parameter '{0}'")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {step} (value {value})")]
    NonFiniteLoss { step: usize, value: f64 },
    #[error("cannot l2-normalize the zero vector")]
    ZeroVector,
    #[error("element-wise fusion product is the zero vector")]
    ZeroProductVector,
    #[error("no valid triplet in batch")]
    NoValidTriplet,
    #[error("class prior is zero for class {0}")]
    ZeroPrior(usize),
    #[error("empty label set")]
    EmptyLabels,
    #[error("classification head '{0}' not found in parameter store")]
    MissingHead(String),
    #[error("class {class} has only {count} samples; cannot split")]
    ClassTooSmall { class: usize, count: usize },
    #[error("PK sampling needs {needed} classes, dataset has {found}")]
    TooFewClasses { needed: usize, found: usize },
    #[error("empty embedding index")]
    EmptyIndex,
    #[error("class {0} has no test samples")]
    EmptyTestClass(usize),
    #[error("degenerate distances: every neighbour of point {0} is at distance zero")]
    DegenerateDistances(usize),
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("truncated blob {path}: expected {expected} bytes, found {found}")]
    TruncatedBlob {
        path: String,
        expected: usize,
        found: usize,
    },
    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("corrupt blob: {0}")]
    CorruptBlob(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("incompatible artifacts: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 io, 4 numeric abort,
    /// 5 incompatibility, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io(_)
            | Error::MalformedManifest(_)
            | Error::TruncatedBlob { .. }
            | Error::CorruptBlob(_)
            | Error::VersionMismatch { .. } => 3,
            Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_) => 4,
            Error::Incompatible(_) | Error::ShapeMismatch { .. } => 5,
            _ => 1,
        }
    }
}
