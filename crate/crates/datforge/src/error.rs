use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. Variants map onto the failure modes of the
/// individual modules; `class` sorts them into the two CLI exit classes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("unknown language: {0}")]
    UnknownLanguage(String),
    #[error("'en' carries no group")]
    EnglishUngrouped,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("base fingerprint mismatch: bundle {bundle:#018x} vs model {model:#018x}")]
    FingerprintMismatch { bundle: u64, model: u64 },
    #[error("density must satisfy 0 < k <= 1, got {0}")]
    BadDensity(f32),
    #[error("drop probability must satisfy 0 <= p < 1, got {0}")]
    BadProbability(f32),
    #[error("task vectors have mismatched layouts")]
    LayoutMismatch,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("incompatible bundles: {0}")]
    IncompatibleBundles(String),
    #[error("direction error: {0}")]
    DirectionError(String),
    #[error("sequence of length {len} exceeds max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },
    #[error("sequence has no target tokens after SEP")]
    NoTargetTokens,
    #[error("missing corpus for task {0}")]
    MissingCorpus(String),
    #[error("mode error: {0}")]
    ModeError(String),
    #[error("no adapter in pool for id {0}")]
    MissingAdapter(String),
    #[error("bad counts: {0}")]
    BadCounts(String),
    #[error("anchor language {0} not covered by superset")]
    AnchorNotCovered(String),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Exit class for the CLI: bad inputs versus failures while executing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Validation / configuration problems (exit code 1).
    Config,
    /// Runtime failures such as I/O (exit code 2).
    Runtime,
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } => ErrorClass::Runtime,
            _ => ErrorClass::Config,
        }
    }
}
