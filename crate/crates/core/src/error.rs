use std::path::PathBuf;

/// Errors raised across the toolkit.
///
/// Variants are grouped so that callers (the CLI in particular) can map
/// them onto coarse exit classes with [`Error::class`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value in layer `{layer}`")]
    NonFinite { layer: String },

    #[error("gradient oracle failure: {0}")]
    Oracle(String),

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("degenerate layer `{0}`: pruning would remove every weight")]
    DegenerateLayer(String),

    #[error("trajectory is empty")]
    EmptyTrajectory,

    #[error("no checkpoint recorded at step {0}")]
    MissingCheckpoint(u64),

    #[error("no result cell at density {density} for reset mode `{mode}`")]
    MissingCell { density: f64, mode: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("bad magic in {what}: expected {expected:?}")]
    BadMagic { what: &'static str, expected: &'static str },

    #[error("unsupported {what} version {version}")]
    UnsupportedVersion { what: &'static str, version: u16 },

    #[error("truncated {what}: {detail}")]
    Truncated { what: &'static str, detail: String },

    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Coarse error categories, used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Numeric,
    Io,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NonFinite { .. } | Error::Oracle(_) => ErrorClass::Numeric,
            Error::BadMagic { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Truncated { .. }
            | Error::Malformed { .. }
            | Error::Io { .. }
            | Error::Csv(_) => ErrorClass::Io,
            _ => ErrorClass::Config,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
