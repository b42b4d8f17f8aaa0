use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("temperature must be positive, got {0}")]
    Temperature(f64),

    #[error("k fraction must lie in (0, 1], got {0}")]
    KFraction(f64),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("requested {k} clusters but only {points} points were supplied")]
    TooManyClusters { k: usize, points: usize },

    #[error("unknown image id `{0}`")]
    UnknownImage(String),

    #[error("no candidate edits survive filtering")]
    NoCandidates,

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("unsupported schema_version {found} (reader understands {supported})")]
    SchemaVersion { found: u32, supported: u32 },

    #[error("unresolved reference `{}`", .0.display())]
    MissingRef(PathBuf),

    #[error("blob `{}` has {actual} bytes, expected {expected}", .path.display())]
    ByteLength {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("malformed document `{}`: {source}", .path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("i/o error on `{}`: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
