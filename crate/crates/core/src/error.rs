use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("config line {line}: {msg}")]
    ConfigSyntax { line: usize, msg: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("weights: bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("weights: unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("weights: truncated file ({0})")]
    Truncated(String),

    #[error("weights: {0} trailing bytes after the declared entries")]
    TrailingData(usize),

    #[error("weights: duplicate entry name `{0}`")]
    DuplicateName(String),

    #[error("weights: entry `{name}` has dims {dims:?} but {len} elements")]
    DimMismatch {
        name: String,
        dims: Vec<usize>,
        len: usize,
    },

    #[error("weights: missing entry `{0}`")]
    MissingWeight(String),

    #[error("weights: unexpected entries {0:?}")]
    UnexpectedWeights(Vec<String>),

    #[error("image: {0}")]
    Image(#[from] crate::segtool::ImageError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$variant(format!($($arg)*)))
    };
}
pub(crate) use bail;
