use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward: tensor #{0} in wrt list is not reachable from the loss")]
    Unreachable(usize),

    #[error("tensors belong to different graphs")]
    GraphMismatch,

    #[error("expected {expected} tensors, got {got}")]
    Alignment { expected: usize, got: usize },

    #[error("invalid architecture: {0}")]
    Arch(String),

    #[error("invalid kernel: {0}")]
    Kernel(String),

    #[error("unknown kernel name `{0}`")]
    UnknownKernel(String),

    #[error("{0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("not a checkpoint (bad magic)")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },

    #[error("checkpoint CRC mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Crc { stored: u32, computed: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("unsupported PNG: {0}")]
    UnsupportedImage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png decode: {0}")]
    PngDecode(#[from] png::DecodingError),

    #[error("png encode: {0}")]
    PngEncode(#[from] png::EncodingError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
