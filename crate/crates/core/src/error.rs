use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested primitive.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An image or raster does not have the extents an operation requires.
    #[error("shape error: {0}")]
    Shape(String),

    /// A caller-side precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Two patch grids do not cover the same physical footprint.
    #[error(
        "footprint mismatch: query grid covers {query_w}x{query_h}, key grid covers {key_w}x{key_h}"
    )]
    Geometry {
        query_w: f64,
        query_h: f64,
        key_w: f64,
        key_h: f64,
    },

    #[error("out of range: {0}")]
    Range(String),

    #[error("invalid config: {0}")]
    Config(String),

    /// A loss or parameter went non-finite; carries the names of offending tensors.
    #[error("non-finite values at step {step} in: {}", names.join(", "))]
    NonFinite { step: u64, names: Vec<String> },

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
