use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported bit depth: maxval {0} (only 255 is supported)")]
    UnsupportedDepth(u32),

    #[error("config error: {0}")]
    Config(String),

    #[error("point ({x:.3}, {y:.3}) px lies outside the {width}x{height} image")]
    OutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    #[error("projection error: {0}")]
    Projection(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("assembly error: {0}")]
    Assembly(String),

    #[error("contour error: {0}")]
    Contour(String),

    #[error("saturated sample: {0}")]
    Saturation(String),

    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),

    #[error("correlation ratio {0} outside [0, 0.5]")]
    RatioRange(f64),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for failures of the file system rather than of the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Read { .. } | Error::Write { .. })
    }

    pub fn read(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Read {
            path: path.into(),
            source,
        }
    }

    pub fn write(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Write {
            path: path.into(),
            source,
        }
    }
}
