use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("SVD of {rows}x{cols} matrix did not converge within {sweeps} sweeps")]
    Factorization {
        rows: usize,
        cols: usize,
        sweeps: usize,
    },

    #[error("undefined similarity: zero-norm vector{}", fmt_index(.index))]
    ZeroNorm { index: Option<usize> },

    #[error("soft-decay domain error: log argument 1 - alpha*(x + alpha) = {arg} is not positive for x = {x}, alpha = {alpha}")]
    Domain { x: f64, alpha: f64, arg: f64 },

    #[error("spectrum maximum {max} maps to non-positive value {decayed} under alpha = {alpha}; use a smaller |alpha|")]
    DecayCollapse { max: f64, decayed: f64, alpha: f64 },

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("singular covariance: {zero_dirs} direction(s) with zero variance and eps = 0")]
    SingularCovariance { zero_dirs: usize },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("numerical overflow in layer {layer}")]
    Overflow { layer: usize },

    #[error("bad magic bytes {found:?}, expected \"EMB1\"")]
    BadMagic { found: Vec<u8> },

    #[error("truncated payload at byte offset {offset}: expected {expected} bytes, found {found}")]
    Truncated {
        offset: usize,
        expected: usize,
        found: usize,
    },

    #[error("trailing data at byte offset {offset}: {extra} unexpected bytes")]
    TrailingData { offset: usize, extra: usize },

    #[error("dimension overflow: {rows} x {cols} exceeds addressable size")]
    DimensionOverflow { rows: u64, cols: u64 },

    #[error("non-finite value {value} at {location}")]
    NonFiniteValue { location: String, value: f64 },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn fmt_index(index: &Option<usize>) -> String {
    match index {
        Some(i) => format!(" at index {i}"),
        None => String::new(),
    }
}

impl Error {
    /// Process exit code: 2 for I/O failures, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Io { .. } => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
