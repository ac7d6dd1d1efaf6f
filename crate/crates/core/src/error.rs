use std::path::PathBuf;

/// Errors raised across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unsupported shape: {0}")]
    UnsupportedShape(String),

    #[error("SVD failed to converge within {iterations} iterations")]
    SvdNoConvergence { iterations: usize },

    #[error("forward pass produced non-finite values at time step {step}")]
    DivergedForward { step: usize },

    #[error("tape does not match the weights or inputs it is used with")]
    StaleTape,

    #[error("unsupported refinement: {from} cells to {to} cells (only doubling is supported)")]
    UnsupportedRefinement { from: usize, to: usize },

    #[error("lambda search failed: no root below {upper:e}")]
    LambdaSearch { upper: f64 },

    #[error("bad magic bytes {found:?}, expected \"VPM1\"")]
    BadMagic { found: Vec<u8> },

    #[error("truncated payload at byte {offset}: expected {expected} more bytes")]
    Truncated { offset: u64, expected: u64 },

    #[error("non-numeric CSV cell {cell:?} at line {line}, column {column}")]
    CsvCell { line: usize, column: usize, cell: String },

    #[error("ragged CSV row at line {line}: {found} cells, expected {expected}")]
    CsvRagged { line: usize, found: usize, expected: usize },

    #[error("bad checkpoint header: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("dataset/architecture mismatch: {0}")]
    Mismatch(String),

    #[error("optimizer stalled: {0}")]
    Stall(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
