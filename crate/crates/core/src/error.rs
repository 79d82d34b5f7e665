use std::path::PathBuf;

use crate::tensor::Layout;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid convolution shape: {0}")]
    Shape(String),

    #[error("unsupported vector width {0} (expected 4, 8 or 16)")]
    VectorWidth(usize),

    #[error("{what} = {value} is not a multiple of the vector width {lanes}")]
    Divisibility {
        what: &'static str,
        value: usize,
        lanes: usize,
    },

    #[error("layout mismatch for {operand}: expected {expected}, found {found}")]
    LayoutMismatch {
        operand: &'static str,
        expected: Layout,
        found: Layout,
    },

    #[error("dimension mismatch for {operand}: expected {expected:?}, found {found:?}")]
    DimMismatch {
        operand: &'static str,
        expected: [usize; 4],
        found: [usize; 4],
    },

    #[error("plan does not fit this problem: {0}")]
    PlanMismatch(String),

    #[error("no feasible kernel plan: {0}")]
    Planning(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("projection inputs incomplete, missing: {}", .0.join(", "))]
    Coverage(Vec<String>),

    #[error("malformed tensor file: {0}")]
    TensorFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
