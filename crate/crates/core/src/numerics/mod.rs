//! Tensors, tape autodiff and the tensor file format.

pub mod autodiff;
pub mod io;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use io::{load_tensor, read_tensor, save_tensor, write_tensor};
pub use tensor::{argmax, check_finite, cosine, dot, l2_norm, softmax, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op} expects rank {expected}, got {got}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("zero-norm vector in {op}")]
    DegenerateVector { op: &'static str },
    #[error("{op} on empty input")]
    Empty { op: &'static str },
    #[error("index {index} out of range for length {len} in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("variable belongs to a graph that has been reset")]
    GraphConsumed,
    #[error("malformed tensor file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
