//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Everything is `f64`, row-major and contiguous. The only broadcasting is
//! adding a parameter vector to every last-dimension slice.

mod io;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use io::{read_tensor, write_tensor};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} has a zero extent")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not match {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: argument outside the domain")]
    Domain { op: &'static str },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("index {index} out of range for {bound} rows")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("malformed tensor blob: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
