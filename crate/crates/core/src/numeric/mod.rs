//! Dense tensors and the reverse-mode differentiation engine.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{Graph, Reduction, Var, DISTRIBUTION_TOL, KL_CLAMP};
pub use tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {0:?} has a zero extent")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("index {index} out of range for extent {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("every position is masked")]
    AllMasked,
    #[error("not a probability distribution (row sums to {sum})")]
    NotADistribution { sum: f64 },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),
    #[error("graph already differentiated; record it again")]
    BackwardTwice,
    #[error("{0}")]
    InvalidArgument(String),
}

#[cfg(test)]
mod tests;
