//! Dense tensors, reverse-mode differentiation, resampling and random streams.

mod gradcheck;
mod graph;
mod real;
mod resize;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, grad_check_multi, op_suite, GradCheckReport};
pub use graph::{sigmoid, ConvGeometry, Gradients, Graph, LogitGate, Var, LN_EPS, MASK_NEG};
pub use real::Real;
pub use resize::{resize_grid, AxisTaps, ResizePlan};
pub use rng::{stream_id, Rng, RngState};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("shape {shape:?} needs {expected} values, got {actual}")]
    BadLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("expected a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("{0}")]
    Invalid(String),
}
