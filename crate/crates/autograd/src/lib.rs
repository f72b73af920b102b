//! Reverse-mode differentiation over dense f64 tensors.
//!
//! Operations are recorded on a [`Tape`]; [`Tape::backward`] returns the
//! adjoints of every leaf created with [`Tape::leaf`]. [`Tape::detach`]
//! stops gradient flow, and [`Tape::step_edge`] together with
//! [`truncate_bptt`] bounds how far gradients travel back through
//! recurrent state.

pub mod gemm;
mod gradcheck;
pub mod nn;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use nn::channel_stats;
pub use tape::{truncate_bptt, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Row-wise softmax of a tensor over its trailing axis.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    nn::softmax_rows(x)
}
