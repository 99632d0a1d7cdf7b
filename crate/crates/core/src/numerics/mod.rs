//! Dense arithmetic, masked softmax, reverse-mode differentiation, gradient
//! verification and the Adam update.

mod adam;
mod gradcheck;
mod graph;
mod mask;
mod matrix;
mod param;
mod softmax;

pub use adam::{adam_step, AdamConfig};
pub use gradcheck::{
    difference_noise, finite_diff_check, relative_error, GradCheckOptions, GradCheckReport, TensorCheck,
};
pub use graph::{AttentionLayout, Gradients, Graph, MicroItem, Var};
pub use mask::AttentionMask;
pub use matrix::{axpy, dot, gemm, Matrix};
pub use param::{ParamId, ParamStore, Parameter};
pub use softmax::masked_row_softmax;
pub(crate) use softmax::softmax_all;
