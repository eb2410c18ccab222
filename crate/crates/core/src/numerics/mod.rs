//! Dense tensors, reverse-mode differentiation, Adam and gradient checks.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{AdamHyper, AdamState};
pub use gradcheck::{analytic_gradients, check_gradients, GradCheck, GRAD_FLOOR};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{layer_norm, matmul, matmul_t, softmax_rows, Real, Tensor, LN_EPS};
