//! Dense tensor math, differentiable primitives, and the optimizer.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::grad_check;
pub use tape::{GradTape, Gradients, Var};
pub use tensor::{
    cosine, gelu, gelu_grad, mm_nn, mm_nt, mm_tn, softmax, softmax_slice, Element, Tensor,
};
