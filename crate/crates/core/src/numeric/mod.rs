//! Dense `f64` arrays, forward kernels and a reverse-mode tape.

mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, ParamCheck};
pub use ops::{causal_mask, dense_attention, dense_causal_gqa, layer_norm, masked_softmax};
pub use tape::{Gradients, ParamId, ParamStore, Tape, Var};
pub use tensor::{dot, Tensor};
