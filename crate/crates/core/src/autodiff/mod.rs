//! Dense tensors and a tape-based reverse-mode differentiation engine.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckReport};
pub use tape::{topk_indices, Tape, Var};
pub use tensor::{ParamId, ParamStore, Tensor};
