//! fp64 tensors and reverse-mode automatic differentiation.

mod attention;
pub mod gradcheck;
mod linalg;
mod tape;
mod tensor;

pub use attention::{multi_head_self_attention, AttentionOutput, AttentionParams};
pub use gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
pub(crate) use tape::softmax_in_place;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
