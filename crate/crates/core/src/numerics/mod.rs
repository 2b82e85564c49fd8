//! Dense matrices, a reverse-mode tape over them, and the differentiable
//! primitives the models are built from.

mod attention;
mod tape;
mod tensor;

pub use attention::{multi_head_attention, multi_head_attention_grouped, AttentionOutput, AttentionParams, AttentionVars};
pub use tape::{kl_multinomial_rows, sigmoid_scalar, AttnGroup, Gradients, ParamId, ParamSet, Tape, Var};
pub use tensor::Tensor;
