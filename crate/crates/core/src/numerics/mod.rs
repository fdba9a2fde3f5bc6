//! Dense `f64` numerics with hand-written backward passes.

pub mod gradcheck;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_tape, finite_diff_check, relative_error, GroupCheck};
pub use ops::{
    attention, attention_backward, attention_forward, cross_entropy, gelu, gelu_grad, layer_norm, layer_norm_backward,
    linear, linear_backward, linear_backward_params, mse, softmax, softmax_backward, AttentionCache, LayerNormCache,
};
pub use tape::{adamw_step, AdamW, Gradients, Init, NamedTensor, ParamId, ParamTape};
pub use tensor::{axpy, dot, Tensor2};
