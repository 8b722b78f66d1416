//! Forward/backward primitives.

pub mod attention;
pub mod dropconnect;
pub mod gradcheck;
pub mod linalg;
pub mod loss;
pub mod norm;

pub use attention::{self_attention, self_attention_backward, AttentionCache, AttentionGrads, AttentionWeights};
pub use dropconnect::{dropconnect_apply, DropMask};
pub use gradcheck::{grad_check, grad_check_directional, relative_error};
pub use linalg::{gelu, gelu_backward, linear, linear_backward, matmul, matmul_backward, LinearGrads};
pub use loss::{argmax_rows, softmax_cross_entropy, softmax_cross_entropy_masked, softmax_rows};
pub use norm::{layer_norm, layer_norm_backward, LayerNormCache};
