//! Minimal hand-rolled neural network toolkit: parameter store with named
//! freeze groups, layers with explicit forward/backward, AdamW and a
//! one-cycle schedule. Everything is f32 on the CPU and deterministic for a
//! fixed seed.

pub mod adamw;
pub mod attention;
pub mod block;
pub mod embedding;
pub mod layernorm;
pub mod linear;
pub mod logits;
pub mod lstm;
pub mod param;

pub use adamw::{adamw_step, clip_gradients, AdamState, ClipMode, OneCycle, OptimizerConfig};
pub use attention::{softmax_rows, MultiHeadAttention};
pub use block::TransformerBlock;
pub use embedding::Embedding;
pub use layernorm::LayerNorm;
pub use linear::Linear;
pub use logits::{log_softmax_masked, nll_sum, nll_sum_backward, LmHead};
pub use lstm::LstmLayer;
pub use param::{Grads, Init, ParamGroup, ParamId, ParamStore};

#[cfg(test)]
mod gradcheck;
