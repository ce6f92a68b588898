//! Byte-level decoder-only transformer: Llama-family shape (pre-norm
//! RMSNorm, grouped-query attention with RoPE, gated-linear FFN, explicit
//! output head), a position-addressed KV cache, per-position residual
//! gates, autoregressive generation, and bit-exact checkpoints.

mod cache;
mod checkpoint;
mod config;
mod forward;
mod generate;
pub mod tokenizer;
mod weights;

pub use cache::KVCache;
pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, weights_hash,
};
pub use config::ModelConfig;
pub use forward::{
    forward_chunk, forward_teacher_forced, forward_teacher_forced_tracked, kv_project,
    layer_forward, logits_from_hidden, GateSchedule, LayerMode, TrackedGates, NORM_EPS,
};
pub(crate) use forward::attention_probe;
pub use generate::{generate, next_logits_uncached};
pub(crate) use generate::{check_generation_args, sample_token};
pub use weights::{init_model, LayerWeights, ModelWeights, INIT_SCALE};
