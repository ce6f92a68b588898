//! A desk-scale laboratory for prefill-only layer pruning of decoder-only
//! transformers.
//!
//! The crate builds up, from scratch and in pure Rust:
//!
//! * [`tensor`] — f64 tensors with a scoped reverse-mode gradient tape;
//! * [`model`] — a byte-level Llama-style transformer (GQA + RoPE + RMSNorm)
//!   with a KV cache, per-position residual-branch gates, generation, and a
//!   bit-exact checkpoint format;
//! * [`train`] — a small Adam pretraining loop so toy checkpoints have real
//!   layer structure;
//! * [`importance`] — squared-gate-gradient layer importance (stage-agnostic
//!   and prefill/decode stage-aware) plus a brute-force layer-removal oracle;
//! * [`pop`] — pruning plans and the pruned-prefill generation pipeline with
//!   independent KV projections and last-prompt-token boundary handling;
//! * [`analysis`] — FLOPs accounting, time-to-first-token benchmarks,
//!   representation-drift diagnostics, and CSV/SVG figure emission.
//!
//! The `poplab` binary exposes all of it on the command line.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod importance;
pub mod model;
pub mod pop;
pub mod tensor;
pub mod threads;
pub mod train;

pub use error::{PopError, Result};
