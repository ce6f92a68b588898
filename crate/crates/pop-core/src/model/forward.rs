//! The gate-aware forward pass.
//!
//! One attention/FFN implementation serves every execution style: the
//! full-sequence teacher-forced pass (tracked or not), incremental cached
//! decoding, and the pruned-prefill pipeline. Causality is enforced by
//! absolute positions — each query row may attend to cached-or-current keys
//! at positions ≤ its own — so sparse caches (pruned layers under the
//! no-independent-KV ablation) need no special casing.
//!
//! Gates scale the residual-branch outputs (attention and FFN) only. KV
//! cache writes are never scaled: a fully gated-off layer (g = 0) passes
//! its input through untouched yet still deposits keys and values computed
//! from that input, which is exactly the behavior of a structurally
//! skipped layer with an independent KV projection.

use super::cache::KVCache;
use super::config::ModelConfig;
use super::weights::ModelWeights;
use crate::error::{PopError, Result};
use crate::tensor::{
    add, concat_heads, concat_rows, embedding_lookup, masked_softmax_rows, matmul, matmul_tb, mul,
    rmsnorm, rope_apply, scale_rows, silu, slice_head, Tensor,
};
use serde::{Deserialize, Serialize};

/// RMS normalization epsilon used everywhere.
pub const NORM_EPS: f64 = 1e-6;

/// How one layer participates in processing a chunk of positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMode {
    /// Attention + FFN + cache append.
    Full,
    /// Only the independent KV projection and cache append; the hidden
    /// state passes through unchanged.
    KvOnly,
    /// Nothing at all; the hidden state passes through unchanged.
    Skipped,
}

/// Per-layer gate values for a teacher-forced pass, split at the prompt
/// boundary: positions `0..prompt_len−1` use `g_prefill`, positions
/// `prompt_len−1..` use `g_decode` (the last prompt position is the first
/// decode step).
#[derive(Clone, Debug)]
pub struct GateSchedule {
    pub g_prefill: Vec<f64>,
    pub g_decode: Vec<f64>,
    pub prompt_len: usize,
}

impl GateSchedule {
    pub fn ones(num_layers: usize, prompt_len: usize) -> Self {
        Self {
            g_prefill: vec![1.0; num_layers],
            g_decode: vec![1.0; num_layers],
            prompt_len,
        }
    }

    /// All-ones except `g_prefill = 0` on the given layers: the gate
    /// picture of a pruned prefill.
    pub fn with_prefill_zeros(
        num_layers: usize,
        prompt_len: usize,
        skip: impl IntoIterator<Item = usize>,
    ) -> Self {
        let mut s = Self::ones(num_layers, prompt_len);
        for l in skip {
            s.g_prefill[l] = 0.0;
        }
        s
    }

    fn validate(&self, num_layers: usize, total_len: usize) -> Result<()> {
        if self.g_prefill.len() != num_layers || self.g_decode.len() != num_layers {
            return Err(PopError::Contract(format!(
                "gate schedule covers {} layers, model has {num_layers}",
                self.g_prefill.len()
            )));
        }
        if self.prompt_len < 1 || self.prompt_len > total_len {
            return Err(PopError::Contract(format!(
                "prompt_len {} outside 1..={total_len}",
                self.prompt_len
            )));
        }
        Ok(())
    }
}

/// Stage gates as tape leaves, one scalar tensor per (layer, stage). For
/// stage-agnostic estimation the caller may place the *same* leaf in both
/// stage slots of a layer; gradients then accumulate across both regions.
#[derive(Clone, Debug)]
pub struct TrackedGates {
    pub prefill: Vec<Tensor>,
    pub decode: Vec<Tensor>,
    pub prompt_len: usize,
}

impl TrackedGates {
    fn validate(&self, num_layers: usize, total_len: usize) -> Result<()> {
        if self.prefill.len() != num_layers || self.decode.len() != num_layers {
            return Err(PopError::Contract(format!(
                "tracked gates cover {} layers, model has {num_layers}",
                self.prefill.len()
            )));
        }
        if self.prompt_len < 1 || self.prompt_len > total_len {
            return Err(PopError::Contract(format!(
                "prompt_len {} outside 1..={total_len}",
                self.prompt_len
            )));
        }
        for t in self.prefill.iter().chain(&self.decode) {
            if t.numel() != 1 {
                return Err(PopError::Contract(
                    "tracked gates must be single-element tensors".into(),
                ));
            }
        }
        Ok(())
    }
}

fn check_layer(weights: &ModelWeights, layer: usize) -> Result<()> {
    if layer >= weights.layers.len() {
        return Err(PopError::Index {
            what: "layer",
            index: layer,
            bound: weights.layers.len(),
        });
    }
    Ok(())
}

/// Keys and values from a layer's *normalized* input; shared by the full
/// layer and the independent KV projection so the two are one computation.
fn kv_from_normed(
    weights: &ModelWeights,
    normed: &Tensor,
    layer: usize,
    positions: &[usize],
) -> Result<(Tensor, Tensor)> {
    let cfg = &weights.config;
    let lw = &weights.layers[layer];
    let t = normed.shape()[0];
    let kv_shape = [t, cfg.num_kv_heads, cfg.head_dim];
    let k = matmul(normed, &lw.wk)?.reshape(&kv_shape)?;
    let k = rope_apply(&k, positions, cfg.rope_theta)?;
    let v = matmul(normed, &lw.wv)?.reshape(&kv_shape)?;
    Ok((k, v))
}

/// Independent KV projection for a (possibly skipped) layer:
/// `k = RoPE(norm(x)·Wᴷ)`, `v = norm(x)·Wⱽ`, using the layer's
/// attention-input norm. Does not touch the cache.
pub fn kv_project(
    weights: &ModelWeights,
    x: &Tensor,
    layer: usize,
    positions: &[usize],
) -> Result<(Tensor, Tensor)> {
    check_layer(weights, layer)?;
    let normed = rmsnorm(x, &weights.layers[layer].attn_norm, NORM_EPS)?;
    kv_from_normed(weights, &normed, layer, positions)
}

/// Grouped-query causal attention over `[cached ++ current]` keys/values.
/// `q` is [t × num_heads × head_dim] (already rotated); `k_all`/`v_all`
/// are [c × num_kv_heads × head_dim] with strictly increasing `k_pos`.
fn attention(
    cfg: &ModelConfig,
    q: &Tensor,
    k_all: &Tensor,
    v_all: &Tensor,
    q_pos: &[usize],
    k_pos: &[usize],
) -> Result<Tensor> {
    let allowed: Vec<usize> = q_pos
        .iter()
        .map(|&p| k_pos.partition_point(|&kp| kp <= p))
        .collect();
    debug_assert!(allowed.iter().all(|&a| a >= 1), "query with no visible key");

    let scale = 1.0 / (cfg.head_dim as f64).sqrt();
    let k_heads: Vec<Tensor> = (0..cfg.num_kv_heads)
        .map(|h| slice_head(k_all, h))
        .collect::<Result<_>>()?;
    let v_heads: Vec<Tensor> = (0..cfg.num_kv_heads)
        .map(|h| slice_head(v_all, h))
        .collect::<Result<_>>()?;

    let mut outs = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let kv = h / cfg.group_size();
        let q_h = slice_head(q, h)?;
        let scores = crate::tensor::scale_const(&matmul_tb(&q_h, &k_heads[kv])?, scale)?;
        let probs = masked_softmax_rows(&scores, &allowed)?;
        outs.push(matmul(&probs, &v_heads[kv])?);
    }
    concat_heads(&outs)
}

/// One transformer layer with per-position residual gates.
///
/// `gate_rows[i]` scales the attention and FFN branch outputs at row `i`.
/// The layer's new keys/values are appended to the cache *before* gating —
/// regardless of the gate value — and attention spans the prior cache plus
/// the current rows.
pub(crate) fn layer_forward_rows(
    weights: &ModelWeights,
    x: &Tensor,
    layer: usize,
    cache: &mut KVCache,
    gate_rows: &Tensor,
    positions: &[usize],
) -> Result<Tensor> {
    check_layer(weights, layer)?;
    let cfg = &weights.config;
    let lw = &weights.layers[layer];
    let t = x.shape()[0];
    if x.shape() != [t, cfg.hidden] || positions.len() != t {
        return Err(PopError::Dimension {
            op: "layer_forward",
            lhs: x.shape().to_vec(),
            rhs: vec![positions.len(), cfg.hidden],
        });
    }

    let normed = rmsnorm(x, &lw.attn_norm, NORM_EPS)?;
    let (k_new, v_new) = kv_from_normed(weights, &normed, layer, positions)?;

    // Snapshot the past before appending so tracked new rows keep their
    // tape connection when concatenated with the (constant) history.
    let (k_past, v_past, past_pos) = cache.layer_view(layer)?;
    cache.append(layer, &k_new, &v_new, positions)?;
    let (k_all, v_all, k_pos) = if past_pos.is_empty() {
        (k_new, v_new, positions.to_vec())
    } else {
        let mut pos = past_pos;
        pos.extend_from_slice(positions);
        (
            concat_rows(&[k_past, k_new])?,
            concat_rows(&[v_past, v_new])?,
            pos,
        )
    };

    let q = matmul(&normed, &lw.wq)?.reshape(&[t, cfg.num_heads, cfg.head_dim])?;
    let q = rope_apply(&q, positions, cfg.rope_theta)?;
    let attn = attention(cfg, &q, &k_all, &v_all, positions, &k_pos)?;
    let attn_out = matmul(&attn, &lw.wo)?;
    let y = add(x, &scale_rows(&attn_out, gate_rows)?)?;

    let h = rmsnorm(&y, &lw.ffn_norm, NORM_EPS)?;
    let gated = mul(&silu(&matmul(&h, &lw.ffn_gate)?)?, &matmul(&h, &lw.ffn_up)?)?;
    let ffn_out = matmul(&gated, &lw.ffn_down)?;
    add(&y, &scale_rows(&ffn_out, gate_rows)?)
}

/// [`layer_forward_rows`] with one gate value for every row.
pub fn layer_forward(
    weights: &ModelWeights,
    x: &Tensor,
    layer: usize,
    cache: &mut KVCache,
    gate: f64,
    positions: &[usize],
) -> Result<Tensor> {
    let rows = Tensor::full(&[x.shape()[0]], gate);
    layer_forward_rows(weights, x, layer, cache, &rows, positions)
}

/// Attention-block output (through the output projection) for rows `x` at
/// `positions`, attending over the cache contents plus the rows' own
/// freshly projected keys/values — exactly the attention sub-computation of
/// [`layer_forward_rows`], but read-only: the cache is not modified and no
/// residual/FFN work is done. Used by drift diagnostics to compare what a
/// layer's attention produces under different cache histories.
pub(crate) fn attention_probe(
    weights: &ModelWeights,
    x: &Tensor,
    layer: usize,
    cache: &KVCache,
    positions: &[usize],
) -> Result<Tensor> {
    check_layer(weights, layer)?;
    let cfg = &weights.config;
    let lw = &weights.layers[layer];
    let t = x.shape()[0];
    if x.shape() != [t, cfg.hidden] || positions.len() != t {
        return Err(PopError::Dimension {
            op: "attention_probe",
            lhs: x.shape().to_vec(),
            rhs: vec![positions.len(), cfg.hidden],
        });
    }

    let normed = rmsnorm(x, &lw.attn_norm, NORM_EPS)?;
    let (k_new, v_new) = kv_from_normed(weights, &normed, layer, positions)?;
    let (k_past, v_past, past_pos) = cache.layer_view(layer)?;
    let (k_all, v_all, k_pos) = if past_pos.is_empty() {
        (k_new, v_new, positions.to_vec())
    } else {
        let mut pos = past_pos;
        pos.extend_from_slice(positions);
        (
            concat_rows(&[k_past, k_new])?,
            concat_rows(&[v_past, v_new])?,
            pos,
        )
    };

    let q = matmul(&normed, &lw.wq)?.reshape(&[t, cfg.num_heads, cfg.head_dim])?;
    let q = rope_apply(&q, positions, cfg.rope_theta)?;
    let attn = attention(cfg, &q, &k_all, &v_all, positions, &k_pos)?;
    matmul(&attn, &lw.wo)
}

/// Final norm + output head over every row of a hidden-state block.
pub fn logits_from_hidden(weights: &ModelWeights, hidden: &Tensor) -> Result<Tensor> {
    let normed = rmsnorm(hidden, &weights.final_norm, NORM_EPS)?;
    matmul(&normed, &weights.output_head)
}

fn check_chunk(
    weights: &ModelWeights,
    tokens: &[u32],
    positions: &[usize],
) -> Result<()> {
    if tokens.is_empty() {
        return Err(PopError::Contract("forward: empty token chunk".into()));
    }
    if tokens.len() != positions.len() {
        return Err(PopError::Contract(format!(
            "forward: {} tokens vs {} positions",
            tokens.len(),
            positions.len()
        )));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= weights.config.max_seq) {
        return Err(PopError::Capacity(format!(
            "position {p} exceeds max_seq {}",
            weights.config.max_seq
        )));
    }
    Ok(())
}

/// Runs one chunk of tokens through the stack under per-layer modes,
/// appending to the cache, and returns the final hidden states [t×d].
/// `Full` for every layer is the ordinary forward pass.
pub fn forward_chunk(
    weights: &ModelWeights,
    tokens: &[u32],
    positions: &[usize],
    cache: &mut KVCache,
    modes: &[LayerMode],
) -> Result<Tensor> {
    check_chunk(weights, tokens, positions)?;
    if modes.len() != weights.config.num_layers {
        return Err(PopError::Contract(format!(
            "forward: {} layer modes for {} layers",
            modes.len(),
            weights.config.num_layers
        )));
    }
    let ones = Tensor::full(&[tokens.len()], 1.0);
    let mut x = embedding_lookup(&weights.token_embedding, tokens)?;
    for (layer, &mode) in modes.iter().enumerate() {
        match mode {
            LayerMode::Full => {
                x = layer_forward_rows(weights, &x, layer, cache, &ones, positions)?;
            }
            LayerMode::KvOnly => {
                let (k, v) = kv_project(weights, &x, layer, positions)?;
                cache.append(layer, &k, &v, positions)?;
            }
            LayerMode::Skipped => {}
        }
    }
    Ok(x)
}

enum Gates<'a> {
    Plain(&'a GateSchedule),
    Tracked(&'a TrackedGates),
}

fn teacher_forced_core(
    weights: &ModelWeights,
    tokens: &[u32],
    gates: Gates<'_>,
) -> Result<Tensor> {
    let cfg = &weights.config;
    let t = tokens.len();
    if t == 0 {
        return Err(PopError::Contract("teacher-forced forward: empty input".into()));
    }
    if t > cfg.max_seq {
        return Err(PopError::Capacity(format!(
            "sequence length {t} exceeds max_seq {}",
            cfg.max_seq
        )));
    }
    let prompt_len = match &gates {
        Gates::Plain(g) => {
            g.validate(cfg.num_layers, t)?;
            g.prompt_len
        }
        Gates::Tracked(g) => {
            g.validate(cfg.num_layers, t)?;
            g.prompt_len
        }
    };

    // Stage masks: rows 0..N−1 are prefill-gated, rows N−1.. decode-gated.
    let boundary = prompt_len - 1;
    let masks = if matches!(gates, Gates::Tracked(_)) {
        let mut pre = vec![0.0; t];
        let mut dec = vec![0.0; t];
        for i in 0..t {
            if i < boundary {
                pre[i] = 1.0;
            } else {
                dec[i] = 1.0;
            }
        }
        Some((
            Tensor::from_vec(&[t], pre)?,
            Tensor::from_vec(&[t], dec)?,
        ))
    } else {
        None
    };

    let positions: Vec<usize> = (0..t).collect();
    let mut cache = KVCache::new(cfg);
    let mut x = embedding_lookup(&weights.token_embedding, tokens)?;
    for layer in 0..cfg.num_layers {
        let rows = match &gates {
            Gates::Plain(g) => {
                let mut r = vec![g.g_decode[layer]; t];
                r[..boundary].fill(g.g_prefill[layer]);
                Tensor::from_vec(&[t], r)?
            }
            Gates::Tracked(g) => {
                let (pre, dec) = masks.as_ref().unwrap();
                add(
                    &mul(pre, &g.prefill[layer])?,
                    &mul(dec, &g.decode[layer])?,
                )?
            }
        };
        x = layer_forward_rows(weights, &x, layer, &mut cache, &rows, &positions)?;
    }
    logits_from_hidden(weights, &x)
}

/// Full-sequence causal pass with per-position stage gates; logits at
/// every position. Untracked gates — for the differentiable variant see
/// [`forward_teacher_forced_tracked`].
pub fn forward_teacher_forced(
    weights: &ModelWeights,
    tokens: &[u32],
    gates: &GateSchedule,
) -> Result<Tensor> {
    teacher_forced_core(weights, tokens, Gates::Plain(gates))
}

/// As [`forward_teacher_forced`], but the gates are tape leaves and the
/// logits stay connected to them. Must run inside a recording scope for
/// the gradients to be retrievable.
pub fn forward_teacher_forced_tracked(
    weights: &ModelWeights,
    tokens: &[u32],
    gates: &TrackedGates,
) -> Result<Tensor> {
    teacher_forced_core(weights, tokens, Gates::Tracked(gates))
}
