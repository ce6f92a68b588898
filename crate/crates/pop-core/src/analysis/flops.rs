//! Analytic FLOP accounting for prefill.
//!
//! Matmuls count 2·m·k·n. Attention score/value terms are causal sums
//! (position i touches i+1 keys). Norms, rotations, activations, and
//! residual adds are linear in width; they are counted with documented
//! per-element costs and itemized under `aux` so the headline ratios —
//! the K/V share of a layer and the theoretical pruning speedup — can be
//! read off the quadratic GEMM terms alone.

use crate::model::ModelConfig;
use crate::pop::PruningPlan;
use serde::{Deserialize, Serialize};

/// Per-element cost of an RMS norm (square, accumulate, scale, weight).
const NORM_COST: u64 = 4;
/// Per-element cost of a rotary rotation (two mults and an add, applied
/// pairwise).
const ROPE_COST: u64 = 3;
/// Per-element cost of a numerically-stable softmax (subtract, exp,
/// accumulate, divide).
const SOFTMAX_COST: u64 = 4;
/// Per-element cost of SiLU (sigmoid ≈ 4 plus the gating multiply).
const SILU_COST: u64 = 5;

/// FLOPs of one transformer layer over a whole prefill.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub q: u64,
    pub k: u64,
    pub v: u64,
    pub o: u64,
    pub attn_score: u64,
    pub attn_value: u64,
    pub ffn: u64,
    /// Norms, RoPE, softmax, SiLU, elementwise gate, residual adds.
    pub aux: u64,
}

impl LayerFlops {
    /// Weight GEMMs only: the sequence-length-proportional terms the K/V
    /// fraction is defined over.
    pub fn weight_gemm_total(&self) -> u64 {
        self.q + self.k + self.v + self.o + self.ffn
    }

    pub fn total(&self) -> u64 {
        self.weight_gemm_total() + self.attn_score + self.attn_value + self.aux
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub seq_len: usize,
    pub num_layers: usize,
    /// 1-based, like every external layer reference.
    pub skipped_layers: Vec<usize>,
    pub indep_kv: bool,
    pub per_layer: LayerFlops,
    /// Cost of a skipped layer's independent K/V projection (norm + two
    /// GEMMs + rotation) over the prefill.
    pub kv_only_per_layer: u64,
    pub final_norm: u64,
    pub head: u64,
    pub full_total: u64,
    pub pop_total: u64,
    /// (k + v) / weight-GEMM layer total; sequence-length independent.
    pub kv_fraction: f64,
    /// full_total / pop_total.
    pub theoretical_speedup: f64,
}

/// Counts prefill FLOPs for a config under a plan at one sequence length.
pub fn count_flops(config: &ModelConfig, plan: &PruningPlan, seq_len: usize) -> FlopsReport {
    let t = seq_len as u64;
    let d = config.hidden as u64;
    let kv_dim = config.kv_dim() as u64;
    let heads = config.num_heads as u64;
    let head_dim = config.head_dim as u64;
    let ffn = config.ffn_dim as u64;
    let vocab = config.vocab as u64;
    // Causal key-visit count: Σ_{i=0..T−1} (i+1).
    let pairs = t * (t + 1) / 2;

    let per_layer = LayerFlops {
        q: 2 * t * d * d,
        k: 2 * t * d * kv_dim,
        v: 2 * t * d * kv_dim,
        o: 2 * t * d * d,
        attn_score: 2 * head_dim * pairs * heads,
        attn_value: 2 * head_dim * pairs * heads,
        ffn: 6 * t * d * ffn,
        aux: t * (2 * NORM_COST * d + ROPE_COST * (d + kv_dim) + SILU_COST * ffn + ffn + 2 * d)
            + SOFTMAX_COST * pairs * heads,
    };
    let kv_only_per_layer =
        t * (NORM_COST * d + 2 * 2 * d * kv_dim + ROPE_COST * kv_dim);

    let final_norm = t * NORM_COST * d;
    let head = 2 * t * d * vocab;
    let full_total = config.num_layers as u64 * per_layer.total() + final_norm + head;

    let skipped = plan.skip_set.len() as u64;
    let replacement = if plan.indep_kv { kv_only_per_layer } else { 0 };
    let pop_total = full_total - skipped * (per_layer.total() - replacement);

    FlopsReport {
        seq_len,
        num_layers: config.num_layers,
        skipped_layers: plan.skip_set.iter().map(|l| l + 1).collect(),
        indep_kv: plan.indep_kv,
        per_layer,
        kv_only_per_layer,
        final_norm,
        head,
        full_total,
        pop_total,
        kv_fraction: (per_layer.k + per_layer.v) as f64 / per_layer.weight_gemm_total() as f64,
        theoretical_speedup: full_total as f64 / pop_total as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pop::{make_plan, PruningPlan, Strategy};

    fn llama3_8b() -> ModelConfig {
        ModelConfig {
            num_layers: 32,
            hidden: 4096,
            num_heads: 32,
            num_kv_heads: 8,
            head_dim: 128,
            ffn_dim: 14336,
            vocab: 128256,
            max_seq: 8192,
            rope_theta: 500000.0,
        }
    }

    #[test]
    fn kv_share_of_an_8b_layer_is_just_under_four_percent() {
        let r = count_flops(&llama3_8b(), &PruningPlan::none(), 2048);
        // Per-token weight GEMMs: K+V = 2·4096·1024·2 = 16,777,216 against
        // a layer total of 436,207,616.
        let expected = 16_777_216.0 / 436_207_616.0;
        assert!((r.kv_fraction - expected).abs() < 1e-12, "{}", r.kv_fraction);
        assert!(r.kv_fraction < 0.05, "the K/V share must stay below 5%");
        assert_eq!(r.per_layer.k + r.per_layer.v, 2048 * 16_777_216);
        assert_eq!(r.per_layer.weight_gemm_total(), 2048 * 436_207_616);
    }

    #[test]
    fn empty_skip_set_changes_nothing() {
        let r = count_flops(&llama3_8b(), &PruningPlan::none(), 512);
        assert_eq!(r.pop_total, r.full_total);
        assert_eq!(r.theoretical_speedup, 1.0);
    }

    #[test]
    fn deep_third_speedup_on_8b_brackets_the_measured_value() {
        let plan = make_plan(32, 1.0 / 3.0, Strategy::Deep, None).unwrap();
        let r = count_flops(&llama3_8b(), &plan, 2048);
        assert!(
            (1.3..=1.6).contains(&r.theoretical_speedup),
            "speedup {} outside [1.3, 1.6]",
            r.theoretical_speedup
        );
    }

    #[test]
    fn totals_add_up_with_no_double_counting() {
        let cfg = llama3_8b();
        let plan = make_plan(32, 0.5, Strategy::Deep, None).unwrap();
        let r = count_flops(&cfg, &plan, 333);
        let layer_sum = r.per_layer.q
            + r.per_layer.k
            + r.per_layer.v
            + r.per_layer.o
            + r.per_layer.attn_score
            + r.per_layer.attn_value
            + r.per_layer.ffn
            + r.per_layer.aux;
        assert_eq!(layer_sum, r.per_layer.total());
        assert_eq!(
            r.full_total,
            32 * layer_sum + r.final_norm + r.head,
            "full total must be the itemized sum"
        );
        assert_eq!(
            r.pop_total,
            r.full_total - 16 * (layer_sum - r.kv_only_per_layer),
            "pruned total must remove exactly the skipped layers' surplus"
        );
    }

    #[test]
    fn disabling_independent_kv_removes_the_projection_cost_too() {
        let cfg = llama3_8b();
        let mut plan = make_plan(32, 0.5, Strategy::Deep, None).unwrap();
        let with = count_flops(&cfg, &plan, 128);
        plan.indep_kv = false;
        let without = count_flops(&cfg, &plan, 128);
        assert_eq!(
            with.pop_total - without.pop_total,
            16 * with.kv_only_per_layer
        );
    }

    #[test]
    fn report_roundtrips_through_json() {
        let plan = make_plan(32, 1.0 / 3.0, Strategy::Deep, None).unwrap();
        let r = count_flops(&llama3_8b(), &plan, 64);
        let json = serde_json::to_string(&r).unwrap();
        let back: FlopsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        // floor(32/3) = 10 deep layers: 23..=32 in external numbering.
        assert!(json.contains("\"skipped_layers\":[23,"), "{json}");
    }
}
