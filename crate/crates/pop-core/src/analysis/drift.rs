//! Representation-drift diagnostics.
//!
//! Skipping layers during prefill changes the internal states the decode
//! stage later consumes. This module quantifies how much, by running the
//! full model and the pruned pipeline over identical prompts and comparing
//! three things per layer with cosine similarity:
//!
//! * the hidden state entering the layer at each strictly-prefill position,
//! * the cached key and value rows the two pipelines deposited, and
//! * the attention output the layer produces at the first decode step
//!   (the last prompt position), each pipeline attending over its own cache.
//!
//! The attention-output column is the interesting one: cached values can
//! drift substantially while the attention result stays close to the full
//! model's, which is the property that makes prefill-only skipping viable.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PopError, Result};
use crate::model::{
    attention_probe, kv_project, layer_forward, KVCache, LayerMode, ModelWeights,
};
use crate::pop::PruningPlan;
use crate::tensor::{embedding_lookup, Tensor};

/// Cosine similarities for one layer, averaged over prompts (and, for the
/// first three columns, over positions). `layer` is 1-based.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerDrift {
    pub layer: usize,
    pub skipped: bool,
    /// Hidden state entering the layer, strictly-prefill positions.
    pub hidden: f64,
    /// Cached key rows at positions both pipelines cached.
    pub k: f64,
    /// Cached value rows at positions both pipelines cached.
    pub v: f64,
    /// Attention-block output at the first decode step.
    pub attn_out: f64,
}

/// Per-layer drift between the pruned pipeline and the full model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftTrace {
    pub num_prompts: usize,
    pub layers: Vec<LayerDrift>,
}

/// Cosine similarity with the zero-vector convention: two zero vectors are
/// identical (1.0), a zero against a non-zero shares nothing (0.0).
pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len(), "cosine over equal-length vectors");
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        (false, false) => dot / (na.sqrt() * nb.sqrt()),
    }
}

/// One pipeline's instrumented pass over a prompt: hidden states entering
/// every layer at the prefix positions, probed attention outputs at the
/// boundary position, and the final cache.
struct Walk {
    hidden_prefix: Vec<Tensor>,
    attn_boundary: Vec<Tensor>,
    cache: KVCache,
}

fn walk(
    weights: &ModelWeights,
    prompt: &[u32],
    prefix_modes: &[LayerMode],
    boundary_modes: &[LayerMode],
) -> Result<Walk> {
    let n = prompt.len();
    let prefix_positions: Vec<usize> = (0..n - 1).collect();
    let mut cache = KVCache::new(&weights.config);

    let mut hidden_prefix = Vec::with_capacity(prefix_modes.len());
    let mut x = embedding_lookup(&weights.token_embedding, &prompt[..n - 1])?;
    for (layer, &mode) in prefix_modes.iter().enumerate() {
        hidden_prefix.push(x.clone());
        match mode {
            LayerMode::Full => {
                x = layer_forward(weights, &x, layer, &mut cache, 1.0, &prefix_positions)?;
            }
            LayerMode::KvOnly => {
                let (k, v) = kv_project(weights, &x, layer, &prefix_positions)?;
                cache.append(layer, &k, &v, &prefix_positions)?;
            }
            LayerMode::Skipped => {}
        }
    }

    let boundary = [n - 1];
    let mut attn_boundary = Vec::with_capacity(boundary_modes.len());
    let mut xb = embedding_lookup(&weights.token_embedding, &prompt[n - 1..])?;
    for (layer, &mode) in boundary_modes.iter().enumerate() {
        // Probe before executing the layer: same cache state the layer's own
        // attention will see, without mutating anything.
        attn_boundary.push(attention_probe(weights, &xb, layer, &cache, &boundary)?);
        match mode {
            LayerMode::Full => {
                xb = layer_forward(weights, &xb, layer, &mut cache, 1.0, &boundary)?;
            }
            LayerMode::KvOnly => {
                let (k, v) = kv_project(weights, &xb, layer, &boundary)?;
                cache.append(layer, &k, &v, &boundary)?;
            }
            LayerMode::Skipped => {}
        }
    }

    Ok(Walk {
        hidden_prefix,
        attn_boundary,
        cache,
    })
}

/// Per-prompt similarity sums, one slot per layer.
struct PromptSims {
    hidden: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
}

/// Mean cosine over the rows of two equal-shape [rows × width] tensors.
fn mean_row_cosine(a: &Tensor, b: &Tensor) -> f64 {
    let rows = a.shape()[0];
    let width = a.numel() / rows;
    let (da, db) = (a.data(), b.data());
    let mut sum = 0.0;
    for r in 0..rows {
        sum += cosine(&da[r * width..(r + 1) * width], &db[r * width..(r + 1) * width]);
    }
    sum / rows as f64
}

/// Mean cosine over cache rows present in both pipelines' caches for a
/// layer. Rows are matched by position; the pruned cache may hold a subset
/// of the full cache's positions (e.g. only the boundary row when the
/// independent KV projection is disabled).
fn cache_row_cosine(full: &KVCache, pruned: &KVCache, layer: usize) -> Result<(f64, f64)> {
    let (k_full, v_full, pos_full) = full.layer_view(layer)?;
    let (k_pruned, v_pruned, pos_pruned) = pruned.layer_view(layer)?;
    let width = if pos_full.is_empty() {
        0
    } else {
        k_full.numel() / pos_full.len()
    };
    let (kf, vf) = (k_full.data(), v_full.data());
    let (kp, vp) = (k_pruned.data(), v_pruned.data());

    let mut k_sum = 0.0;
    let mut v_sum = 0.0;
    let mut matched = 0usize;
    let mut j = 0usize;
    for (i, &p) in pos_full.iter().enumerate() {
        while j < pos_pruned.len() && pos_pruned[j] < p {
            j += 1;
        }
        if j < pos_pruned.len() && pos_pruned[j] == p {
            k_sum += cosine(&kf[i * width..(i + 1) * width], &kp[j * width..(j + 1) * width]);
            v_sum += cosine(&vf[i * width..(i + 1) * width], &vp[j * width..(j + 1) * width]);
            matched += 1;
        }
    }
    if matched == 0 {
        return Err(PopError::Contract(format!(
            "layer {} has no cached positions common to both pipelines; \
             disable at most one of boundary handling and independent KV",
            layer + 1
        )));
    }
    Ok((k_sum / matched as f64, v_sum / matched as f64))
}

fn prompt_sims(
    weights: &ModelWeights,
    plan: &PruningPlan,
    prompt: &[u32],
) -> Result<PromptSims> {
    let num_layers = weights.config.num_layers;
    let full_modes = vec![LayerMode::Full; num_layers];
    let pruned_prefix = plan.prefill_modes(num_layers);
    let pruned_boundary = if plan.boundary_handling {
        full_modes.clone()
    } else {
        pruned_prefix.clone()
    };

    let full = walk(weights, prompt, &full_modes, &full_modes)?;
    let pruned = walk(weights, prompt, &pruned_prefix, &pruned_boundary)?;

    let mut sims = PromptSims {
        hidden: Vec::with_capacity(num_layers),
        k: Vec::with_capacity(num_layers),
        v: Vec::with_capacity(num_layers),
        attn: Vec::with_capacity(num_layers),
    };
    for layer in 0..num_layers {
        sims.hidden.push(mean_row_cosine(
            &full.hidden_prefix[layer],
            &pruned.hidden_prefix[layer],
        ));
        let (k, v) = cache_row_cosine(&full.cache, &pruned.cache, layer)?;
        sims.k.push(k);
        sims.v.push(v);
        sims.attn.push(mean_row_cosine(
            &full.attn_boundary[layer],
            &pruned.attn_boundary[layer],
        ));
    }
    Ok(sims)
}

/// Compares the pruned pipeline against the full model on `prompts` and
/// averages the per-layer similarities over them. Prompts must each be at
/// least two tokens so there is a prefill region and a decode step.
/// Parallelizes over prompts; the result is independent of worker count.
pub fn drift_diagnostics(
    weights: &ModelWeights,
    plan: &PruningPlan,
    prompts: &[Vec<u32>],
) -> Result<DriftTrace> {
    if prompts.is_empty() {
        return Err(PopError::Data("drift diagnostics need at least one prompt".into()));
    }
    if let Some(short) = prompts.iter().position(|p| p.len() < 2) {
        return Err(PopError::Data(format!(
            "prompt {short} has fewer than 2 tokens; drift needs a prefill \
             region and a decode step"
        )));
    }
    plan.validate(weights.config.num_layers)?;

    let per_prompt: Vec<PromptSims> = prompts
        .par_iter()
        .map(|p| prompt_sims(weights, plan, p))
        .collect::<Result<_>>()?;

    let num_layers = weights.config.num_layers;
    let scale = 1.0 / prompts.len() as f64;
    let layers = (0..num_layers)
        .map(|l| LayerDrift {
            layer: l + 1,
            skipped: plan.is_skipped(l),
            hidden: per_prompt.iter().map(|s| s.hidden[l]).sum::<f64>() * scale,
            k: per_prompt.iter().map(|s| s.k[l]).sum::<f64>() * scale,
            v: per_prompt.iter().map(|s| s.v[l]).sum::<f64>() * scale,
            attn_out: per_prompt.iter().map(|s| s.attn[l]).sum::<f64>() * scale,
        })
        .collect();
    Ok(DriftTrace {
        num_prompts: prompts.len(),
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_chunk, init_model, ModelConfig};
    use crate::pop::{make_plan, pruned_prefill, Strategy};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_weights(num_layers: usize) -> ModelWeights {
        let config = ModelConfig {
            num_layers,
            hidden: 32,
            num_heads: 2,
            num_kv_heads: 2,
            head_dim: 16,
            ffn_dim: 64,
            vocab: 259,
            max_seq: 256,
            rope_theta: 10000.0,
        };
        init_model(&config, 5).unwrap()
    }

    fn test_prompts(count: usize, len: usize, seed: u64) -> Vec<Vec<u32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let mut p = vec![crate::model::tokenizer::BOS];
                for _ in 1..len {
                    p.push(crate::model::tokenizer::BYTE_OFFSET + rng.random_range(0..256u32));
                }
                p
            })
            .collect()
    }

    #[test]
    fn cosine_of_a_vector_with_itself_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let v: Vec<f64> = (0..37).map(|_| rng.random_range(-3.0..3.0)).collect();
            assert!(
                (cosine(&v, &v) - 1.0).abs() <= 1e-12,
                "self-similarity must be 1"
            );
            let doubled: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
            assert!(
                (cosine(&v, &doubled) - 1.0).abs() <= 1e-12,
                "cosine ignores scale"
            );
        }
    }

    #[test]
    fn cosine_zero_vector_conventions() {
        let z = [0.0; 4];
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(cosine(&z, &z), 1.0, "two zero vectors count as identical");
        assert_eq!(cosine(&z, &v), 0.0, "zero against non-zero counts as unrelated");
        assert!(
            (cosine(&[1.0, 0.0], &[-1.0, 0.0]) + 1.0).abs() <= 1e-12,
            "antiparallel is −1"
        );
    }

    #[test]
    fn empty_skip_set_reports_unit_similarity_everywhere() {
        let weights = test_weights(3);
        let trace =
            drift_diagnostics(&weights, &PruningPlan::none(), &test_prompts(3, 12, 1)).unwrap();
        assert_eq!(trace.num_prompts, 3);
        assert_eq!(trace.layers.len(), 3);
        for ld in &trace.layers {
            assert!(!ld.skipped, "nothing is skipped under the empty plan");
            for (name, val) in [
                ("hidden", ld.hidden),
                ("k", ld.k),
                ("v", ld.v),
                ("attn_out", ld.attn_out),
            ] {
                assert!(
                    (val - 1.0).abs() <= 1e-9,
                    "layer {} {name} similarity {val} should be 1 under the empty plan",
                    ld.layer
                );
            }
        }
    }

    #[test]
    fn similarities_stay_in_range_and_flag_the_skipped_layers() {
        let weights = test_weights(6);
        let plan = make_plan(6, 1.0 / 3.0, Strategy::Deep, None).unwrap();
        let trace = drift_diagnostics(&weights, &plan, &test_prompts(4, 16, 2)).unwrap();
        for (i, ld) in trace.layers.iter().enumerate() {
            assert_eq!(ld.layer, i + 1, "layers are reported 1-based in order");
            assert_eq!(ld.skipped, plan.is_skipped(i), "skip flag mirrors the plan");
            for val in [ld.hidden, ld.k, ld.v, ld.attn_out] {
                assert!(
                    (-1.0..=1.0 + 1e-12).contains(&val),
                    "similarity {val} out of [−1, 1] at layer {}",
                    ld.layer
                );
            }
        }
    }

    #[test]
    fn skipping_the_first_layer_leaves_its_own_input_and_kv_untouched() {
        let weights = test_weights(4);
        // Skip layer 1 only: its input is the embedding (shared by both
        // pipelines) and its independent KV is the same computation the full
        // layer performs, so everything at layer 1 matches exactly; the
        // pass-through shows up from layer 2 onward.
        let plan = make_plan(4, 0.25, Strategy::Shallow, None).unwrap();
        assert_eq!(plan.skip_set, vec![0]);
        let trace = drift_diagnostics(&weights, &plan, &test_prompts(2, 10, 3)).unwrap();
        let first = &trace.layers[0];
        assert!((first.hidden - 1.0).abs() <= 1e-12, "embedding input is shared");
        assert!((first.k - 1.0).abs() <= 1e-12, "prefix K identical at the skipped layer");
        assert!((first.v - 1.0).abs() <= 1e-12, "prefix V identical at the skipped layer");
        let second = &trace.layers[1];
        assert!(
            second.hidden < 1.0 - 1e-9,
            "layer 2 sees a pass-through residual, similarity {} should drop",
            second.hidden
        );
    }

    #[test]
    fn instrumented_walk_builds_the_same_cache_as_the_pipeline() {
        let weights = test_weights(5);
        let plan = make_plan(5, 0.4, Strategy::Deep, None).unwrap();
        let prompt = &test_prompts(1, 14, 7)[0];
        let n = prompt.len();

        let prefix_modes = plan.prefill_modes(5);
        let full = vec![LayerMode::Full; 5];
        let walked = walk(&weights, prompt, &prefix_modes, &full).unwrap();

        let (mut cache, _) = pruned_prefill(&weights, &plan, &prompt[..n - 1]).unwrap();
        forward_chunk(&weights, &prompt[n - 1..], &[n - 1], &mut cache, &full).unwrap();

        for layer in 0..5 {
            let (k_a, v_a, pos_a) = walked.cache.layer_view(layer).unwrap();
            let (k_b, v_b, pos_b) = cache.layer_view(layer).unwrap();
            assert_eq!(pos_a, pos_b, "cached positions match at layer {layer}");
            assert_eq!(k_a.data(), k_b.data(), "keys bitwise-match at layer {layer}");
            assert_eq!(v_a.data(), v_b.data(), "values bitwise-match at layer {layer}");
        }
    }

    #[test]
    fn disabling_both_boundary_and_indep_kv_is_rejected() {
        let weights = test_weights(4);
        let mut plan = make_plan(4, 0.25, Strategy::Deep, None).unwrap();
        plan.indep_kv = false;
        plan.boundary_handling = false;
        let err = drift_diagnostics(&weights, &plan, &test_prompts(1, 8, 4)).unwrap_err();
        assert!(
            matches!(err, PopError::Contract(_)),
            "skipped layer with an empty cache cannot be compared, got {err:?}"
        );
    }

    #[test]
    fn short_prompts_and_empty_prompt_lists_are_data_errors() {
        let weights = test_weights(3);
        let err = drift_diagnostics(&weights, &PruningPlan::none(), &[]).unwrap_err();
        assert!(matches!(err, PopError::Data(_)), "empty list, got {err:?}");
        let err =
            drift_diagnostics(&weights, &PruningPlan::none(), &[vec![1]]).unwrap_err();
        assert!(matches!(err, PopError::Data(_)), "1-token prompt, got {err:?}");
    }

    #[test]
    fn results_do_not_depend_on_worker_count() {
        let weights = test_weights(4);
        let plan = make_plan(4, 0.5, Strategy::Deep, None).unwrap();
        let prompts = test_prompts(3, 12, 6);
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| drift_diagnostics(&weights, &plan, &prompts).unwrap())
        };
        let a = run(1);
        let b = run(2);
        for (x, y) in a.layers.iter().zip(&b.layers) {
            assert_eq!(x.hidden.to_bits(), y.hidden.to_bits(), "hidden layer {}", x.layer);
            assert_eq!(x.k.to_bits(), y.k.to_bits(), "k layer {}", x.layer);
            assert_eq!(x.v.to_bits(), y.v.to_bits(), "v layer {}", x.layer);
            assert_eq!(x.attn_out.to_bits(), y.attn_out.to_bits(), "attn layer {}", x.layer);
        }
    }
}
