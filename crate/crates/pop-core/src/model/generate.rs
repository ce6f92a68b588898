use super::cache::KVCache;
use super::forward::{forward_chunk, logits_from_hidden, LayerMode};
use super::tokenizer::EOS;
use super::weights::ModelWeights;
use crate::error::{PopError, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Draws a token from one logits row. Temperature 0 is argmax with ties
/// broken toward the lowest id; otherwise softmax(logits/T) sampled by
/// inverse CDF from one uniform draw.
pub(crate) fn sample_token(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> u32 {
    if temperature == 0.0 {
        let mut best = 0usize;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best as u32;
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits
        .iter()
        .map(|&v| ((v - max) / temperature).exp())
        .collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    probs.len() as u32 - 1
}

pub(crate) fn check_generation_args(
    weights: &ModelWeights,
    prompt: &[u32],
    temperature: f64,
) -> Result<()> {
    if prompt.is_empty() {
        return Err(PopError::Contract("generate: empty prompt".into()));
    }
    if prompt.len() >= weights.config.max_seq {
        return Err(PopError::Capacity(format!(
            "prompt length {} leaves no room under max_seq {}",
            prompt.len(),
            weights.config.max_seq
        )));
    }
    if temperature < 0.0 {
        return Err(PopError::Config(format!(
            "temperature must be ≥ 0, got {temperature}"
        )));
    }
    Ok(())
}

/// Autoregressive generation with a KV cache and the full layer stack.
/// Returns the generated ids (EOS included when it stops the run); the
/// prompt is not echoed. Generation also stops at the model's sequence
/// capacity.
pub fn generate(
    weights: &ModelWeights,
    prompt: &[u32],
    max_new: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<u32>> {
    check_generation_args(weights, prompt, temperature)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache = KVCache::new(&weights.config);
    let full = vec![LayerMode::Full; weights.config.num_layers];

    let positions: Vec<usize> = (0..prompt.len()).collect();
    let hidden = forward_chunk(weights, prompt, &positions, &mut cache, &full)?;
    let last = hidden.slice_rows(prompt.len() - 1, prompt.len())?;
    let mut logits = logits_from_hidden(weights, &last)?;

    let budget = max_new.min(weights.config.max_seq - prompt.len());
    let mut out = Vec::with_capacity(budget);
    for step in 0..budget {
        let tok = sample_token(logits.data(), temperature, &mut rng);
        out.push(tok);
        if tok == EOS || step + 1 == budget {
            break;
        }
        let pos = prompt.len() + step;
        let hidden = forward_chunk(weights, &[tok], &[pos], &mut cache, &full)?;
        logits = logits_from_hidden(weights, &hidden)?;
    }
    Ok(out)
}

/// Next-token logits for a whole prefix without any cache — the oracle the
/// cached path is tested against.
pub fn next_logits_uncached(weights: &ModelWeights, prefix: &[u32]) -> Result<Tensor> {
    let mut cache = KVCache::new(&weights.config);
    let full = vec![LayerMode::Full; weights.config.num_layers];
    let positions: Vec<usize> = (0..prefix.len()).collect();
    let hidden = forward_chunk(weights, prefix, &positions, &mut cache, &full)?;
    let last = hidden.slice_rows(prefix.len() - 1, prefix.len())?;
    logits_from_hidden(weights, &last)
}
