//! Layer importance from virtual residual gates.
//!
//! Each layer gets a gate g_l = 1 multiplying its residual branches; a
//! layer's importance is the second moment of the loss gradient at that
//! gate, E[(∂L/∂g_l)²], estimated over calibration samples whose target
//! continuations the model samples from itself. Self-sampled targets make
//! the *first* moment vanish in expectation, which is what licenses the
//! squared-gradient (Fisher-style) reading; the profile stores gradient
//! means and standard errors so that claim is auditable from the output.
//!
//! Stage-aware estimation splits each gate in two — one value for prompt
//! positions before the last, one for the rest — so a layer can be cheap
//! to remove while the prompt is being read yet critical while tokens are
//! being produced. A brute-force oracle (actually zeroing one gate and
//! re-measuring the loss) grounds the gradient estimates.

use crate::error::{PopError, Result};
use crate::model::{
    forward_teacher_forced, forward_teacher_forced_tracked, generate, tokenizer, weights_hash,
    GateSchedule, ModelWeights, TrackedGates,
};
use crate::tensor::{cross_entropy, tape, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Which gate region of a teacher-forced pass is being manipulated:
/// `Prefill` covers prompt positions `0..N−1`, `Decode` covers position
/// `N−1` (the last prompt token) onward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prefill,
    Decode,
}

/// One calibration item: a BOS-prefixed prompt and a target continuation,
/// either provided (fixed text) or sampled from the model by the
/// estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibSample {
    pub prompt: Vec<u32>,
    pub provided_response: Option<Vec<u32>>,
    pub sampled_response: Option<Vec<u32>>,
}

impl CalibSample {
    pub fn from_prompt(prompt: Vec<u32>) -> Self {
        Self {
            prompt,
            provided_response: None,
            sampled_response: None,
        }
    }

    /// Provided targets win over sampled ones: fixed-text calibration is a
    /// deliberate regime (it breaks the vanishing-mean property on purpose).
    pub fn response(&self) -> Option<&[u32]> {
        self.provided_response
            .as_deref()
            .or(self.sampled_response.as_deref())
    }

    /// Prompt length N.
    pub fn prompt_len(&self) -> usize {
        self.prompt.len()
    }

    /// Prompt ++ response, the full teacher-forced token sequence.
    pub fn tokens(&self) -> Result<Vec<u32>> {
        let resp = self.response().ok_or_else(|| {
            PopError::Contract("calibration sample has no response (provided or sampled)".into())
        })?;
        let mut t = self.prompt.clone();
        t.extend_from_slice(resp);
        Ok(t)
    }

    fn validate(&self, max_seq: usize) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(PopError::Contract("calibration prompt is empty".into()));
        }
        let t = self.tokens()?.len();
        if t <= self.prompt.len() {
            return Err(PopError::Contract("calibration response is empty".into()));
        }
        if t > max_seq {
            return Err(PopError::Capacity(format!(
                "calibration sample length {t} exceeds max_seq {max_seq}"
            )));
        }
        Ok(())
    }
}

/// Target-sampling knobs. Temperature 1.0 samples the model's own
/// distribution exactly, which the vanishing-first-moment argument needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub max_len: usize,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            max_len: 64,
        }
    }
}

/// Samples a target continuation from the full, ungated model. Greedy
/// targets (temperature 0) are rejected: the squared-gradient estimator is
/// only unbiased when targets come from the model distribution itself.
pub fn sample_targets(
    weights: &ModelWeights,
    prompt: &[u32],
    max_len: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<u32>> {
    if temperature <= 0.0 {
        return Err(PopError::Config(format!(
            "target sampling requires temperature > 0, got {temperature}"
        )));
    }
    if max_len == 0 {
        return Err(PopError::Config("target sampling requires max_len > 0".into()));
    }
    generate(weights, prompt, max_len, temperature, seed)
}

/// Per-layer loss gradients at the gates for one calibration sample. With
/// `stage_aware = false` a single gate spans both regions and its gradient
/// is reported in both columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateGradients {
    pub prefill: Vec<f64>,
    pub decode: Vec<f64>,
    /// True when the prompt is a single token: there are no prefill-gated
    /// positions and every prefill gradient is structurally zero.
    pub prefill_inactive: bool,
}

/// Targets and mask selecting exactly the response predictions: logit rows
/// `N−1..T−2` predict tokens `N..T−1`.
pub(crate) fn response_targets(tokens: &[u32], prompt_len: usize) -> (Vec<u32>, Vec<bool>) {
    let t = tokens.len();
    let mut targets = vec![0u32; t];
    let mut mask = vec![false; t];
    for i in prompt_len - 1..t - 1 {
        targets[i] = tokens[i + 1];
        mask[i] = true;
    }
    (targets, mask)
}

/// Summed response loss for one sample under a plain gate schedule.
pub fn response_loss(
    weights: &ModelWeights,
    tokens: &[u32],
    prompt_len: usize,
    gates: &GateSchedule,
) -> Result<f64> {
    let logits = forward_teacher_forced(weights, tokens, gates)?;
    let (targets, mask) = response_targets(tokens, prompt_len);
    cross_entropy(&logits, &targets, &mask)?.item()
}

/// One forward-backward pass giving ∂L/∂g for every layer gate, where L is
/// the summed response loss. Gates sit at 1, so the forward pass is the
/// ordinary full model.
pub fn gate_gradients(
    weights: &ModelWeights,
    sample: &CalibSample,
    stage_aware: bool,
) -> Result<GateGradients> {
    sample.validate(weights.config.max_seq)?;
    let tokens = sample.tokens()?;
    let n = sample.prompt_len();
    let num_layers = weights.config.num_layers;

    tape::with_tape(|| {
        let (prefill, decode): (Vec<Tensor>, Vec<Tensor>) = if stage_aware {
            (
                (0..num_layers)
                    .map(|_| tape::watch(&Tensor::scalar(1.0)))
                    .collect::<Result<_>>()?,
                (0..num_layers)
                    .map(|_| tape::watch(&Tensor::scalar(1.0)))
                    .collect::<Result<_>>()?,
            )
        } else {
            // One leaf per layer, placed in both stage slots: gradients
            // accumulate over the whole sequence.
            let shared: Vec<Tensor> = (0..num_layers)
                .map(|_| tape::watch(&Tensor::scalar(1.0)))
                .collect::<Result<_>>()?;
            (shared.clone(), shared)
        };
        let gates = TrackedGates {
            prefill: prefill.clone(),
            decode: decode.clone(),
            prompt_len: n,
        };
        let logits = forward_teacher_forced_tracked(weights, &tokens, &gates)?;
        let (targets, mask) = response_targets(&tokens, n);
        let loss = cross_entropy(&logits, &targets, &mask)?;
        let grads = tape::backward(&loss)?;
        Ok(GateGradients {
            prefill: prefill
                .iter()
                .map(|g| grads.wrt_scalar(g))
                .collect::<Result<_>>()?,
            decode: decode
                .iter()
                .map(|g| grads.wrt_scalar(g))
                .collect::<Result<_>>()?,
            prefill_inactive: n == 1,
        })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerImportance {
    /// 1-based layer number, matching every external interface.
    pub index: usize,
    pub prefill_score: f64,
    pub decode_score: f64,
    pub prefill_grad_mean: f64,
    pub decode_grad_mean: f64,
    pub prefill_grad_se: f64,
    pub decode_grad_se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceProfile {
    pub model_hash: String,
    pub stage_aware: bool,
    pub num_samples: usize,
    pub seed: u64,
    pub sampling: SamplingParams,
    pub layers: Vec<LayerImportance>,
    /// Raw per-sample gradients, kept only on request; the scores are the
    /// means of their squares and can be recomputed from them exactly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_sample_grads: Option<Vec<GateGradients>>,
}

impl ImportanceProfile {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("profile serializes");
        std::fs::write(path, json).map_err(|e| PopError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PopError::io(path, e))?;
        let profile: Self = serde_json::from_str(&text)
            .map_err(|e| PopError::Format(format!("importance profile: {e}")))?;
        profile.check()?;
        Ok(profile)
    }

    pub fn check(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(PopError::Format("importance profile has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.index != i + 1 {
                return Err(PopError::Format(format!(
                    "importance profile layers out of order: entry {i} has index {}",
                    l.index
                )));
            }
            if l.prefill_score < 0.0 || l.decode_score < 0.0 {
                return Err(PopError::Format(format!(
                    "importance profile layer {}: negative score",
                    l.index
                )));
            }
        }
        Ok(())
    }
}

/// Spreads (seed, sample index) into per-sample RNG seeds so results do
/// not depend on which worker handles which sample.
fn per_sample_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer.
    let mut z = seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mean_and_se(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Samples a continuation for every sample that still lacks a response and
/// stores it back, so later passes (oracles, ablations, sweeps) reuse the
/// exact same frozen targets. Samples that already have a response —
/// provided or previously sampled — are untouched. Parallel over samples;
/// per-sample seeds keep the result independent of the worker count.
pub fn fill_responses(
    weights: &ModelWeights,
    samples: &mut [CalibSample],
    sampling: &SamplingParams,
    seed: u64,
) -> Result<()> {
    let filled: Vec<Option<Vec<u32>>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| match s.response() {
            Some(_) => Ok(None),
            None => sample_targets(
                weights,
                &s.prompt,
                sampling.max_len,
                sampling.temperature,
                per_sample_seed(seed, i),
            )
            .map(Some),
        })
        .collect::<Result<_>>()?;
    for (s, f) in samples.iter_mut().zip(filled) {
        if f.is_some() {
            s.sampled_response = f;
        }
    }
    Ok(())
}

/// Estimates per-layer, per-stage importance over a calibration set.
///
/// Samples without a response get one sampled from the model (stored back
/// into the set so oracles can reuse the exact same targets). Samples are
/// processed in parallel on the current thread pool; per-sample seeds and
/// the sample-order reduction make the result identical for any worker
/// count.
pub fn estimate_importance(
    weights: &ModelWeights,
    samples: &mut [CalibSample],
    stage_aware: bool,
    sampling: &SamplingParams,
    seed: u64,
    keep_grads: bool,
) -> Result<ImportanceProfile> {
    if samples.is_empty() {
        return Err(PopError::Data("empty calibration set".into()));
    }
    fill_responses(weights, samples, sampling, seed)?;

    let grads: Vec<GateGradients> = samples
        .par_iter()
        .map(|s| gate_gradients(weights, s, stage_aware))
        .collect::<Result<_>>()?;

    let n = samples.len();
    let num_layers = weights.config.num_layers;
    let layers = (0..num_layers)
        .map(|l| {
            let pre = || grads.iter().map(move |g| g.prefill[l]);
            let dec = || grads.iter().map(move |g| g.decode[l]);
            let (pre_mean, pre_se) = mean_and_se(pre(), n);
            let (dec_mean, dec_se) = mean_and_se(dec(), n);
            LayerImportance {
                index: l + 1,
                prefill_score: pre().map(|g| g * g).sum::<f64>() / n as f64,
                decode_score: dec().map(|g| g * g).sum::<f64>() / n as f64,
                prefill_grad_mean: pre_mean,
                decode_grad_mean: dec_mean,
                prefill_grad_se: pre_se,
                decode_grad_se: dec_se,
            }
        })
        .collect();

    Ok(ImportanceProfile {
        model_hash: weights_hash(weights),
        stage_aware,
        num_samples: n,
        seed,
        sampling: sampling.clone(),
        layers,
        per_sample_grads: keep_grads.then_some(grads),
    })
}

fn ablated_schedule(num_layers: usize, prompt_len: usize, layer: usize, stage: Stage) -> GateSchedule {
    let mut s = GateSchedule::ones(num_layers, prompt_len);
    match stage {
        Stage::Prefill => s.g_prefill[layer] = 0.0,
        Stage::Decode => s.g_decode[layer] = 0.0,
    }
    s
}

/// Ground-truth importance of one gate: mean over samples of
/// loss(g_l^stage = 0) − loss(all gates 1), with frozen targets.
pub fn brute_force_delta_loss(
    weights: &ModelWeights,
    samples: &[CalibSample],
    layer: usize,
    stage: Stage,
) -> Result<f64> {
    if layer >= weights.config.num_layers {
        return Err(PopError::Contract(format!(
            "layer {layer} out of range for {}-layer model",
            weights.config.num_layers
        )));
    }
    let num_layers = weights.config.num_layers;
    let deltas: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            s.validate(weights.config.max_seq)?;
            let tokens = s.tokens()?;
            let n = s.prompt_len();
            let base = response_loss(weights, &tokens, n, &GateSchedule::ones(num_layers, n))?;
            let ablated =
                response_loss(weights, &tokens, n, &ablated_schedule(num_layers, n, layer, stage))?;
            Ok(ablated - base)
        })
        .collect::<Result<_>>()?;
    if deltas.is_empty() {
        return Err(PopError::Data("empty calibration set".into()));
    }
    Ok(deltas.iter().sum::<f64>() / deltas.len() as f64)
}

/// Brute-force ΔL for every layer at once, sharing one baseline pass per
/// sample across the whole sweep.
pub fn delta_loss_sweep(
    weights: &ModelWeights,
    samples: &[CalibSample],
    stage: Stage,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(PopError::Data("empty calibration set".into()));
    }
    let num_layers = weights.config.num_layers;
    let per_sample: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| {
            s.validate(weights.config.max_seq)?;
            let tokens = s.tokens()?;
            let n = s.prompt_len();
            let base = response_loss(weights, &tokens, n, &GateSchedule::ones(num_layers, n))?;
            (0..num_layers)
                .map(|l| {
                    let loss = response_loss(
                        weights,
                        &tokens,
                        n,
                        &ablated_schedule(num_layers, n, l, stage),
                    )?;
                    Ok(loss - base)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let n = samples.len() as f64;
    Ok((0..num_layers)
        .map(|l| per_sample.iter().map(|d| d[l]).sum::<f64>() / n)
        .collect())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(PopError::Contract(format!(
            "spearman needs two equal-length series of ≥ 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    fn ranks(xs: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        idx.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).expect("finite values"));
        let mut r = vec![0.0; xs.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        cov += (ra[i] - mean) * (rb[i] - mean);
        va += (ra[i] - mean) * (ra[i] - mean);
        vb += (rb[i] - mean) * (rb[i] - mean);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(PopError::Contract(
            "spearman undefined: a series is constant".into(),
        ));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Builds prompt-only calibration samples from a held-out byte slice:
/// each prompt is BOS plus `content_len` bytes at a seeded random offset.
pub fn calibration_from_slice(
    slice: &[u8],
    count: usize,
    content_len: usize,
    seed: u64,
) -> Result<Vec<CalibSample>> {
    use rand::{Rng, SeedableRng};
    if count == 0 {
        return Err(PopError::Data("requested zero calibration samples".into()));
    }
    if slice.len() <= content_len {
        return Err(PopError::Data(format!(
            "slice of {} bytes cannot supply {content_len}-byte prompts",
            slice.len()
        )));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let start = rng.random_range(0..slice.len() - content_len);
            CalibSample::from_prompt(tokenizer::encode(&slice[start..start + content_len]))
        })
        .collect())
}

/// Parses calibration JSONL: one `{"prompt": ..., "response": ...?}` object
/// per line. Prompts are BOS-prefixed; responses are raw continuations.
pub fn calibration_from_jsonl(text: &str) -> Result<Vec<CalibSample>> {
    #[derive(Deserialize)]
    struct Line {
        prompt: String,
        #[serde(default)]
        response: Option<String>,
    }
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(line).map_err(|e| {
            PopError::Format(format!("calibration line {}: {e}", lineno + 1))
        })?;
        out.push(CalibSample {
            prompt: tokenizer::encode_str(&parsed.prompt),
            provided_response: parsed.response.map(|r| {
                r.bytes()
                    .map(|b| b as u32 + tokenizer::BYTE_OFFSET)
                    .collect()
            }),
            sampled_response: None,
        });
    }
    if out.is_empty() {
        return Err(PopError::Data("calibration file has no samples".into()));
    }
    Ok(out)
}
