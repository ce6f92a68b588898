//! Wall-clock time-to-first-token measurement.
//!
//! A benchmark run times two pipelines on the same synthetic workload: the
//! full model (an empty skip set) and the supplied pruning plan. One
//! repetition processes every prompt in the batch sequentially and sums the
//! per-prompt time from prefill start through emission of the first generated
//! token — the boundary full-model step is inside that window, so plans can
//! only win on the strictly-prefill positions. Medians over repetitions damp
//! scheduler noise; the interquartile range is reported so callers can judge
//! whether a speedup clears the spread.
//!
//! Timing is inherently non-deterministic, but the workload is not: prompts
//! derive from the seed alone and sampling runs at temperature zero, so the
//! token streams are identical across repetitions and runs. `bench_ttft`
//! verifies that instead of assuming it.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PopError, Result};
use crate::model::{tokenizer, ModelWeights};
use crate::pop::{pop_generate, PruningPlan};

/// Timed repetitions below this count give a meaningless median.
const MIN_REPS: usize = 5;
/// Untimed repetitions run first so allocator and cache state settle.
const WARMUPS: usize = 2;

/// Outcome of one benchmark: per-pipeline latency summaries plus the exact
/// first tokens each pipeline produced, for determinism auditing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchStats {
    pub seq_len: usize,
    pub batch: usize,
    pub reps: usize,
    pub warmups: usize,
    /// Ambient worker-pool size when the benchmark ran. The measurement loop
    /// itself is sequential; this documents the environment.
    pub workers: usize,
    pub full_median_s: f64,
    pub full_iqr_s: f64,
    pub pop_median_s: f64,
    pub pop_iqr_s: f64,
    /// full_median_s / pop_median_s.
    pub speedup: f64,
    /// First generated token per prompt under the full model.
    pub first_tokens_full: Vec<u32>,
    /// First generated token per prompt under the supplied plan.
    pub first_tokens_pop: Vec<u32>,
}

/// Measures time-to-first-token for `plan` against the full model on a
/// seeded synthetic batch of `batch` prompts, each `seq_len` tokens long.
pub fn bench_ttft(
    weights: &ModelWeights,
    plan: &PruningPlan,
    seq_len: usize,
    batch: usize,
    reps: usize,
    seed: u64,
) -> Result<BenchStats> {
    if reps < MIN_REPS {
        return Err(PopError::Config(format!(
            "need at least {MIN_REPS} timed repetitions, got {reps}"
        )));
    }
    if batch == 0 {
        return Err(PopError::Config("benchmark batch must be non-empty".into()));
    }
    if seq_len == 0 {
        return Err(PopError::Config("prompt length must be at least 1".into()));
    }
    if seq_len >= weights.config.max_seq {
        return Err(PopError::Config(format!(
            "prompt length {seq_len} leaves no room for a generated token \
             (max sequence {})",
            weights.config.max_seq
        )));
    }
    plan.validate(weights.config.num_layers)?;

    let prompts = synthetic_prompts(seq_len, batch, seed);
    let full_plan = PruningPlan::none();

    let mut full_times = Vec::with_capacity(reps);
    let mut pop_times = Vec::with_capacity(reps);
    let mut first_tokens_full: Option<Vec<u32>> = None;
    let mut first_tokens_pop: Option<Vec<u32>> = None;

    for rep in 0..WARMUPS + reps {
        let (full_s, full_toks) = time_batch(weights, &full_plan, &prompts, seed)?;
        let (pop_s, pop_toks) = time_batch(weights, plan, &prompts, seed)?;
        check_stream(&mut first_tokens_full, full_toks, "full")?;
        check_stream(&mut first_tokens_pop, pop_toks, "pop")?;
        if rep >= WARMUPS {
            full_times.push(full_s);
            pop_times.push(pop_s);
        }
    }

    let full_median_s = percentile(&mut full_times, 0.5);
    let pop_median_s = percentile(&mut pop_times, 0.5);
    Ok(BenchStats {
        seq_len,
        batch,
        reps,
        warmups: WARMUPS,
        workers: rayon::current_num_threads(),
        full_median_s,
        full_iqr_s: percentile(&mut full_times, 0.75) - percentile(&mut full_times, 0.25),
        pop_median_s,
        pop_iqr_s: percentile(&mut pop_times, 0.75) - percentile(&mut pop_times, 0.25),
        speedup: full_median_s / pop_median_s,
        first_tokens_full: first_tokens_full.unwrap_or_default(),
        first_tokens_pop: first_tokens_pop.unwrap_or_default(),
    })
}

/// Seeded workload: each prompt is BOS followed by seq_len − 1 random byte
/// tokens. Prompt content depends only on (seq_len, batch, seed).
pub(crate) fn synthetic_prompts(seq_len: usize, batch: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch)
        .map(|_| {
            let mut prompt = Vec::with_capacity(seq_len);
            prompt.push(tokenizer::BOS);
            for _ in 1..seq_len {
                prompt.push(tokenizer::BYTE_OFFSET + rng.random_range(0..256u32));
            }
            prompt
        })
        .collect()
}

/// Runs the batch once under `plan`; returns summed time-to-first-token and
/// the first token each prompt produced. Temperature zero keeps the streams
/// a pure function of the weights and workload.
fn time_batch(
    weights: &ModelWeights,
    plan: &PruningPlan,
    prompts: &[Vec<u32>],
    seed: u64,
) -> Result<(f64, Vec<u32>)> {
    let mut total = 0.0;
    let mut firsts = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let (tokens, trace) = pop_generate(weights, plan, prompt, 1, 0.0, seed)?;
        total += trace.first_token_seconds;
        firsts.push(tokens[0]);
    }
    Ok((total, firsts))
}

/// First repetition records the stream; later ones must reproduce it exactly.
fn check_stream(expected: &mut Option<Vec<u32>>, got: Vec<u32>, label: &str) -> Result<()> {
    match expected {
        None => {
            *expected = Some(got);
            Ok(())
        }
        Some(want) if *want == got => Ok(()),
        Some(want) => Err(PopError::Contract(format!(
            "{label} pipeline token stream changed between repetitions: \
             {want:?} then {got:?}"
        ))),
    }
}

/// Linearly interpolated percentile (same convention as numpy's default).
/// Sorts in place; q must be in [0, 1].
fn percentile(samples: &mut [f64], q: f64) -> f64 {
    debug_assert!(!samples.is_empty());
    samples.sort_by(|a, b| a.partial_cmp(b).expect("timings are finite"));
    let rank = q * (samples.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    samples[lo] * (1.0 - frac) + samples[hi] * frac
}
