//! Pruned-prefill execution.
//!
//! A pruning plan names a set of layers to skip *while the prompt is being
//! read*. Skipped layers still deposit keys and values — computed by an
//! independent projection from their would-be input — so decoding, which
//! runs the full stack, finds a complete cache at every layer. The final
//! prompt token is handled as the first decode step: it runs through all
//! layers, leaving one undrifted prompt position in the cache.
//!
//! The ablation switches (`indep_kv`, `boundary_handling`, the shallow and
//! interleaved strategies) exist to demonstrate *why* the default shape of
//! the pipeline is the way it is; they are deliberately worse.

use crate::error::{PopError, Result};
use crate::importance::{response_targets, CalibSample, ImportanceProfile};
use crate::model::{
    forward_chunk, logits_from_hidden, tokenizer, KVCache, LayerMode, ModelWeights,
};
use crate::tensor::{concat_rows, cross_entropy, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

/// Skip counts within this distance of an integer round to it, so ratios
/// given as short decimals ("0.3333" for one third) select the intended
/// layer count.
const RATIO_SNAP: f64 = 5e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Deep,
    Shallow,
    Interleaved,
    FromProfile,
}

impl std::str::FromStr for Strategy {
    type Err = PopError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deep" => Ok(Self::Deep),
            "shallow" => Ok(Self::Shallow),
            "interleaved" => Ok(Self::Interleaved),
            "from_profile" => Ok(Self::FromProfile),
            other => Err(PopError::Config(format!(
                "unknown strategy {other:?}; expected deep, shallow, interleaved, or from_profile"
            ))),
        }
    }
}

/// A ratio argument: a decimal like `0.25` or a fraction like `1/3`.
pub fn parse_ratio(s: &str) -> Result<f64> {
    let value = if let Some((num, den)) = s.split_once('/') {
        let n: f64 = num
            .trim()
            .parse()
            .map_err(|_| PopError::Config(format!("bad ratio numerator {num:?}")))?;
        let d: f64 = den
            .trim()
            .parse()
            .map_err(|_| PopError::Config(format!("bad ratio denominator {den:?}")))?;
        if d == 0.0 {
            return Err(PopError::Config("ratio denominator is zero".into()));
        }
        n / d
    } else {
        s.trim()
            .parse()
            .map_err(|_| PopError::Config(format!("bad ratio {s:?}")))?
    };
    if !value.is_finite() {
        return Err(PopError::Config(format!("ratio {s:?} is not finite")));
    }
    Ok(value)
}

/// Which layers a pruned prefill skips, plus the two pipeline switches.
/// Layer indices are 0-based in memory and 1-based in JSON, like every
/// other external surface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PlanJson", into = "PlanJson")]
pub struct PruningPlan {
    pub strategy: Strategy,
    pub ratio: f64,
    /// Sorted, deduplicated, 0-based.
    pub skip_set: Vec<usize>,
    pub indep_kv: bool,
    pub boundary_handling: bool,
}

#[derive(Serialize, Deserialize, Clone)]
struct PlanJson {
    strategy: Strategy,
    ratio: f64,
    skip_set: Vec<usize>,
    indep_kv: bool,
    boundary_handling: bool,
}

impl From<PruningPlan> for PlanJson {
    fn from(p: PruningPlan) -> Self {
        Self {
            strategy: p.strategy,
            ratio: p.ratio,
            skip_set: p.skip_set.iter().map(|l| l + 1).collect(),
            indep_kv: p.indep_kv,
            boundary_handling: p.boundary_handling,
        }
    }
}

impl TryFrom<PlanJson> for PruningPlan {
    type Error = PopError;
    fn try_from(j: PlanJson) -> Result<Self> {
        if !(0.0..1.0).contains(&j.ratio) {
            return Err(PopError::Format(format!(
                "plan ratio {} outside [0, 1)",
                j.ratio
            )));
        }
        if j.skip_set.iter().any(|&l| l == 0) {
            return Err(PopError::Format(
                "plan skip_set uses 1-based layer numbers; found 0".into(),
            ));
        }
        if j.skip_set.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PopError::Format(
                "plan skip_set must be sorted and free of duplicates".into(),
            ));
        }
        Ok(Self {
            strategy: j.strategy,
            ratio: j.ratio,
            skip_set: j.skip_set.iter().map(|l| l - 1).collect(),
            indep_kv: j.indep_kv,
            boundary_handling: j.boundary_handling,
        })
    }
}

impl PruningPlan {
    /// An empty plan: nothing skipped, both switches on.
    pub fn none() -> Self {
        Self {
            strategy: Strategy::Deep,
            ratio: 0.0,
            skip_set: vec![],
            indep_kv: true,
            boundary_handling: true,
        }
    }

    pub fn is_skipped(&self, layer: usize) -> bool {
        self.skip_set.binary_search(&layer).is_ok()
    }

    /// Per-layer modes for prompt-prefix processing under this plan.
    pub fn prefill_modes(&self, num_layers: usize) -> Vec<LayerMode> {
        (0..num_layers)
            .map(|l| {
                if !self.is_skipped(l) {
                    LayerMode::Full
                } else if self.indep_kv {
                    LayerMode::KvOnly
                } else {
                    LayerMode::Skipped
                }
            })
            .collect()
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if let Some(&l) = self.skip_set.iter().find(|&&l| l >= num_layers) {
            return Err(PopError::Contract(format!(
                "plan skips layer {} but the model has {num_layers} layers",
                l + 1
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("plan serializes");
        std::fs::write(path, json).map_err(|e| PopError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PopError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| PopError::Format(format!("pruning plan: {e}")))
    }
}

/// floor(ratio·L), with near-integer products snapped to the integer.
pub fn skip_count(num_layers: usize, ratio: f64) -> usize {
    let raw = ratio * num_layers as f64;
    let rounded = raw.round();
    if (raw - rounded).abs() < RATIO_SNAP {
        rounded as usize
    } else {
        raw.floor() as usize
    }
}

/// Builds a plan for an `num_layers`-deep model. `from_profile` ranks
/// layers by prefill importance (lowest first, ties to the deeper layer);
/// the other strategies are positional.
pub fn make_plan(
    num_layers: usize,
    ratio: f64,
    strategy: Strategy,
    profile: Option<&ImportanceProfile>,
) -> Result<PruningPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(PopError::Config(format!(
            "pruning ratio must lie in [0, 1), got {ratio}"
        )));
    }
    let count = skip_count(num_layers, ratio);
    if ratio > 0.0 && count == 0 {
        return Err(PopError::Config(format!(
            "ratio {ratio} selects no layers on a {num_layers}-layer model"
        )));
    }

    let mut skip: Vec<usize> = match strategy {
        Strategy::Deep => (num_layers - count..num_layers).collect(),
        Strategy::Shallow => (0..count).collect(),
        Strategy::Interleaved => {
            // Every ⌈1/ratio⌉-th layer, anchored at the deep end; if the
            // stride runs off the shallow end before the count is met, the
            // deepest unused layers fill the remainder.
            let mut chosen = vec![false; num_layers];
            if count > 0 {
                let stride = (1.0 / ratio).ceil() as usize;
                let mut picked = 0;
                let mut l = num_layers as isize - 1;
                while l >= 0 && picked < count {
                    chosen[l as usize] = true;
                    picked += 1;
                    l -= stride as isize;
                }
                for l in (0..num_layers).rev() {
                    if picked == count {
                        break;
                    }
                    if !chosen[l] {
                        chosen[l] = true;
                        picked += 1;
                    }
                }
            }
            chosen
                .iter()
                .enumerate()
                .filter_map(|(l, &c)| c.then_some(l))
                .collect()
        }
        Strategy::FromProfile => {
            let profile = profile.ok_or_else(|| {
                PopError::Config("from_profile strategy needs an importance profile".into())
            })?;
            if profile.layers.len() != num_layers {
                return Err(PopError::Config(format!(
                    "profile covers {} layers, model has {num_layers}",
                    profile.layers.len()
                )));
            }
            let mut order: Vec<usize> = (0..num_layers).collect();
            order.sort_by(|&a, &b| {
                profile.layers[a]
                    .prefill_score
                    .partial_cmp(&profile.layers[b].prefill_score)
                    .expect("scores are finite")
                    .then(b.cmp(&a))
            });
            order.truncate(count);
            order
        }
    };
    skip.sort_unstable();

    Ok(PruningPlan {
        strategy,
        ratio,
        skip_set: skip,
        indep_kv: true,
        boundary_handling: true,
    })
}

/// One (position, layer) execution record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub position: usize,
    pub layer: usize,
    pub mode: LayerMode,
}

/// What a pruned run actually did: every (position, layer) mode, the cache
/// shape after the pruned prefill, and coarse timing marks.
#[derive(Clone, Debug, Default, Serialize)]
pub struct PopTrace {
    pub records: Vec<TraceRecord>,
    pub cache_lens_after_prefill: Vec<usize>,
    /// Seconds spent on the prompt-prefix prefill.
    pub prefill_seconds: f64,
    /// Seconds from run start to the first sampled token.
    pub first_token_seconds: f64,
}

impl PopTrace {
    fn record_chunk(&mut self, positions: &[usize], modes: &[LayerMode]) {
        for &p in positions {
            for (l, &m) in modes.iter().enumerate() {
                self.records.push(TraceRecord {
                    position: p,
                    layer: l,
                    mode: m,
                });
            }
        }
    }

    pub fn mode_at(&self, position: usize, layer: usize) -> Option<LayerMode> {
        self.records
            .iter()
            .find(|r| r.position == position && r.layer == layer)
            .map(|r| r.mode)
    }

    /// (full, kv_only, skipped) record counts.
    pub fn mode_counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for r in &self.records {
            match r.mode {
                LayerMode::Full => c.0 += 1,
                LayerMode::KvOnly => c.1 += 1,
                LayerMode::Skipped => c.2 += 1,
            }
        }
        c
    }
}

/// Runs the prompt *prefix* (everything before the last prompt token)
/// through the stack under the plan's modes. An empty prefix (single-token
/// prompt) yields an empty cache and no records.
pub fn pruned_prefill(
    weights: &ModelWeights,
    plan: &PruningPlan,
    prefix: &[u32],
) -> Result<(KVCache, PopTrace)> {
    plan.validate(weights.config.num_layers)?;
    let mut cache = KVCache::new(&weights.config);
    let mut trace = PopTrace::default();
    let start = Instant::now();
    if !prefix.is_empty() {
        let positions: Vec<usize> = (0..prefix.len()).collect();
        let modes = plan.prefill_modes(weights.config.num_layers);
        forward_chunk(weights, prefix, &positions, &mut cache, &modes)?;
        trace.record_chunk(&positions, &modes);
    }
    trace.prefill_seconds = start.elapsed().as_secs_f64();
    trace.cache_lens_after_prefill = (0..weights.config.num_layers)
        .map(|l| cache.len(l))
        .collect();
    Ok((cache, trace))
}

/// Generation with a pruned prefill. The last prompt token is the first
/// decode step: under boundary handling it and every generated token run
/// the full stack; without boundary handling the last prompt token is
/// processed under the pruned modes instead. Sampling is contract-identical
/// to the full-model `generate`.
pub fn pop_generate(
    weights: &ModelWeights,
    plan: &PruningPlan,
    prompt: &[u32],
    max_new: usize,
    temperature: f64,
    seed: u64,
) -> Result<(Vec<u32>, PopTrace)> {
    crate::model::check_generation_args(weights, prompt, temperature)?;
    plan.validate(weights.config.num_layers)?;
    let num_layers = weights.config.num_layers;
    let full = vec![LayerMode::Full; num_layers];
    let start = Instant::now();

    let n = prompt.len();
    let (mut cache, mut trace) = pruned_prefill(weights, plan, &prompt[..n - 1])?;

    let boundary_modes = if plan.boundary_handling {
        full.clone()
    } else {
        plan.prefill_modes(num_layers)
    };
    let hidden = forward_chunk(weights, &[prompt[n - 1]], &[n - 1], &mut cache, &boundary_modes)?;
    trace.record_chunk(&[n - 1], &boundary_modes);
    let mut logits = logits_from_hidden(weights, &hidden)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let budget = max_new.min(weights.config.max_seq - n);
    let mut out = Vec::with_capacity(budget);
    for step in 0..budget {
        let tok = crate::model::sample_token(logits.data(), temperature, &mut rng);
        if step == 0 {
            trace.first_token_seconds = start.elapsed().as_secs_f64();
        }
        out.push(tok);
        if tok == tokenizer::EOS || step + 1 == budget {
            break;
        }
        let pos = n + step;
        let hidden = forward_chunk(weights, &[tok], &[pos], &mut cache, &full)?;
        trace.record_chunk(&[pos], &full);
        logits = logits_from_hidden(weights, &hidden)?;
    }
    Ok((out, trace))
}

/// Teacher-forced logits for a full (prompt ++ response) sequence executed
/// exactly as the generation pipeline would: pruned prefix, boundary step,
/// full-model response positions. Returns [T × vocab] logits and a trace.
pub fn pruned_teacher_forced(
    weights: &ModelWeights,
    plan: &PruningPlan,
    tokens: &[u32],
    prompt_len: usize,
) -> Result<(Tensor, PopTrace)> {
    if prompt_len < 1 || prompt_len > tokens.len() {
        return Err(PopError::Contract(format!(
            "prompt_len {prompt_len} outside 1..={}",
            tokens.len()
        )));
    }
    plan.validate(weights.config.num_layers)?;
    let num_layers = weights.config.num_layers;
    let n = prompt_len;
    let t = tokens.len();

    let (mut cache, mut trace) = pruned_prefill(weights, plan, &tokens[..n - 1])?;
    let mut hidden_blocks = Vec::new();
    if n > 1 {
        // The prefix hidden states were consumed inside pruned_prefill;
        // recompute-free design would thread them out, but the prefix
        // logits are needed for the [T × V] contract, so run the chunk
        // through a fresh cache here instead.
        let positions: Vec<usize> = (0..n - 1).collect();
        let modes = plan.prefill_modes(num_layers);
        let mut scratch = KVCache::new(&weights.config);
        hidden_blocks.push(forward_chunk(
            weights,
            &tokens[..n - 1],
            &positions,
            &mut scratch,
            &modes,
        )?);
    }

    let boundary_modes = if plan.boundary_handling {
        vec![LayerMode::Full; num_layers]
    } else {
        plan.prefill_modes(num_layers)
    };
    hidden_blocks.push(forward_chunk(
        weights,
        &tokens[n - 1..n],
        &[n - 1],
        &mut cache,
        &boundary_modes,
    )?);
    trace.record_chunk(&[n - 1], &boundary_modes);

    if n < t {
        let positions: Vec<usize> = (n..t).collect();
        let full = vec![LayerMode::Full; num_layers];
        hidden_blocks.push(forward_chunk(
            weights,
            &tokens[n..],
            &positions,
            &mut cache,
            &full,
        )?);
        trace.record_chunk(&positions, &full);
    }

    let hidden = if hidden_blocks.len() == 1 {
        hidden_blocks.pop().unwrap()
    } else {
        concat_rows(&hidden_blocks)?
    };
    Ok((logits_from_hidden(weights, &hidden)?, trace))
}

/// The named pipeline variants of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Pop,
    Shallow,
    Interleaved,
    NoIndepKv,
    NoBoundary,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Pop,
        Variant::Shallow,
        Variant::Interleaved,
        Variant::NoIndepKv,
        Variant::NoBoundary,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Pop => "pop",
            Variant::Shallow => "shallow",
            Variant::Interleaved => "interleaved",
            Variant::NoIndepKv => "no_indep_kv",
            Variant::NoBoundary => "no_boundary",
            Variant::Full => "full",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                PopError::Config(format!(
                    "unknown variant {s:?}; expected one of pop, shallow, interleaved, \
                     no_indep_kv, no_boundary, full"
                ))
            })
    }

    /// The plan this variant runs at a given ratio.
    pub fn plan(self, num_layers: usize, ratio: f64) -> Result<PruningPlan> {
        let mut plan = match self {
            Variant::Full => return Ok(PruningPlan::none()),
            Variant::Shallow => make_plan(num_layers, ratio, Strategy::Shallow, None)?,
            Variant::Interleaved => make_plan(num_layers, ratio, Strategy::Interleaved, None)?,
            _ => make_plan(num_layers, ratio, Strategy::Deep, None)?,
        };
        match self {
            Variant::NoIndepKv => plan.indep_kv = false,
            Variant::NoBoundary => plan.boundary_handling = false,
            _ => {}
        }
        Ok(plan)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub variant: String,
    pub ratio: f64,
    /// Mean per-token teacher-forced loss over response positions.
    pub resp_loss: f64,
    /// Fraction of samples whose greedy first token matches the full model.
    pub first_token_agree: f64,
}

fn greedy_token(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Evaluates one variant over a frozen eval set: teacher-forced response
/// loss under the variant's pipeline, and agreement of the greedy first
/// token with the full model's.
pub fn run_variant(
    weights: &ModelWeights,
    variant: Variant,
    ratio: f64,
    eval: &[CalibSample],
) -> Result<VariantMetrics> {
    if eval.is_empty() {
        return Err(PopError::Data("empty evaluation set".into()));
    }
    let plan = variant.plan(weights.config.num_layers, ratio)?;
    let vocab = weights.config.vocab;

    let per_sample: Vec<(f64, usize, bool)> = eval
        .par_iter()
        .map(|s| {
            let tokens = s.tokens()?;
            let n = s.prompt_len();
            let (logits, _) = pruned_teacher_forced(weights, &plan, &tokens, n)?;
            let (targets, mask) = response_targets(&tokens, n);
            let loss = cross_entropy(&logits, &targets, &mask)?.item()?;
            let n_resp = tokens.len() - n;

            let (full_logits, _) =
                pruned_teacher_forced(weights, &PruningPlan::none(), &tokens, n)?;
            let row = &logits.data()[(n - 1) * vocab..n * vocab];
            let full_row = &full_logits.data()[(n - 1) * vocab..n * vocab];
            let agree = greedy_token(row) == greedy_token(full_row);
            Ok((loss, n_resp, agree))
        })
        .collect::<Result<_>>()?;

    let total_loss: f64 = per_sample.iter().map(|(l, _, _)| l).sum();
    let total_tokens: usize = per_sample.iter().map(|(_, n, _)| n).sum();
    let agreed = per_sample.iter().filter(|(_, _, a)| *a).count();
    Ok(VariantMetrics {
        variant: variant.name().to_string(),
        ratio,
        resp_loss: total_loss / total_tokens as f64,
        first_token_agree: agreed as f64 / eval.len() as f64,
    })
}

/// Writes variant metrics as `variant,ratio,resp_loss,first_token_agree`.
pub fn write_variant_csv(path: impl AsRef<Path>, rows: &[VariantMetrics]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("variant,ratio,resp_loss,first_token_agree\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.variant, r.ratio, r.resp_loss, r.first_token_agree
        ));
    }
    std::fs::write(path, out).map_err(|e| PopError::io(path, e))
}
