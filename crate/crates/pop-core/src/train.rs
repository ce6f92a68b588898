//! Byte-level next-token pretraining.
//!
//! A deliberately small loop — Adam with linear warmup, global-norm
//! gradient clipping at 1.0, no dropout, no weight decay — whose only job
//! is to give toy checkpoints genuine layer structure so layer-importance
//! analysis has something real to measure. Single-threaded; fully
//! deterministic given the seed.

use crate::error::{PopError, Result};
use crate::model::{
    forward_teacher_forced, init_model, tokenizer, GateSchedule, ModelConfig, ModelWeights,
};
use crate::tensor::{add, cross_entropy, scale_const, tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

// Invariant: held-out windows must never overlap training windows, so the
// split is a hard byte-offset cut, not a random assignment.
const TRAIN_FRACTION_NUM: usize = 95;
const TRAIN_FRACTION_DEN: usize = 100;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const CLIP_NORM: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub corpus: PathBuf,
}

impl TrainConfig {
    fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.steps == 0 {
            return Err(PopError::Config("steps must be > 0".into()));
        }
        if self.batch == 0 {
            return Err(PopError::Config("batch must be > 0".into()));
        }
        if self.seq_len == 0 {
            return Err(PopError::Config("seq_len must be > 0".into()));
        }
        // The BOS prefix occupies one slot, so windows are seq_len+1 tokens.
        if self.seq_len + 1 > model.max_seq {
            return Err(PopError::Config(format!(
                "seq_len {} plus BOS exceeds max_seq {}",
                self.seq_len, model.max_seq
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(PopError::Config(format!(
                "learning rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    std::fs::read(path).map_err(|e| PopError::io(path, e))
}

/// Hard 95/5 split by byte offset: the leading bytes train, the trailing
/// bytes are held out and never sampled by the training loop.
pub fn split_corpus(bytes: &[u8]) -> (&[u8], &[u8]) {
    let cut = bytes.len() * TRAIN_FRACTION_NUM / TRAIN_FRACTION_DEN;
    bytes.split_at(cut)
}

/// BOS-prefixed token window starting at a byte offset.
fn window_tokens(bytes: &[u8], start: usize, len: usize) -> Vec<u32> {
    let mut tokens = Vec::with_capacity(len + 1);
    tokens.push(tokenizer::BOS);
    tokens.extend(bytes[start..start + len].iter().map(|&b| b as u32 + tokenizer::BYTE_OFFSET));
    tokens
}

/// Next-token loss over one BOS-prefixed window, as (sum, predicted-token
/// count). Row i of the logits predicts token i+1; the final row predicts
/// nothing and is masked out. Records on the tape whenever the weights are
/// tracked leaves.
fn window_loss(weights: &ModelWeights, tokens: &[u32]) -> Result<(Tensor, usize)> {
    let t = tokens.len();
    let mut targets = vec![0u32; t];
    let mut mask = vec![false; t];
    for i in 0..t - 1 {
        targets[i] = tokens[i + 1];
        mask[i] = true;
    }
    let logits = forward_teacher_forced(
        weights,
        tokens,
        &GateSchedule::ones(weights.config.num_layers, 1),
    )?;
    Ok((cross_entropy(&logits, &targets, &mask)?, t - 1))
}

/// Mean per-token loss and per-tensor gradients (canonical order) for one
/// batch of token windows.
fn batch_loss_and_grads(
    weights: &ModelWeights,
    batch: &[Vec<u32>],
) -> Result<(f64, Vec<Vec<f64>>)> {
    tape::with_tape(|| {
        let (tracked, leaves) = weights.watched()?;
        let mut total: Option<Tensor> = None;
        let mut count = 0usize;
        for tokens in batch {
            let (loss, n) = window_loss(&tracked, tokens)?;
            count += n;
            total = Some(match total {
                Some(t) => add(&t, &loss)?,
                None => loss,
            });
        }
        let mean = scale_const(&total.expect("batch is non-empty"), 1.0 / count as f64)?;
        let value = mean.item()?;
        let grads = tape::backward(&mean)?;
        let per_tensor = leaves
            .iter()
            .map(|leaf| Ok(grads.wrt(leaf)?.data().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok((value, per_tensor))
    })
}

fn clip_global_norm(grads: &mut [Vec<f64>]) {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| v * v)
        .sum();
    let norm = sq.sqrt();
    if norm > CLIP_NORM {
        let scale = CLIP_NORM / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl Adam {
    fn new(shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, weights: &mut ModelWeights, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (i, (_, tensor)) in weights.tensors_mut().into_iter().enumerate() {
            let g = &grads[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut data = tensor.data().to_vec();
            for j in 0..data.len() {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
            // from_vec re-checks finiteness, so divergence surfaces as an
            // error instead of silently poisoning the checkpoint.
            *tensor = Tensor::from_vec(&tensor.shape().to_vec(), data)?;
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    /// Batch loss per step, recorded before that step's update.
    pub losses: Vec<f64>,
}

/// Trains a fresh model on the leading 95% of the corpus. Deterministic
/// given the seed: initialization, window sampling, and every update are
/// driven by it.
pub fn train(config: &ModelConfig, tcfg: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    tcfg.validate(config)?;
    let corpus = load_corpus(&tcfg.corpus)?;
    let need = 10 * tcfg.batch * tcfg.seq_len;
    if corpus.len() < need {
        return Err(PopError::Data(format!(
            "corpus too small: {} bytes, need at least {need} (10 × batch × seq_len)",
            corpus.len()
        )));
    }
    let (train_bytes, _) = split_corpus(&corpus);
    if train_bytes.len() <= tcfg.seq_len {
        return Err(PopError::Data(format!(
            "training split has {} bytes, shorter than one {}–byte window",
            train_bytes.len(),
            tcfg.seq_len
        )));
    }

    let mut weights = init_model(config, tcfg.seed)?;
    let shapes: Vec<usize> = weights.tensors().iter().map(|(_, t)| t.numel()).collect();
    let mut optimizer = Adam::new(&shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut losses = Vec::with_capacity(tcfg.steps);

    for step in 1..=tcfg.steps {
        let batch: Vec<Vec<u32>> = (0..tcfg.batch)
            .map(|_| {
                let start = rng.random_range(0..train_bytes.len() - tcfg.seq_len);
                window_tokens(train_bytes, start, tcfg.seq_len)
            })
            .collect();
        let (loss, mut grads) = batch_loss_and_grads(&weights, &batch)?;
        losses.push(loss);
        clip_global_norm(&mut grads);
        let warm = if tcfg.warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / tcfg.warmup_steps as f64).min(1.0)
        };
        optimizer.step(&mut weights, &grads, tcfg.learning_rate * warm)?;
    }
    Ok(TrainOutcome { weights, losses })
}

/// Mean per-token teacher-forced loss over a held-out byte slice, split
/// into consecutive BOS-prefixed windows of `seq_len` bytes (final partial
/// window included).
pub fn heldout_loss(weights: &ModelWeights, slice: &[u8], seq_len: usize) -> Result<f64> {
    if slice.is_empty() {
        return Err(PopError::Data("held-out slice is empty".into()));
    }
    if seq_len == 0 || seq_len + 1 > weights.config.max_seq {
        return Err(PopError::Config(format!(
            "seq_len {seq_len} invalid for max_seq {}",
            weights.config.max_seq
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for window in slice.chunks(seq_len) {
        let tokens = window_tokens(window, 0, window.len());
        let (loss, n) = window_loss(weights, &tokens)?;
        total += loss.item()?;
        count += n;
    }
    Ok(total / count as f64)
}

/// Writes the per-step loss curve as `step,loss` CSV (steps 1-based).
pub fn write_loss_csv(path: impl AsRef<Path>, losses: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("step,loss\n");
    for (i, loss) in losses.iter().enumerate() {
        out.push_str(&format!("{},{loss}\n", i + 1));
    }
    std::fs::write(path, out).map_err(|e| PopError::io(path, e))
}
