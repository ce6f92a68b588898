use super::config::ModelConfig;
use crate::error::Result;
use crate::tensor::{tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Matrix init is N(0, (INIT_SCALE/√fan_in)²) where fan_in is the input
/// dimension. 0.5 keeps init logits near zero-variance so the initial loss
/// sits close to ln(vocab), and keeps residual branches small relative to
/// the stream. Norm vectors start at 1.
pub const INIT_SCALE: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub attn_norm: Tensor, // [d]
    pub wq: Tensor,        // [d × d]
    pub wk: Tensor,        // [d × kv_dim]
    pub wv: Tensor,        // [d × kv_dim]
    pub wo: Tensor,        // [d × d]
    pub ffn_norm: Tensor,  // [d]
    pub ffn_gate: Tensor,  // [d × d_ff]
    pub ffn_up: Tensor,    // [d × d_ff]
    pub ffn_down: Tensor,  // [d_ff × d]
}

/// All parameters plus the config that shapes them. Immutable during
/// inference and safe to share across threads.
#[derive(Clone, Debug)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub token_embedding: Tensor, // [V × d]
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,  // [d]
    pub output_head: Tensor, // [d × V]
}

/// Canonical tensor order used by checkpoints, the optimizer, and watched
/// copies: embedding, then each layer's tensors in declaration order, then
/// final norm and head.
pub const LAYER_TENSOR_NAMES: [&str; 9] = [
    "attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "ffn_gate", "ffn_up", "ffn_down",
];

impl ModelWeights {
    /// `(name, tensor)` pairs in canonical order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> =
            vec![("token_embedding".into(), &self.token_embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            let fields = [
                &l.attn_norm,
                &l.wq,
                &l.wk,
                &l.wv,
                &l.wo,
                &l.ffn_norm,
                &l.ffn_gate,
                &l.ffn_up,
                &l.ffn_down,
            ];
            for (name, t) in LAYER_TENSOR_NAMES.iter().zip(fields) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("output_head".into(), &self.output_head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> =
            vec![("token_embedding".into(), &mut self.token_embedding)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let pairs: [(&str, &mut Tensor); 9] = [
                ("attn_norm", &mut l.attn_norm),
                ("wq", &mut l.wq),
                ("wk", &mut l.wk),
                ("wv", &mut l.wv),
                ("wo", &mut l.wo),
                ("ffn_norm", &mut l.ffn_norm),
                ("ffn_gate", &mut l.ffn_gate),
                ("ffn_up", &mut l.ffn_up),
                ("ffn_down", &mut l.ffn_down),
            ];
            for (name, t) in pairs {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("output_head".into(), &mut self.output_head));
        out
    }

    /// Expected shape of each canonical tensor for a config.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, kv, ff, v) = (config.hidden, config.kv_dim(), config.ffn_dim, config.vocab);
        let mut out = vec![("token_embedding".to_string(), vec![v, d])];
        for i in 0..config.num_layers {
            let shapes: [(&str, Vec<usize>); 9] = [
                ("attn_norm", vec![d]),
                ("wq", vec![d, d]),
                ("wk", vec![d, kv]),
                ("wv", vec![d, kv]),
                ("wo", vec![d, d]),
                ("ffn_norm", vec![d]),
                ("ffn_gate", vec![d, ff]),
                ("ffn_up", vec![d, ff]),
                ("ffn_down", vec![ff, d]),
            ];
            for (name, s) in shapes {
                out.push((format!("layers.{i}.{name}"), s));
            }
        }
        out.push(("final_norm".to_string(), vec![d]));
        out.push(("output_head".to_string(), vec![d, v]));
        out
    }

    /// Registers every parameter as a tape leaf and returns the tracked
    /// twin plus the leaf handles in canonical order. Must run inside a
    /// recording scope.
    pub fn watched(&self) -> Result<(ModelWeights, Vec<Tensor>)> {
        let mut twin = self.clone();
        let mut leaves = Vec::new();
        for (_, t) in twin.tensors_mut() {
            let tracked = tape::watch(t)?;
            leaves.push(tracked.clone());
            *t = tracked;
        }
        Ok((twin, leaves))
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Deterministic seeded initialization. The sampling order is the canonical
/// tensor order; norm vectors consume no randomness.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = |shape: &[usize], fan_in: usize| -> Tensor {
        let std = INIT_SCALE / (fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        Tensor::from_vec(shape, data).expect("sampled weights are finite")
    };

    let (d, kv, ff, v) = (config.hidden, config.kv_dim(), config.ffn_dim, config.vocab);
    let token_embedding = sample(&[v, d], d);
    let mut layers = Vec::with_capacity(config.num_layers);
    for _ in 0..config.num_layers {
        layers.push(LayerWeights {
            attn_norm: Tensor::full(&[d], 1.0),
            wq: sample(&[d, d], d),
            wk: sample(&[d, kv], d),
            wv: sample(&[d, kv], d),
            wo: sample(&[d, d], d),
            ffn_norm: Tensor::full(&[d], 1.0),
            ffn_gate: sample(&[d, ff], d),
            ffn_up: sample(&[d, ff], d),
            ffn_down: sample(&[ff, d], ff),
        });
    }
    Ok(ModelWeights {
        config: config.clone(),
        token_embedding,
        layers,
        final_norm: Tensor::full(&[d], 1.0),
        output_head: sample(&[d, v], d),
    })
}
