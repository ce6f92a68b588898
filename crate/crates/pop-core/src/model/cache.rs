use super::config::ModelConfig;
use crate::error::{PopError, Result};
use crate::tensor::Tensor;
use std::sync::Arc;

/// Per-layer key/value store with absolute positions.
///
/// Layers grow independently: under normal operation they share one length,
/// but the "no independent KV" ablation leaves pruned layers short, so
/// every read carries its own positions list and attention masks by
/// absolute position, never by row index.
#[derive(Clone, Debug)]
pub struct KVCache {
    num_kv_heads: usize,
    head_dim: usize,
    slots: Vec<LayerSlot>,
}

#[derive(Clone, Debug, Default)]
struct LayerSlot {
    k: Vec<f64>,
    v: Vec<f64>,
    positions: Vec<usize>,
}

impl KVCache {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            num_kv_heads: config.num_kv_heads,
            head_dim: config.head_dim,
            slots: vec![LayerSlot::default(); config.num_layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.slots.len()
    }

    /// Number of cached positions for a layer.
    pub fn len(&self, layer: usize) -> usize {
        self.slots[layer].positions.len()
    }

    pub fn is_empty(&self, layer: usize) -> bool {
        self.len(layer) == 0
    }

    pub fn positions(&self, layer: usize) -> &[usize] {
        &self.slots[layer].positions
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.slots.len() {
            return Err(PopError::Index {
                what: "layer",
                index: layer,
                bound: self.slots.len(),
            });
        }
        Ok(())
    }

    /// Appends `t` new rows for a layer. New positions must be strictly
    /// increasing and strictly after everything already cached.
    pub(crate) fn append(
        &mut self,
        layer: usize,
        k: &Tensor,
        v: &Tensor,
        positions: &[usize],
    ) -> Result<()> {
        self.check_layer(layer)?;
        let want = [positions.len(), self.num_kv_heads, self.head_dim];
        if k.shape() != want || v.shape() != want {
            return Err(PopError::Dimension {
                op: "cache_append",
                lhs: k.shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
        let slot = &mut self.slots[layer];
        let mut last = slot.positions.last().copied();
        for &p in positions {
            if last.is_some_and(|prev| p <= prev) {
                return Err(PopError::Contract(format!(
                    "cache_append: position {p} does not follow cached positions for layer {layer} \
                     (last was {})",
                    last.unwrap()
                )));
            }
            last = Some(p);
        }
        slot.k.extend_from_slice(k.data());
        slot.v.extend_from_slice(v.data());
        slot.positions.extend_from_slice(positions);
        Ok(())
    }

    /// Snapshot of a layer's cached keys and values as plain tensors
    /// [len × num_kv_heads × head_dim], plus the positions.
    pub fn layer_view(&self, layer: usize) -> Result<(Tensor, Tensor, Vec<usize>)> {
        self.check_layer(layer)?;
        let slot = &self.slots[layer];
        let shape = vec![slot.positions.len(), self.num_kv_heads, self.head_dim];
        let k = Tensor::raw(shape.clone(), Arc::new(slot.k.clone()), None);
        let v = Tensor::raw(shape, Arc::new(slot.v.clone()), None);
        Ok((k, v, slot.positions.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden: 8,
            num_heads: 2,
            num_kv_heads: 2,
            head_dim: 4,
            ffn_dim: 16,
            vocab: 11,
            max_seq: 32,
            rope_theta: 10000.0,
        }
    }

    fn rows(n: usize, fill: f64) -> Tensor {
        Tensor::full(&[n, 2, 4], fill)
    }

    #[test]
    fn append_grows_and_tracks_positions() {
        let mut c = KVCache::new(&cfg());
        c.append(0, &rows(2, 1.0), &rows(2, 2.0), &[0, 1]).unwrap();
        c.append(0, &rows(1, 3.0), &rows(1, 4.0), &[2]).unwrap();
        assert_eq!(c.len(0), 3);
        assert_eq!(c.positions(0), &[0, 1, 2]);
        assert_eq!(c.len(1), 0);
        let (k, _, pos) = c.layer_view(0).unwrap();
        assert_eq!(k.shape(), &[3, 2, 4]);
        assert_eq!(pos, vec![0, 1, 2]);
    }

    #[test]
    fn overlapping_or_reordered_positions_are_rejected() {
        let mut c = KVCache::new(&cfg());
        c.append(0, &rows(2, 0.0), &rows(2, 0.0), &[0, 1]).unwrap();
        assert!(c.append(0, &rows(1, 0.0), &rows(1, 0.0), &[1]).is_err());
        assert!(c.append(0, &rows(2, 0.0), &rows(2, 0.0), &[3, 3]).is_err());
        // gaps are fine: layers under pruning may cache sparse positions
        c.append(0, &rows(1, 0.0), &rows(1, 0.0), &[5]).unwrap();
    }

    #[test]
    fn layer_bounds_are_checked() {
        let mut c = KVCache::new(&cfg());
        assert!(c.append(2, &rows(1, 0.0), &rows(1, 0.0), &[0]).is_err());
        assert!(c.layer_view(2).is_err());
    }
}
