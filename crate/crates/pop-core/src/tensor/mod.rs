//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable row-major array behind an `Arc`, cheap to
//! clone and safe to share across threads. Differentiation is opt-in and
//! scoped: inside [`tape::with_tape`], tensors registered via [`tape::watch`]
//! become leaves, every op touching a tracked tensor records itself, and
//! [`tape::backward`] replays the records in reverse to accumulate leaf
//! gradients. Outside a tape scope the same ops run untracked and produce
//! bitwise-identical values.
//!
//! The op set is exactly what a gated decoder-only transformer needs:
//! matmul, RMS normalization, (masked) row softmax, RoPE, silu, embedding
//! lookup, per-row gating, and masked cross-entropy. Broadcasting is limited
//! to scalar×tensor and row-vector-over-last-dimension; anything else is a
//! shape error.

#[cfg(test)]
mod gradcheck;
mod ops;
pub mod tape;

pub use ops::{
    add, concat_rows, cross_entropy, embedding_lookup, matmul, mul, rmsnorm, rope_apply,
    scale_const, scale_rows, silu, softmax_rows,
};
pub(crate) use ops::{concat_heads, masked_softmax_rows, matmul_tb, slice_head};

use crate::error::{PopError, Result};
use std::sync::Arc;

/// Reference to a node on a specific tape generation. Ops treat a tensor as
/// tracked only when its tape generation matches the currently active tape,
/// so tensors that outlive their tape degrade to plain values instead of
/// dangling.
#[derive(Clone, Copy, Debug)]
pub(crate) struct NodeRef {
    pub tape: u64,
    pub idx: usize,
}

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(PopError::Contract(format!(
                "from_vec: shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(PopError::NonFinite { op: "from_vec" });
        }
        Ok(Self::raw(shape.to_vec(), Arc::new(data), None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::raw(shape.to_vec(), Arc::new(vec![0.0; numel]), None)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::raw(shape.to_vec(), Arc::new(vec![value; numel]), None)
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Self::raw(Vec::new(), Arc::new(vec![value]), None)
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Arc<Vec<f64>>, node: Option<NodeRef>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data, node }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> &Arc<Vec<f64>> {
        &self.data
    }

    pub(crate) fn node(&self) -> Option<NodeRef> {
        self.node
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// True when this tensor is connected to the currently active tape.
    pub fn is_tracked(&self) -> bool {
        match self.node {
            Some(n) => tape::is_live(n.tape),
            None => false,
        }
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(PopError::Contract(format!(
                "item: tensor has shape {:?}, expected a single element",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Same data, new shape. A view: shares storage and, when tracked,
    /// gradients flow through unchanged.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(PopError::Dimension {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(ops::reshape_view(self, shape.to_vec()))
    }

    /// Rows `[start, end)` of a rank-≥1 tensor as a fresh tensor (untracked
    /// copy; used by inference paths that never differentiate slices).
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        if self.shape.is_empty() || start > end || end > self.shape[0] {
            return Err(PopError::Contract(format!(
                "slice_rows: range {}..{} invalid for shape {:?}",
                start, end, self.shape
            )));
        }
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        let data = self.data[start * row..end * row].to_vec();
        Ok(Tensor::raw(shape, Arc::new(data), None))
    }
}
