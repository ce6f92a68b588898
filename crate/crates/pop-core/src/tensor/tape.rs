//! Thread-local gradient tape.
//!
//! One tape may be active per thread at a time, opened with [`with_tape`].
//! Ops append nodes while any operand is tracked on the active tape;
//! [`backward`] sweeps the node list in reverse, accumulating gradients in
//! fixed node-index order so results are deterministic. Tapes are identified
//! by a process-unique generation counter: a tensor whose node references a
//! closed tape is simply treated as untracked, which lets long-lived values
//! (model weights) flow through many recording scopes safely.

use super::{ops, NodeRef, Tensor};
use crate::error::{PopError, Result};
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Full,
    Row,
    Scalar,
}

/// Recorded operation. Each variant carries what its VJP needs beyond the
/// saved inputs and output.
pub(crate) enum OpKind {
    Leaf,
    Matmul { transpose_b: bool },
    Add(Broadcast),
    Mul(Broadcast),
    ScaleRows,
    ScaleConst(f64),
    Silu,
    RmsNorm { eps: f64 },
    SoftmaxRows,
    MaskedSoftmaxRows { allowed: Arc<Vec<usize>> },
    Rope { positions: Arc<Vec<usize>>, theta: f64 },
    CrossEntropy { targets: Arc<Vec<u32>>, mask: Arc<Vec<bool>> },
    EmbedLookup { ids: Arc<Vec<u32>> },
    ConcatRows,
    ConcatHeads,
    SliceHead { head: usize },
    Reshape,
}

pub(crate) struct SavedInput {
    /// Node index on the same tape, when the input was tracked.
    node: Option<usize>,
    data: Arc<Vec<f64>>,
    shape: Vec<usize>,
}

struct Node {
    op: OpKind,
    inputs: Vec<SavedInput>,
    out: Arc<Vec<f64>>,
    out_shape: Vec<usize>,
}

struct TapeInner {
    id: u64,
    nodes: Vec<Node>,
}

thread_local! {
    static TAPE: RefCell<Option<TapeInner>> = const { RefCell::new(None) };
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Runs `f` with a fresh tape active on this thread. Panics if a tape is
/// already active: recording scopes are deliberately non-nesting.
pub fn with_tape<R>(f: impl FnOnce() -> R) -> R {
    TAPE.with(|t| {
        let mut slot = t.borrow_mut();
        assert!(
            slot.is_none(),
            "with_tape: a recording scope is already active on this thread"
        );
        *slot = Some(TapeInner {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        });
    });
    struct Reset;
    impl Drop for Reset {
        fn drop(&mut self) {
            TAPE.with(|t| *t.borrow_mut() = None);
        }
    }
    let _reset = Reset;
    f()
}

pub fn is_recording() -> bool {
    TAPE.with(|t| t.borrow().is_some())
}

pub(crate) fn is_live(tape_id: u64) -> bool {
    TAPE.with(|t| t.borrow().as_ref().map(|i| i.id) == Some(tape_id))
}

/// Registers `t` as a differentiable leaf on the active tape and returns the
/// tracked handle. The same handle is later the key for [`Gradients::wrt`].
pub fn watch(t: &Tensor) -> Result<Tensor> {
    TAPE.with(|cell| {
        let mut slot = cell.borrow_mut();
        let inner = slot
            .as_mut()
            .ok_or_else(|| PopError::Contract("watch: no active tape on this thread".into()))?;
        let idx = inner.nodes.len();
        inner.nodes.push(Node {
            op: OpKind::Leaf,
            inputs: Vec::new(),
            out: t.data_arc().clone(),
            out_shape: t.shape().to_vec(),
        });
        Ok(Tensor::raw(
            t.shape().to_vec(),
            t.data_arc().clone(),
            Some(NodeRef {
                tape: inner.id,
                idx,
            }),
        ))
    })
}

/// Appends a node if any input is tracked on the active tape. Returns the
/// node reference the output tensor should carry.
pub(crate) fn record(
    op: OpKind,
    inputs: &[&Tensor],
    out_data: &Arc<Vec<f64>>,
    out_shape: &[usize],
) -> Option<NodeRef> {
    TAPE.with(|cell| {
        let mut slot = cell.borrow_mut();
        let inner = slot.as_mut()?;
        let tracked = inputs
            .iter()
            .any(|t| matches!(t.node(), Some(n) if n.tape == inner.id));
        if !tracked {
            return None;
        }
        let saved = inputs
            .iter()
            .map(|t| SavedInput {
                node: t
                    .node()
                    .and_then(|n| (n.tape == inner.id).then_some(n.idx)),
                data: t.data_arc().clone(),
                shape: t.shape().to_vec(),
            })
            .collect();
        let idx = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            inputs: saved,
            out: out_data.clone(),
            out_shape: out_shape.to_vec(),
        });
        Some(NodeRef {
            tape: inner.id,
            idx,
        })
    })
}

/// Leaf gradients produced by [`backward`]. Unreached leaves read as zeros.
pub struct Gradients {
    tape: u64,
    by_leaf: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to a watched leaf.
    pub fn wrt(&self, leaf: &Tensor) -> Result<Tensor> {
        let node = leaf.node().filter(|n| n.tape == self.tape).ok_or_else(|| {
            PopError::Contract("wrt: tensor is not tracked on the differentiated tape".into())
        })?;
        self.by_leaf
            .get(&node.idx)
            .cloned()
            .ok_or_else(|| PopError::Contract("wrt: tensor is not a watched leaf".into()))
    }

    /// Convenience for rank-0/1-element leaves.
    pub fn wrt_scalar(&self, leaf: &Tensor) -> Result<f64> {
        self.wrt(leaf)?.item()
    }
}

/// Reverse sweep from a scalar loss. The tape stays active afterwards, so a
/// caller may differentiate several scalars in one scope; each call performs
/// an independent sweep.
pub fn backward(loss: &Tensor) -> Result<Gradients> {
    TAPE.with(|cell| {
        let slot = cell.borrow();
        let inner = slot
            .as_ref()
            .ok_or_else(|| PopError::Contract("backward: no active tape on this thread".into()))?;
        let root = match loss.node() {
            Some(n) if n.tape == inner.id => n,
            _ => {
                return Err(PopError::Contract(
                    "backward: loss is not recorded on the active tape".into(),
                ))
            }
        };
        if loss.numel() != 1 {
            return Err(PopError::Contract(format!(
                "backward: loss must be a scalar, got shape {:?}",
                loss.shape()
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..inner.nodes.len()).map(|_| None).collect();
        grads[root.idx] = Some(vec![1.0]);

        for i in (0..=root.idx).rev() {
            if matches!(inner.nodes[i].op, OpKind::Leaf) {
                continue; // leaf gradients are harvested after the sweep
            }
            let Some(up) = grads[i].take() else { continue };
            let node = &inner.nodes[i];
            let contribs = vjp(node, &up);
            for (input, contrib) in node.inputs.iter().zip(contribs) {
                let (Some(j), Some(c)) = (input.node, contrib) else {
                    continue;
                };
                match &mut grads[j] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&c) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(c),
                }
            }
        }

        let mut by_leaf = HashMap::new();
        for (i, node) in inner.nodes.iter().enumerate() {
            if matches!(node.op, OpKind::Leaf) {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.out.len()]);
                by_leaf.insert(i, Tensor::raw(node.out_shape.clone(), Arc::new(g), None));
            }
        }
        Ok(Gradients {
            tape: inner.id,
            by_leaf,
        })
    })
}

fn needs(node: &Node, i: usize) -> bool {
    node.inputs[i].node.is_some()
}

/// Vector-Jacobian products for one node: upstream cotangent in, one
/// cotangent per input out (None for untracked inputs).
fn vjp(node: &Node, up: &[f64]) -> Vec<Option<Vec<f64>>> {
    let ins = &node.inputs;
    match &node.op {
        OpKind::Leaf => Vec::new(),

        OpKind::Matmul { transpose_b } => {
            let (m, n) = (node.out_shape[0], node.out_shape[1]);
            let k = ins[0].shape[1];
            let a = &ins[0].data;
            let b = &ins[1].data;
            let da = needs(node, 0).then(|| {
                let mut g = vec![0.0; m * k];
                if *transpose_b {
                    // C = A·Bᵀ with B stored [n×k]: dA = dC·B
                    ops::gemm_raw(m, n, k, up, false, b, false, &mut g);
                } else {
                    // dA = dC·Bᵀ with B stored [k×n]
                    ops::gemm_raw(m, n, k, up, false, b, true, &mut g);
                }
                g
            });
            let db = needs(node, 1).then(|| {
                if *transpose_b {
                    // dB[n×k] = dCᵀ·A
                    let mut g = vec![0.0; n * k];
                    ops::gemm_raw(n, m, k, up, true, a, false, &mut g);
                    g
                } else {
                    // dB[k×n] = Aᵀ·dC
                    let mut g = vec![0.0; k * n];
                    ops::gemm_raw(k, m, n, a, true, up, false, &mut g);
                    g
                }
            });
            vec![da, db]
        }

        OpKind::Add(bc) => {
            let da = needs(node, 0).then(|| up.to_vec());
            let db = needs(node, 1).then(|| reduce_like(up, &node.out_shape, *bc));
            vec![da, db]
        }

        OpKind::Mul(bc) => {
            let a = &ins[0].data;
            let b = &ins[1].data;
            let da = needs(node, 0).then(|| {
                let mut g = vec![0.0; a.len()];
                match bc {
                    Broadcast::Full => {
                        for i in 0..g.len() {
                            g[i] = up[i] * b[i];
                        }
                    }
                    Broadcast::Row => {
                        let d = b.len();
                        for i in 0..g.len() {
                            g[i] = up[i] * b[i % d];
                        }
                    }
                    Broadcast::Scalar => {
                        for i in 0..g.len() {
                            g[i] = up[i] * b[0];
                        }
                    }
                }
                g
            });
            let db = needs(node, 1).then(|| {
                let mut prod = vec![0.0; a.len()];
                for i in 0..a.len() {
                    prod[i] = up[i] * a[i];
                }
                reduce_to(&prod, &node.out_shape, *bc, ins[1].data.len())
            });
            vec![da, db]
        }

        OpKind::ScaleRows => {
            let x = &ins[0].data;
            let rows = &ins[1].data;
            let r = ins[1].data.len();
            let cols = x.len() / r;
            let dx = needs(node, 0).then(|| {
                let mut g = vec![0.0; x.len()];
                for i in 0..r {
                    let s = rows[i];
                    for j in 0..cols {
                        g[i * cols + j] = up[i * cols + j] * s;
                    }
                }
                g
            });
            let dr = needs(node, 1).then(|| {
                let mut g = vec![0.0; r];
                for i in 0..r {
                    let mut acc = 0.0;
                    for j in 0..cols {
                        acc += up[i * cols + j] * x[i * cols + j];
                    }
                    g[i] = acc;
                }
                g
            });
            vec![dx, dr]
        }

        OpKind::ScaleConst(c) => {
            let dx = needs(node, 0).then(|| up.iter().map(|u| u * c).collect());
            vec![dx]
        }

        OpKind::Silu => {
            let x = &ins[0].data;
            let dx = needs(node, 0).then(|| {
                let mut g = vec![0.0; x.len()];
                for i in 0..x.len() {
                    let s = ops::sigmoid(x[i]);
                    g[i] = up[i] * (s + x[i] * s * (1.0 - s));
                }
                g
            });
            vec![dx]
        }

        OpKind::RmsNorm { eps } => {
            let x = &ins[0].data;
            let w = &ins[1].data;
            let d = w.len();
            let rows = x.len() / d;
            let mut dx = needs(node, 0).then(|| vec![0.0; x.len()]);
            let mut dw = needs(node, 1).then(|| vec![0.0; d]);
            for r in 0..rows {
                let xr = &x[r * d..(r + 1) * d];
                let ur = &up[r * d..(r + 1) * d];
                let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
                let inv = 1.0 / (ms + eps).sqrt();
                if let Some(dx) = dx.as_mut() {
                    let dot: f64 = (0..d).map(|j| ur[j] * w[j] * xr[j]).sum();
                    let c = inv * inv * inv * dot / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = inv * w[j] * ur[j] - c * xr[j];
                    }
                }
                if let Some(dw) = dw.as_mut() {
                    for j in 0..d {
                        dw[j] += ur[j] * xr[j] * inv;
                    }
                }
            }
            vec![dx, dw]
        }

        OpKind::SoftmaxRows => {
            let p = &node.out;
            let n = *node.out_shape.last().unwrap();
            let dx = needs(node, 0).then(|| {
                let mut g = vec![0.0; p.len()];
                for r in 0..p.len() / n {
                    let pr = &p[r * n..(r + 1) * n];
                    let ur = &up[r * n..(r + 1) * n];
                    let dot: f64 = (0..n).map(|j| ur[j] * pr[j]).sum();
                    for j in 0..n {
                        g[r * n + j] = pr[j] * (ur[j] - dot);
                    }
                }
                g
            });
            vec![dx]
        }

        OpKind::MaskedSoftmaxRows { allowed } => {
            let p = &node.out;
            let n = *node.out_shape.last().unwrap();
            let dx = needs(node, 0).then(|| {
                let mut g = vec![0.0; p.len()];
                for (r, &len) in allowed.iter().enumerate() {
                    let pr = &p[r * n..r * n + len];
                    let ur = &up[r * n..r * n + len];
                    let dot: f64 = pr.iter().zip(ur).map(|(p, u)| p * u).sum();
                    for j in 0..len {
                        g[r * n + j] = pr[j] * (ur[j] - dot);
                    }
                }
                g
            });
            vec![dx]
        }

        OpKind::Rope { positions, theta } => {
            // The forward rotation is orthogonal; its transpose is the
            // rotation by the negated angles.
            let dx = needs(node, 0).then(|| {
                let mut g = up.to_vec();
                ops::rope_rotate_in_place(&mut g, &node.out_shape, positions, *theta, true);
                g
            });
            vec![dx]
        }

        OpKind::CrossEntropy { targets, mask } => {
            let logits = &ins[0].data;
            let v = ins[0].shape[1];
            let u = up[0];
            let dx = needs(node, 0).then(|| {
                let mut g = vec![0.0; logits.len()];
                for (t, (&tok, &on)) in targets.iter().zip(mask.iter()).enumerate() {
                    if !on {
                        continue;
                    }
                    let row = &logits[t * v..(t + 1) * v];
                    let gr = &mut g[t * v..(t + 1) * v];
                    ops::softmax_into(row, gr);
                    for x in gr.iter_mut() {
                        *x *= u;
                    }
                    gr[tok as usize] -= u;
                }
                g
            });
            vec![dx]
        }

        OpKind::EmbedLookup { ids } => {
            let d = *node.out_shape.last().unwrap();
            let dt = needs(node, 0).then(|| {
                let mut g = vec![0.0; ins[0].data.len()];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut g[id as usize * d..(id as usize + 1) * d];
                    let src = &up[r * d..(r + 1) * d];
                    for (a, b) in dst.iter_mut().zip(src) {
                        *a += b;
                    }
                }
                g
            });
            vec![dt]
        }

        OpKind::ConcatRows => {
            let mut offset = 0;
            ins.iter()
                .enumerate()
                .map(|(i, input)| {
                    let len = input.data.len();
                    let piece =
                        needs(node, i).then(|| up[offset..offset + len].to_vec());
                    offset += len;
                    piece
                })
                .collect()
        }

        OpKind::ConcatHeads => {
            let t = node.out_shape[0];
            let hd = ins[0].shape[1];
            let width = node.out_shape[1];
            ins.iter()
                .enumerate()
                .map(|(h, _)| {
                    needs(node, h).then(|| {
                        let mut g = vec![0.0; t * hd];
                        for r in 0..t {
                            let src = &up[r * width + h * hd..r * width + (h + 1) * hd];
                            g[r * hd..(r + 1) * hd].copy_from_slice(src);
                        }
                        g
                    })
                })
                .collect()
        }

        OpKind::SliceHead { head } => {
            let (t, heads, hd) = (ins[0].shape[0], ins[0].shape[1], ins[0].shape[2]);
            let dx = needs(node, 0).then(|| {
                let mut g = vec![0.0; t * heads * hd];
                for r in 0..t {
                    let dst = &mut g[(r * heads + head) * hd..(r * heads + head + 1) * hd];
                    dst.copy_from_slice(&up[r * hd..(r + 1) * hd]);
                }
                g
            });
            vec![dx]
        }

        OpKind::Reshape => vec![needs(node, 0).then(|| up.to_vec())],
    }
}

/// Reduces a full-shaped cotangent onto a broadcast operand.
fn reduce_like(up: &[f64], out_shape: &[usize], bc: Broadcast) -> Vec<f64> {
    match bc {
        Broadcast::Full => up.to_vec(),
        Broadcast::Row => {
            let d = *out_shape.last().unwrap();
            let mut g = vec![0.0; d];
            for (i, u) in up.iter().enumerate() {
                g[i % d] += u;
            }
            g
        }
        Broadcast::Scalar => vec![up.iter().sum()],
    }
}

fn reduce_to(full: &[f64], out_shape: &[usize], bc: Broadcast, want: usize) -> Vec<f64> {
    let g = reduce_like(full, out_shape, bc);
    debug_assert_eq!(g.len(), want);
    g
}
