//! Forward kernels for the op set, plus the raw GEMM shim shared with the
//! backward pass. Every op validates shapes up front, checks its output for
//! non-finite values (overflow is an error, never a silent Inf), and records
//! itself on the active tape when an operand is tracked.

use super::tape::{self, Broadcast, OpKind};
use super::Tensor;
use crate::error::{PopError, Result};
use std::sync::Arc;

/// Row-major GEMM: out[m×n] = A·B with optional logical transposes.
/// `a` is stored [m×k] (or [k×m] when `ta`), `b` stored [k×n] (or [n×k]
/// when `tb`). Backed by a blocked SIMD kernel; the accumulation order for
/// each output element depends only on k, so identical rows produce
/// bitwise-identical results regardless of how the m dimension is batched.
pub(super) fn gemm_raw(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    out: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.fill(0.0);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(super) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable softmax of one row into `out` (same length).
pub(super) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Applies the RoPE pair rotations in place; `inverse` negates the angles.
/// Shape is [T × heads × head_dim]; one angle table per (position, pair) is
/// shared across heads.
pub(super) fn rope_rotate_in_place(
    data: &mut [f64],
    shape: &[usize],
    positions: &[usize],
    theta_base: f64,
    inverse: bool,
) {
    let (t, heads, hd) = (shape[0], shape[1], shape[2]);
    let half = hd / 2;
    let mut freqs = vec![0.0; half];
    for (i, f) in freqs.iter_mut().enumerate() {
        *f = theta_base.powf(-2.0 * i as f64 / hd as f64);
    }
    for (ti, &pos) in positions.iter().enumerate().take(t) {
        for (i, &f) in freqs.iter().enumerate() {
            let angle = pos as f64 * f;
            let (mut s, c) = angle.sin_cos();
            if inverse {
                s = -s;
            }
            for h in 0..heads {
                let base = (ti * heads + h) * hd + 2 * i;
                let (x0, x1) = (data[base], data[base + 1]);
                data[base] = x0 * c - x1 * s;
                data[base + 1] = x0 * s + x1 * c;
            }
        }
    }
}

/// Builds the output tensor, enforcing the no-NaN/Inf guarantee and
/// recording the node when tracking applies.
fn finish(
    opname: &'static str,
    op: OpKind,
    inputs: &[&Tensor],
    shape: Vec<usize>,
    data: Vec<f64>,
) -> Result<Tensor> {
    if !data.iter().all(|v| v.is_finite()) {
        return Err(PopError::NonFinite { op: opname });
    }
    let arc = Arc::new(data);
    let node = tape::record(op, inputs, &arc, &shape);
    Ok(Tensor::raw(shape, arc, node))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(PopError::Dimension {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    gemm_raw(m, k, n, a.data(), false, b.data(), false, &mut out);
    finish(
        "matmul",
        OpKind::Matmul { transpose_b: false },
        &[a, b],
        vec![m, n],
        out,
    )
}

/// `a[m×k] · b[n×k]ᵀ` without materializing the transpose; the attention
/// score kernel.
pub(crate) fn matmul_tb(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(PopError::Dimension {
            op: "matmul_tb",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
    let mut out = vec![0.0; m * n];
    gemm_raw(m, k, n, a.data(), false, b.data(), true, &mut out);
    finish(
        "matmul_tb",
        OpKind::Matmul { transpose_b: true },
        &[a, b],
        vec![m, n],
        out,
    )
}

/// Classifies the only broadcasts this library supports: identical shapes,
/// a row vector over the last dimension, or a single-element scalar.
fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Full)
    } else if b.rank() == 1 && a.rank() >= 1 && b.shape()[0] == *a.shape().last().unwrap() {
        Ok(Broadcast::Row)
    } else if b.numel() == 1 {
        Ok(Broadcast::Scalar)
    } else {
        Err(PopError::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let bc = broadcast_kind("add", a, b)?;
    let (x, y) = (a.data(), b.data());
    let mut out = vec![0.0; x.len()];
    match bc {
        Broadcast::Full => {
            for i in 0..x.len() {
                out[i] = x[i] + y[i];
            }
        }
        Broadcast::Row => {
            let d = y.len();
            for i in 0..x.len() {
                out[i] = x[i] + y[i % d];
            }
        }
        Broadcast::Scalar => {
            for i in 0..x.len() {
                out[i] = x[i] + y[0];
            }
        }
    }
    finish("add", OpKind::Add(bc), &[a, b], a.shape().to_vec(), out)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let bc = broadcast_kind("mul", a, b)?;
    let (x, y) = (a.data(), b.data());
    let mut out = vec![0.0; x.len()];
    match bc {
        Broadcast::Full => {
            for i in 0..x.len() {
                out[i] = x[i] * y[i];
            }
        }
        Broadcast::Row => {
            let d = y.len();
            for i in 0..x.len() {
                out[i] = x[i] * y[i % d];
            }
        }
        Broadcast::Scalar => {
            for i in 0..x.len() {
                out[i] = x[i] * y[0];
            }
        }
    }
    finish("mul", OpKind::Mul(bc), &[a, b], a.shape().to_vec(), out)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    let out = x.data().iter().map(|&v| v * sigmoid(v)).collect();
    finish("silu", OpKind::Silu, &[x], x.shape().to_vec(), out)
}

/// Scales row `i` of `x` (first axis) by `rows[i]`; the per-position gate
/// primitive.
pub fn scale_rows(x: &Tensor, rows: &Tensor) -> Result<Tensor> {
    if x.rank() < 1 || rows.rank() != 1 || rows.shape()[0] != x.shape()[0] {
        return Err(PopError::Dimension {
            op: "scale_rows",
            lhs: x.shape().to_vec(),
            rhs: rows.shape().to_vec(),
        });
    }
    let r = x.shape()[0];
    let cols = x.numel() / r.max(1);
    let mut out = vec![0.0; x.numel()];
    for i in 0..r {
        let s = rows.data()[i];
        for j in 0..cols {
            out[i * cols + j] = x.data()[i * cols + j] * s;
        }
    }
    finish(
        "scale_rows",
        OpKind::ScaleRows,
        &[x, rows],
        x.shape().to_vec(),
        out,
    )
}

pub fn scale_const(x: &Tensor, c: f64) -> Result<Tensor> {
    let out = x.data().iter().map(|&v| v * c).collect();
    finish(
        "scale_const",
        OpKind::ScaleConst(c),
        &[x],
        x.shape().to_vec(),
        out,
    )
}

/// Root-mean-square normalization over the last dimension, then an
/// elementwise weight. No mean subtraction, no bias.
pub fn rmsnorm(x: &Tensor, weight: &Tensor, eps: f64) -> Result<Tensor> {
    if weight.rank() != 1 || x.rank() < 1 || *x.shape().last().unwrap() != weight.shape()[0] {
        return Err(PopError::Dimension {
            op: "rmsnorm",
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    if eps < 0.0 {
        return Err(PopError::Config(format!("rmsnorm: eps must be ≥ 0, got {eps}")));
    }
    let d = weight.shape()[0];
    let w = weight.data();
    let mut out = vec![0.0; x.numel()];
    for (row, orow) in x.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        for j in 0..d {
            orow[j] = row[j] * inv * w[j];
        }
    }
    finish(
        "rmsnorm",
        OpKind::RmsNorm { eps },
        &[x, weight],
        x.shape().to_vec(),
        out,
    )
}

/// Softmax over each length-n row of a [...×n] tensor, max-subtracted.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 1 {
        return Err(PopError::Contract("softmax_rows: rank-0 input".into()));
    }
    let n = *x.shape().last().unwrap();
    let mut out = vec![0.0; x.numel()];
    for (row, orow) in x.data().chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        softmax_into(row, orow);
    }
    finish(
        "softmax_rows",
        OpKind::SoftmaxRows,
        &[x],
        x.shape().to_vec(),
        out,
    )
}

/// Causal attention softmax: row `r` is a softmax over its first
/// `allowed[r]` entries, zero beyond. A row with `allowed == 0` is all
/// zeros.
pub(crate) fn masked_softmax_rows(x: &Tensor, allowed: &[usize]) -> Result<Tensor> {
    if x.rank() != 2 || allowed.len() != x.shape()[0] {
        return Err(PopError::Contract(format!(
            "masked_softmax_rows: {} mask entries for shape {:?}",
            allowed.len(),
            x.shape()
        )));
    }
    let n = x.shape()[1];
    if let Some(&bad) = allowed.iter().find(|&&a| a > n) {
        return Err(PopError::Index {
            what: "softmax mask prefix",
            index: bad,
            bound: n,
        });
    }
    let mut out = vec![0.0; x.numel()];
    for (r, &len) in allowed.iter().enumerate() {
        if len > 0 {
            let row = &x.data()[r * n..r * n + len];
            softmax_into(row, &mut out[r * n..r * n + len]);
        }
    }
    finish(
        "masked_softmax_rows",
        OpKind::MaskedSoftmaxRows {
            allowed: Arc::new(allowed.to_vec()),
        },
        &[x],
        x.shape().to_vec(),
        out,
    )
}

/// Rotates consecutive dimension pairs (2i, 2i+1) of a [T×heads×head_dim]
/// tensor by `pos·theta_base^(−2i/head_dim)`.
pub fn rope_apply(x: &Tensor, positions: &[usize], theta_base: f64) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(PopError::Contract(format!(
            "rope_apply: expected [T×heads×head_dim], got {:?}",
            x.shape()
        )));
    }
    if x.shape()[2] % 2 != 0 {
        return Err(PopError::Config(format!(
            "rope_apply: head_dim must be even, got {}",
            x.shape()[2]
        )));
    }
    if positions.len() != x.shape()[0] {
        return Err(PopError::Contract(format!(
            "rope_apply: {} positions for {} rows",
            positions.len(),
            x.shape()[0]
        )));
    }
    if !(theta_base > 0.0) {
        return Err(PopError::Config(format!(
            "rope_apply: theta_base must be positive, got {theta_base}"
        )));
    }
    let mut out = x.data().to_vec();
    rope_rotate_in_place(&mut out, x.shape(), positions, theta_base, false);
    finish(
        "rope_apply",
        OpKind::Rope {
            positions: Arc::new(positions.to_vec()),
            theta: theta_base,
        },
        &[x],
        x.shape().to_vec(),
        out,
    )
}

/// Masked cross-entropy: Σ over masked positions of −log softmax(row)[target].
/// A sum, not a mean — callers decide the normalization.
pub fn cross_entropy(logits: &Tensor, targets: &[u32], mask: &[bool]) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(PopError::Contract(format!(
            "cross_entropy: expected [T×V] logits, got {:?}",
            logits.shape()
        )));
    }
    let (t, v) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != t || mask.len() != t {
        return Err(PopError::Contract(format!(
            "cross_entropy: {} targets / {} mask entries for {} rows",
            targets.len(),
            mask.len(),
            t
        )));
    }
    let mut loss = 0.0;
    for (i, (&tok, &on)) in targets.iter().zip(mask.iter()).enumerate() {
        if !on {
            continue;
        }
        if tok as usize >= v {
            return Err(PopError::Index {
                what: "target token",
                index: tok as usize,
                bound: v,
            });
        }
        let row = &logits.data()[i * v..(i + 1) * v];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        loss += lse - row[tok as usize];
    }
    finish(
        "cross_entropy",
        OpKind::CrossEntropy {
            targets: Arc::new(targets.to_vec()),
            mask: Arc::new(mask.to_vec()),
        },
        &[logits],
        Vec::new(),
        vec![loss],
    )
}

/// Gathers rows of `table[V×d]` for each token id.
pub fn embedding_lookup(table: &Tensor, ids: &[u32]) -> Result<Tensor> {
    if table.rank() != 2 {
        return Err(PopError::Contract(format!(
            "embedding_lookup: expected [V×d] table, got {:?}",
            table.shape()
        )));
    }
    let (v, d) = (table.shape()[0], table.shape()[1]);
    let mut out = vec![0.0; ids.len() * d];
    for (r, &id) in ids.iter().enumerate() {
        if id as usize >= v {
            return Err(PopError::Index {
                what: "token id",
                index: id as usize,
                bound: v,
            });
        }
        out[r * d..(r + 1) * d].copy_from_slice(&table.data()[id as usize * d..(id as usize + 1) * d]);
    }
    finish(
        "embedding_lookup",
        OpKind::EmbedLookup {
            ids: Arc::new(ids.to_vec()),
        },
        &[table],
        vec![ids.len(), d],
        out,
    )
}

/// Concatenates along the first axis; trailing dimensions must agree.
pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| PopError::Contract("concat_rows: empty input list".into()))?;
    let tail = &first.shape()[1..];
    let mut rows = 0;
    for p in parts {
        if p.rank() != first.rank() || &p.shape()[1..] != tail {
            return Err(PopError::Dimension {
                op: "concat_rows",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        rows += p.shape()[0];
    }
    let mut shape = first.shape().to_vec();
    shape[0] = rows;
    let mut out = Vec::with_capacity(rows * tail.iter().product::<usize>());
    for p in parts {
        out.extend_from_slice(p.data());
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    finish("concat_rows", OpKind::ConcatRows, &refs, shape, out)
}

/// Extracts head `h` of a [t×heads×head_dim] tensor as [t×head_dim].
pub(crate) fn slice_head(x: &Tensor, head: usize) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(PopError::Contract(format!(
            "slice_head: expected [t×heads×head_dim], got {:?}",
            x.shape()
        )));
    }
    let (t, heads, hd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if head >= heads {
        return Err(PopError::Index {
            what: "head",
            index: head,
            bound: heads,
        });
    }
    let mut out = vec![0.0; t * hd];
    for r in 0..t {
        let src = &x.data()[(r * heads + head) * hd..(r * heads + head + 1) * hd];
        out[r * hd..(r + 1) * hd].copy_from_slice(src);
    }
    finish(
        "slice_head",
        OpKind::SliceHead { head },
        &[x],
        vec![t, hd],
        out,
    )
}

/// Reassembles per-head [t×head_dim] outputs into [t×(heads·head_dim)],
/// the inverse of repeated `slice_head`.
pub(crate) fn concat_heads(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| PopError::Contract("concat_heads: empty input list".into()))?;
    if first.rank() != 2 {
        return Err(PopError::Contract(format!(
            "concat_heads: expected [t×head_dim] parts, got {:?}",
            first.shape()
        )));
    }
    let (t, hd) = (first.shape()[0], first.shape()[1]);
    for p in parts {
        if p.shape() != [t, hd] {
            return Err(PopError::Dimension {
                op: "concat_heads",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let heads = parts.len();
    let width = heads * hd;
    let mut out = vec![0.0; t * width];
    for (h, p) in parts.iter().enumerate() {
        for r in 0..t {
            out[r * width + h * hd..r * width + (h + 1) * hd]
                .copy_from_slice(&p.data()[r * hd..(r + 1) * hd]);
        }
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    finish("concat_heads", OpKind::ConcatHeads, &refs, vec![t, width], out)
}

/// Shape-only view used by `Tensor::reshape`; shares storage.
pub(super) fn reshape_view(x: &Tensor, shape: Vec<usize>) -> Tensor {
    let arc = x.data_arc().clone();
    let node = tape::record(OpKind::Reshape, &[x], &arc, &shape);
    Tensor::raw(shape, arc, node)
}
