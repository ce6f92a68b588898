//! Finite-difference validation of every VJP in the op set.
//!
//! Each test builds a small graph twice: once tracked (reverse-mode
//! gradients) and once per perturbed entry (central differences, h=1e-4).
//! Agreement is relative error ≤ 1e-5 with an absolute floor for
//! near-zero entries — the differencing itself carries O(h²) noise.

use super::tape::{backward, watch, with_tape};
use super::*;

const H: f64 = 1e-4;
const REL_TOL: f64 = 1e-5;

/// Reduces any tensor to a 1-element [1×1] tensor by two fixed-weight
/// matmuls, so arbitrary op outputs can feed `backward`.
fn scalarize(x: &Tensor) -> Tensor {
    let n = x.numel();
    let flat = x.reshape(&[1, n]).unwrap();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64 * 0.7).sin() + 2.0) * 0.25).collect();
    let w = Tensor::from_vec(&[n, 1], w).unwrap();
    matmul(&flat, &w).unwrap()
}

/// Asserts reverse-mode gradients of `build` match central differences for
/// every element of every leaf.
fn fd_check(leaves: &[Tensor], build: &dyn Fn(&[Tensor]) -> Tensor) {
    let (loss0, grads) = with_tape(|| {
        let tracked: Vec<Tensor> = leaves.iter().map(|l| watch(l).unwrap()).collect();
        let loss = build(&tracked);
        let g = backward(&loss).unwrap();
        let per_leaf: Vec<Vec<f64>> = tracked
            .iter()
            .map(|t| g.wrt(t).unwrap().data().to_vec())
            .collect();
        (loss.item().unwrap(), per_leaf)
    });
    assert!(loss0.is_finite());

    for (li, leaf) in leaves.iter().enumerate() {
        for j in 0..leaf.numel() {
            let eval = |delta: f64| {
                let mut data = leaf.data().to_vec();
                data[j] += delta;
                let mut bumped: Vec<Tensor> = leaves.to_vec();
                bumped[li] = Tensor::from_vec(leaf.shape(), data).unwrap();
                build(&bumped).item().unwrap()
            };
            let fd = (eval(H) - eval(-H)) / (2.0 * H);
            let ad = grads[li][j];
            let scale = ad.abs().max(fd.abs()).max(1e-2);
            assert!(
                (ad - fd).abs() <= REL_TOL * scale,
                "leaf {li} elem {j}: reverse-mode {ad} vs finite-diff {fd}"
            );
        }
    }
}

/// Deterministic filler so tests need no RNG dependency.
fn filled(shape: &[usize], phase: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| (i as f64 * 0.63 + phase).sin() * 0.8)
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

#[test]
fn product_rule_hand_case() {
    // loss = x·y at (3,4) → ∂/∂x = 4, ∂/∂y = 3, exactly.
    let x = Tensor::from_vec(&[1], vec![3.0]).unwrap();
    let y = Tensor::from_vec(&[1], vec![4.0]).unwrap();
    with_tape(|| {
        let (tx, ty) = (watch(&x).unwrap(), watch(&y).unwrap());
        let loss = mul(&tx, &ty).unwrap();
        let g = backward(&loss).unwrap();
        assert_eq!(g.wrt(&tx).unwrap().data(), &[4.0]);
        assert_eq!(g.wrt(&ty).unwrap().data(), &[3.0]);
    });
}

#[test]
fn unused_leaf_gets_zero_gradient() {
    let x = Tensor::from_vec(&[1], vec![2.0]).unwrap();
    let y = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    with_tape(|| {
        let tx = watch(&x).unwrap();
        let ty = watch(&y).unwrap();
        let loss = scale_const(&tx, 5.0).unwrap();
        let g = backward(&loss).unwrap();
        assert_eq!(g.wrt(&tx).unwrap().data(), &[5.0]);
        assert_eq!(g.wrt(&ty).unwrap().data(), &[0.0, 0.0, 0.0]);
    });
}

#[test]
fn backward_rejects_non_scalar_and_untracked_losses() {
    let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
    with_tape(|| {
        let tx = watch(&x).unwrap();
        let vec_loss = silu(&tx).unwrap();
        assert!(matches!(backward(&vec_loss), Err(PopError::Contract(_))));
        let plain = Tensor::scalar(1.0);
        assert!(matches!(backward(&plain), Err(PopError::Contract(_))));
    });
}

#[test]
fn watch_and_backward_require_an_active_tape() {
    let x = Tensor::scalar(1.0);
    assert!(matches!(tape::watch(&x), Err(PopError::Contract(_))));
    assert!(matches!(tape::backward(&x), Err(PopError::Contract(_))));
}

#[test]
fn matmul_gradients() {
    let a = filled(&[3, 4], 0.1);
    let b = filled(&[4, 2], 1.3);
    fd_check(&[a, b], &|l| scalarize(&matmul(&l[0], &l[1]).unwrap()));
}

#[test]
fn matmul_tb_gradients() {
    let a = filled(&[3, 4], 0.2);
    let b = filled(&[5, 4], 2.1);
    fd_check(&[a, b], &|l| scalarize(&matmul_tb(&l[0], &l[1]).unwrap()));
}

#[test]
fn add_gradients_all_broadcasts() {
    let a = filled(&[2, 3], 0.0);
    fd_check(&[a.clone(), filled(&[2, 3], 1.0)], &|l| {
        scalarize(&add(&l[0], &l[1]).unwrap())
    });
    fd_check(&[a.clone(), filled(&[3], 2.0)], &|l| {
        scalarize(&add(&l[0], &l[1]).unwrap())
    });
    fd_check(&[a, Tensor::scalar(0.7)], &|l| {
        scalarize(&add(&l[0], &l[1]).unwrap())
    });
}

#[test]
fn mul_gradients_all_broadcasts() {
    let a = filled(&[2, 3], 0.4);
    fd_check(&[a.clone(), filled(&[2, 3], 1.4)], &|l| {
        scalarize(&mul(&l[0], &l[1]).unwrap())
    });
    fd_check(&[a.clone(), filled(&[3], 2.4)], &|l| {
        scalarize(&mul(&l[0], &l[1]).unwrap())
    });
    fd_check(&[a, Tensor::scalar(1.3)], &|l| {
        scalarize(&mul(&l[0], &l[1]).unwrap())
    });
}

#[test]
fn silu_and_scale_gradients() {
    let x = filled(&[2, 4], 0.9);
    fd_check(&[x.clone()], &|l| scalarize(&silu(&l[0]).unwrap()));
    fd_check(&[x.clone()], &|l| scalarize(&scale_const(&l[0], -1.7).unwrap()));
    let rows = filled(&[2], 3.0);
    fd_check(&[x, rows], &|l| scalarize(&scale_rows(&l[0], &l[1]).unwrap()));
}

#[test]
fn rmsnorm_gradients_for_input_and_weight() {
    let x = filled(&[3, 5], 0.6);
    let w = filled(&[5], 4.0);
    fd_check(&[x, w], &|l| scalarize(&rmsnorm(&l[0], &l[1], 1e-6).unwrap()));
}

#[test]
fn softmax_gradients_plain_and_masked() {
    let x = filled(&[3, 4], 1.1);
    fd_check(&[x.clone()], &|l| scalarize(&softmax_rows(&l[0]).unwrap()));
    fd_check(&[x], &|l| {
        scalarize(&masked_softmax_rows(&l[0], &[1, 3, 4]).unwrap())
    });
}

#[test]
fn rope_gradients() {
    let x = filled(&[3, 2, 4], 0.3);
    fd_check(&[x], &|l| {
        scalarize(&rope_apply(&l[0], &[0, 4, 9], 10000.0).unwrap())
    });
}

#[test]
fn cross_entropy_gradients() {
    let logits = filled(&[4, 6], 0.8);
    let targets = [5u32, 0, 3, 2];
    let mask = [true, false, true, true];
    fd_check(&[logits], &|l| cross_entropy(&l[0], &targets, &mask).unwrap());
}

#[test]
fn embedding_scatter_gradients() {
    // Repeated ids must accumulate.
    let table = filled(&[5, 3], 0.5);
    fd_check(&[table], &|l| {
        scalarize(&embedding_lookup(&l[0], &[2, 4, 2, 0]).unwrap())
    });
}

#[test]
fn concat_slice_and_reshape_gradients() {
    let a = filled(&[2, 3], 0.0);
    let b = filled(&[1, 3], 5.0);
    fd_check(&[a.clone(), b], &|l| {
        scalarize(&concat_rows(&[l[0].clone(), l[1].clone()]).unwrap())
    });
    let x = filled(&[2, 3, 2], 1.9);
    fd_check(&[x.clone()], &|l| scalarize(&slice_head(&l[0], 1).unwrap()));
    fd_check(&[x], &|l| {
        let heads: Vec<Tensor> = (0..3).map(|h| slice_head(&l[0], h).unwrap()).collect();
        scalarize(&concat_heads(&heads).unwrap())
    });
    fd_check(&[a], &|l| {
        scalarize(&l[0].reshape(&[3, 2]).unwrap())
    });
}

#[test]
fn composite_transformer_like_graph() {
    // matmul → add bias → silu → rmsnorm → matmul → cross-entropy: the shape
    // of a real calibration loss, differentiated end to end.
    let x = filled(&[3, 4], 0.2);
    let w1 = filled(&[4, 6], 1.0);
    let bias = filled(&[6], 2.2);
    let nw = filled(&[6], 3.1);
    let w2 = filled(&[6, 5], 0.7);
    let targets = [1u32, 4, 0];
    let mask = [true, true, false];
    fd_check(&[x, w1, bias, nw, w2], &|l| {
        let h = silu(&add(&matmul(&l[0], &l[1]).unwrap(), &l[2]).unwrap()).unwrap();
        let n = rmsnorm(&h, &l[3], 1e-6).unwrap();
        let logits = matmul(&n, &l[4]).unwrap();
        cross_entropy(&logits, &targets, &mask).unwrap()
    });
}

#[test]
fn leaf_reused_in_two_branches_accumulates() {
    // x feeds both operands of mul, so its two contributions must add.
    let x = filled(&[3], 0.7);
    fd_check(&[x], &|l| scalarize(&mul(&l[0], &l[0]).unwrap()));
}

#[test]
fn forward_replay_is_bitwise_deterministic() {
    let run = || {
        let x = filled(&[4, 4], 0.21);
        let w = filled(&[4, 4], 1.11);
        let nw = filled(&[4], 0.02);
        let h = rmsnorm(&matmul(&x, &w).unwrap(), &nw, 1e-6).unwrap();
        softmax_rows(&h).unwrap().data().to_vec()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    // ... and identical whether or not a tape is recording.
    let c = with_tape(run);
    assert_eq!(a, c);
}

#[test]
fn tracked_and_untracked_forward_agree_bitwise() {
    let x = filled(&[3, 4], 0.5);
    let w = filled(&[4, 4], 1.5);
    let plain = matmul(&x, &w).unwrap().data().to_vec();
    let tracked = with_tape(|| {
        let tx = watch(&x).unwrap();
        let tw = watch(&w).unwrap();
        matmul(&tx, &tw).unwrap().data().to_vec()
    });
    assert_eq!(plain, tracked);
}
