//! Finite-difference checks for every differentiable op: random inputs of
//! rank <= 3 and extent <= 8, 64-bit precision, central step 1e-5, relative
//! error below 1e-4. The numeric side only ever runs forward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unimix_core::fdcheck::{central_diff, max_rel_err, FD_STEP};
use unimix_core::{Tape, Tensor, Var};

const TOL: f64 = 1e-4;

/// Project an op output to a scalar with a fixed random cotangent so the
/// check exercises non-uniform upstream gradients.
fn spot(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc07a_96e7);
    let r = Tensor::randn(tape.value(v).shape(), 1.0, &mut rng);
    let c = tape.constant(r);
    let m = tape.mul(v, c).unwrap();
    tape.sum_all(m)
}

fn check<const N: usize>(
    seed: u64,
    shapes: [&[usize]; N],
    forward: impl Fn(&mut Tape<f64>, [Var; N]) -> Var,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = shapes
        .iter()
        .map(|s| Tensor::randn(s, 1.0, &mut rng))
        .collect();

    let mut tape = Tape::new();
    let vars: [Var; N] = std::array::from_fn(|i| tape.leaf(inputs[i].clone(), true));
    let root = forward(&mut tape, vars);
    assert_eq!(tape.value(root).numel(), 1, "forward must end in a scalar");
    tape.backward(root).unwrap();

    for i in 0..N {
        let analytic = tape
            .grad(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shapes[i]));
        let numeric = central_diff(&inputs, i, FD_STEP, |xs| {
            let mut t = Tape::new();
            let vs: [Var; N] = std::array::from_fn(|j| t.leaf(xs[j].clone(), false));
            let r = forward(&mut t, vs);
            t.value(r).item().unwrap()
        });
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < TOL, "input {i}: max rel err {err:.3e}");
    }
}

#[test]
fn grad_matmul() {
    check(1, [&[4, 6], &[6, 5]], |t, [a, b]| {
        let y = t.matmul(a, b).unwrap();
        spot(t, y, 1)
    });
}

#[test]
fn grad_matmul_via_plain_sum() {
    check(2, [&[3, 8], &[8, 2]], |t, [a, b]| {
        let y = t.matmul(a, b).unwrap();
        t.sum_all(y)
    });
}

#[test]
fn grad_add_and_mul() {
    check(3, [&[2, 3, 4], &[2, 3, 4]], |t, [a, b]| {
        let s = t.add(a, b).unwrap();
        let m = t.mul(s, a).unwrap();
        spot(t, m, 3)
    });
}

#[test]
fn grad_scale() {
    check(4, [&[7]], |t, [a]| {
        let y = t.scale(a, -2.5);
        spot(t, y, 4)
    });
}

#[test]
fn grad_transpose() {
    check(5, [&[5, 3]], |t, [a]| {
        let y = t.transpose(a).unwrap();
        spot(t, y, 5)
    });
}

#[test]
fn grad_reshape() {
    check(6, [&[2, 3, 4]], |t, [a]| {
        let y = t.reshape(a, &[4, 6]).unwrap();
        spot(t, y, 6)
    });
}

#[test]
fn grad_gather_rows_with_repeats() {
    check(7, [&[7, 4]], |t, [table]| {
        let y = t.gather_rows(table, &[0, 3, 3, 6, 1]).unwrap();
        spot(t, y, 7)
    });
}

#[test]
fn grad_rms_norm() {
    check(8, [&[5, 8], &[8]], |t, [x, g]| {
        let y = t.rms_norm(x, g).unwrap();
        spot(t, y, 8)
    });
}

#[test]
fn grad_silu() {
    check(9, [&[2, 3, 4]], |t, [x]| {
        let y = t.silu(x);
        spot(t, y, 9)
    });
}

#[test]
fn grad_causal_attention() {
    // batch 2, seq 4, width 6, heads 3.
    check(10, [&[8, 6], &[8, 6], &[8, 6]], |t, [q, k, v]| {
        let y = t.causal_attention(q, k, v, 2, 3).unwrap();
        spot(t, y, 10)
    });
}

#[test]
fn grad_causal_attention_single_head() {
    check(11, [&[5, 4], &[5, 4], &[5, 4]], |t, [q, k, v]| {
        let y = t.causal_attention(q, k, v, 1, 1).unwrap();
        spot(t, y, 11)
    });
}

#[test]
fn grad_conv2d_strided_padded() {
    check(12, [&[2, 5, 5], &[3, 2, 3, 3], &[3]], |t, [x, w, b]| {
        let y = t.conv2d(x, w, b, 2, 1).unwrap();
        spot(t, y, 12)
    });
}

#[test]
fn grad_conv2d_unit_stride() {
    check(13, [&[2, 4, 4], &[2, 2, 3, 3], &[2]], |t, [x, w, b]| {
        let y = t.conv2d(x, w, b, 1, 0).unwrap();
        spot(t, y, 13)
    });
}

#[test]
fn grad_conv2d_transpose() {
    check(14, [&[2, 3, 3], &[2, 3, 4, 4], &[3]], |t, [x, w, b]| {
        let y = t.conv2d_transpose(x, w, b, 2, 1).unwrap();
        spot(t, y, 14)
    });
}

#[test]
fn grad_mean_all() {
    check(15, [&[3, 5]], |t, [x]| {
        let s = t.silu(x);
        t.mean_all(s)
    });
}

#[test]
fn grad_softmax_cross_entropy() {
    check(16, [&[5, 7]], |t, [logits]| {
        let out = t
            .softmax_cross_entropy(logits, &[2, 0, 6, 3, 1], &[1.0, 0.5, 0.0, 2.0, 1.0])
            .unwrap();
        out.loss
    });
}

#[test]
fn grad_composite_micro_network() {
    // gather -> rms_norm -> matmul -> silu -> matmul -> cross-entropy, the
    // same op chain the transformer uses.
    check(17, [&[6, 4], &[4], &[4, 8], &[8, 6]], |t, [emb, gain, w1, w2]| {
        let h = t.gather_rows(emb, &[1, 4, 0, 5]).unwrap();
        let n = t.rms_norm(h, gain).unwrap();
        let a = t.matmul(n, w1).unwrap();
        let s = t.silu(a);
        let logits = t.matmul(s, w2).unwrap();
        t.softmax_cross_entropy(logits, &[3, 1, 0, 5], &[1.0, 1.0, 0.0, 1.0])
            .unwrap()
            .loss
    });
}

#[test]
fn straight_through_gradient_equals_identity_path_exactly() {
    // The straight-through estimator must backpropagate the same bits an
    // identity op would, regardless of the emitted code values.
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let z = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
    let codes = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
    let cot = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);

    let mut st_tape = Tape::new();
    let zv = st_tape.leaf(z.clone(), true);
    let st = st_tape.straight_through(zv, codes).unwrap();
    let c = st_tape.constant(cot.clone());
    let m = st_tape.mul(st, c).unwrap();
    let root = st_tape.sum_all(m);
    st_tape.backward(root).unwrap();
    let grad_st = st_tape.grad(zv).unwrap().clone();

    let mut id_tape = Tape::new();
    let zv2 = id_tape.leaf(z, true);
    let c2 = id_tape.constant(cot);
    let m2 = id_tape.mul(zv2, c2).unwrap();
    let root2 = id_tape.sum_all(m2);
    id_tape.backward(root2).unwrap();
    let grad_id = id_tape.grad(zv2).unwrap().clone();

    assert_eq!(grad_st.shape(), grad_id.shape());
    for (a, b) in grad_st.data().iter().zip(grad_id.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
