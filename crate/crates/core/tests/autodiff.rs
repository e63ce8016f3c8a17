//! Reverse-mode gradients of tape primitives against central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sen_core::nn::LN_EPS;
use sen_core::tensor::{Tape, Tensor, Var};
use sen_core::Result;

const EPS: f64 = 1e-5;

/// Largest `|analytic − fd| / (|fd| + 1e-8)` over every entry of every input.
fn max_rel_err(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let params: Vec<Tensor> = inputs.iter().map(|t| t.clone().trainable()).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t)).collect();
    let root = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(root).unwrap();

    let loss = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let root = f(&mut tape, &vars).unwrap();
        tape.value(root)[0]
    };
    let mut worst: f64 = 0.0;
    for (i, p) in params.iter().enumerate() {
        let analytic = grads.get(p).unwrap();
        for j in 0..p.numel() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += EPS;
            let up = loss(&xs);
            xs[i].data_mut()[j] -= 2.0 * EPS;
            let down = loss(&xs);
            let fd = (up - down) / (2.0 * EPS);
            worst = worst.max((analytic[j] - fd).abs() / (fd.abs() + 1e-8));
        }
    }
    worst
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Weighted sum so every output entry contributes a distinct cotangent.
fn readout(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(randn(tape.shape(y), seed));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

#[test]
fn square_gradient_at_three() {
    let x = Tensor::scalar(3.0).trainable();
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let y = tape.mul(v, v).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(&x).unwrap(), &[6.0]);
}

#[test]
fn matmul_gradients() {
    let err = max_rel_err(&[randn(&[3, 4], 1), randn(&[4, 2], 2)], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        readout(t, y, 3)
    });
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn softmax_jacobian() {
    for axis in 0..2 {
        let err = max_rel_err(&[randn(&[3, 5], 4)], |t, v| {
            let y = t.softmax(v[0], axis)?;
            readout(t, y, 5)
        });
        assert!(err < 1e-5, "axis {axis}: {err:e}");
    }
}

#[test]
fn gelu_of_affine() {
    let err = max_rel_err(&[randn(&[4, 3], 6), randn(&[3, 5], 7), randn(&[5], 8)], |t, v| {
        let h = t.matmul(v[0], v[1])?;
        let h = t.add_broadcast(h, v[2])?;
        let y = t.gelu(h);
        readout(t, y, 9)
    });
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn fused_affine_matches_matmul_plus_bias() {
    let (x, w, b) = (randn(&[2, 3, 4], 10), randn(&[4, 6], 11), randn(&[6], 12));
    let err = max_rel_err(&[x.clone(), w.clone(), b.clone()], |t, v| {
        let y = t.affine(v[0], v[1], Some(v[2]))?;
        readout(t, y, 13)
    });
    assert!(err < 1e-5, "{err:e}");

    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.reshaped(&[6, 4]).unwrap()), tape.constant(w), tape.constant(b));
    let fused = tape.affine(xv, wv, Some(bv)).unwrap();
    let mm = tape.matmul(xv, wv).unwrap();
    let split = tape.add_broadcast(mm, bv).unwrap();
    for (a, b) in tape.value(fused).iter().zip(tape.value(split)) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn layer_norm_and_cross_entropy() {
    let err = max_rel_err(&[randn(&[3, 6], 14), randn(&[6], 15), randn(&[6], 16)], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], LN_EPS)?;
        t.cross_entropy(y, &[0, 5, 2])
    });
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn batched_attention_chain() {
    let err = max_rel_err(&[randn(&[2, 3, 4], 17), randn(&[2, 4, 3], 18), randn(&[2, 3, 4], 19)], |t, v| {
        let s = t.bmm(v[0], v[1])?;
        let a = t.softmax(s, 2)?;
        let o = t.bmm(a, v[2])?;
        let o = t.permute(o, &[1, 0, 2])?;
        let m = t.mean(o, 1)?;
        readout(t, m, 20)
    });
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn structural_ops() {
    let err = max_rel_err(&[randn(&[2, 3], 21), randn(&[2, 2], 22)], |t, v| {
        let c = t.concat(&[v[0], v[1]], 1)?;
        let s = t.slice(c, 1, 1, 3)?;
        let r = t.reshape(s, &[3, 2])?;
        let q = t.sub(r, r)?;
        let q = t.add(q, r)?;
        let d = t.div_scalar(q, 3.0)?;
        let y = t.scale(d, -2.0);
        readout(t, y, 23)
    });
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn constant_has_no_influence() {
    let x = randn(&[3], 24).trainable();
    let mut tape = Tape::new();
    let _ = tape.leaf(&x);
    let c = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let y = tape.sum(c);
    let g = tape.backward(y).unwrap();
    assert!(g.get(&x).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
}

#[test]
fn forward_and_backward_are_bit_reproducible() {
    let run = || {
        let (a, b) = (randn(&[5, 7], 25).trainable(), randn(&[7, 3], 26).trainable());
        let mut tape = Tape::new();
        let (av, bv) = (tape.leaf(&a), tape.leaf(&b));
        let h = tape.matmul(av, bv).unwrap();
        let h = tape.gelu(h);
        let s = tape.softmax(h, 1).unwrap();
        let y = readout(&mut tape, s, 27).unwrap();
        let g = tape.backward(y).unwrap();
        let mut bits: Vec<u64> = tape.value(y).iter().map(|v| v.to_bits()).collect();
        bits.extend(g.get(&a).unwrap().iter().map(|v| v.to_bits()));
        bits.extend(g.get(&b).unwrap().iter().map(|v| v.to_bits()));
        bits
    };
    assert_eq!(run(), run());
}

#[test]
fn mismatched_extents_are_rejected() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3, 2]));
    let row = tape.constant(Tensor::zeros(&[1, 3]));
    assert!(tape.add(a, b).is_err());
    assert!(tape.mul(a, row).is_err());
    assert!(tape.matmul(a, a).is_err());
    assert!(tape.add_broadcast(a, b).is_err());
}
