use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::gradcheck::grad_check_corrupted;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn vals(g: &Graph, v: Var) -> Vec<f64> {
    g.value(v).data().to_vec()
}

#[test]
fn exp_and_square() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let x = g.constant(Tensor::vector(vec![0.0]));
    let e = g.exp(x).unwrap();
    assert_eq!(vals(&g, e), [1.0]);
    let y = g.constant(Tensor::vector(vec![-2.0, 3.0]));
    let sq = g.square(y).unwrap();
    assert_eq!(vals(&g, sq), [4.0, 9.0]);
}

#[test]
fn add_rejects_mismatched_shapes() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
    // rank-0 operands broadcast, one-element vectors do not
    let c = g.constant(Tensor::scalar(10.0));
    let sum = g.add(a, c).unwrap();
    assert_eq!(vals(&g, sum), [11.0, 12.0]);
    let d = g.constant(Tensor::vector(vec![10.0]));
    assert!(g.add(a, d).is_err());
}

#[test]
fn softmax_examples() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    for (input, want) in [
        (vec![0.0, 0.0], [0.5, 0.5]),
        (vec![1000.0, 1000.0], [0.5, 0.5]),
        (vec![0.0, 3f64.ln()], [0.25, 0.75]),
    ] {
        let x = g.constant(Tensor::vector(input));
        let y = g.softmax(x, 0).unwrap();
        let got = vals(&g, y);
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{got:?}");
        }
    }
    let x = g.constant(Tensor::vector(vec![1.0]));
    assert!(matches!(g.softmax(x, 1), Err(Error::Axis { .. })));
}

#[test]
fn mean_axis_examples() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let x = g.constant(Tensor::from_rows(&[vec![1.0, 3.0], vec![5.0, 7.0]]).unwrap());
    let m = g.mean_axis(x, 0).unwrap();
    assert_eq!(vals(&g, m), [3.0, 5.0]);
    let c = g.constant(Tensor::full(&[3, 4], 2.5));
    let m = g.mean_axis(c, 1).unwrap();
    assert_eq!(vals(&g, m), [2.5; 3]);
    let single = g.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let m = g.mean_axis(single, 0).unwrap();
    assert_eq!(vals(&g, m), [1.0, 2.0, 3.0]);
    assert!(g.mean_axis(single, 2).is_err());
}

#[test]
fn layer_norm_examples() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let eps = 1e-5;
    let ones = g.constant(Tensor::ones(&[3]));
    let zeros = g.constant(Tensor::zeros(&[3]));
    let x = g.constant(Tensor::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap());
    let y = g.layer_norm(x, ones, zeros, eps).unwrap();
    assert_eq!(vals(&g, y), [0.0; 3]);

    let one2 = g.constant(Tensor::ones(&[2]));
    let zero2 = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(Tensor::from_rows(&[vec![-1.0, 1.0]]).unwrap());
    let y = g.layer_norm(x, one2, zero2, eps).unwrap();
    let expect = 1.0 / (1.0 + eps).sqrt();
    let got = vals(&g, y);
    assert!((got[0] + expect).abs() < 1e-15 && (got[1] - expect).abs() < 1e-15);

    let bias = g.constant(Tensor::vector(vec![0.3, -0.7]));
    let y = g.layer_norm(x, zero2, bias, eps).unwrap();
    assert_eq!(vals(&g, y), [0.3, -0.7]);

    assert!(g.layer_norm(x, ones, zeros, eps).is_err());
}

#[test]
fn add_row_matches_broadcast_add() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let x = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let r = g.constant(Tensor::vector(vec![10.0, 20.0, 30.0]));
    let y = g.add_row(x, r).unwrap();
    assert_eq!(vals(&g, y), [11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    let bad = g.constant(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.add_row(x, bad), Err(Error::Shape { .. })));
}

#[test]
fn backward_square_sum() {
    let mut s = ParamStore::new();
    let p = s.register("x", Tensor::vector(vec![1.0, 2.0]));
    let g = {
        let mut g = Graph::new(&s);
        let x = g.param(p);
        let sq = g.square(x).unwrap();
        let root = g.sum(sq).unwrap();
        g.backward(root).unwrap()
    };
    assert_eq!(g.get(p).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_accumulates_repeated_use() {
    let mut s = ParamStore::new();
    let p = s.register("p", Tensor::scalar(0.7));
    let mut g = Graph::new(&s);
    let a = g.param(p);
    let b = g.param(p);
    assert_eq!(a, b);
    let root = g.add(a, b).unwrap();
    assert_eq!(g.backward(root).unwrap().get(p).unwrap().data(), &[2.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut s = ParamStore::new();
    let p = s.register("p", Tensor::vector(vec![1.0, 2.0]));
    let mut g = Graph::new(&s);
    let x = g.param(p);
    assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
}

#[test]
fn frozen_params_get_no_gradient() {
    let mut s = ParamStore::new();
    let p = s.register("p", Tensor::vector(vec![1.0, 2.0]));
    let q = s.register("q", Tensor::vector(vec![3.0, 4.0]));
    s.set_trainable(q, false);
    let mut g = Graph::new(&s);
    let (x, y) = (g.param(p), g.param(q));
    let m = g.mul(x, y).unwrap();
    let root = g.sum(m).unwrap();
    let grads = g.backward(root).unwrap();
    assert_eq!(grads.get(p).unwrap().data(), &[3.0, 4.0]);
    assert!(grads.get(q).is_none());
}

#[test]
fn grad_check_quadratic_and_constant() {
    let mut s = ParamStore::new();
    let p = s.register("theta", Tensor::scalar(3.0));
    let r = grad_check(&mut s, &[p], DEFAULT_STEP, |g| {
        let t = g.param(p);
        g.square(t)
    })
    .unwrap();
    assert!((r.analytic - 6.0).abs() < 1e-12);
    assert!(r.max_rel_error < 1e-9, "{r:?}");

    let r = grad_check(&mut s, &[p], DEFAULT_STEP, |g| Ok(g.constant(Tensor::scalar(4.0)))).unwrap();
    assert_eq!(r.analytic, 0.0);
    assert_eq!(r.numeric, 0.0);
}

#[test]
fn grad_check_rejects_bad_step_and_nonfinite() {
    let mut s = ParamStore::new();
    let p = s.register("theta", Tensor::scalar(1.0));
    assert!(grad_check(&mut s, &[p], 0.0, |g| Ok(g.param(p))).is_err());
    let r = grad_check(&mut s, &[p], DEFAULT_STEP, |g| Ok(g.constant(Tensor::scalar(f64::NAN))));
    assert!(matches!(r, Err(Error::Evaluation(_)) | Err(Error::NonFinite { .. })));
}

/// Every differentiable op on random extents ≤ 5 passes the oracle.
#[test]
fn every_op_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let m = rng.random_range(1..=5);
        let k = rng.random_range(1..=5);
        let n = rng.random_range(1..=5);
        let mut s = ParamStore::new();
        let a = s.register("a", rand_tensor(&mut rng, &[m, k]));
        let b = s.register("b", rand_tensor(&mut rng, &[k, n]));
        let bt = s.register("bt", rand_tensor(&mut rng, &[n, k]));
        let c = s.register("c", rand_tensor(&mut rng, &[m, k]));
        let d = s.register("d", rand_tensor(&mut rng, &[m, k]).map(|v| v.abs() + 0.5));
        let gain = s.register("gain", rand_tensor(&mut rng, &[k]));
        let bias = s.register("bias", rand_tensor(&mut rng, &[k]));
        let w = s.register("w", rand_tensor(&mut rng, &[m, k]));
        let sc = s.register("sc", Tensor::scalar(rng.random_range(-1.0..1.0)));
        let label = rng.random_range(0..k);
        let all = [a, b, bt, c, d, gain, bias, w, sc];

        let cases: Vec<(&str, Box<dyn Fn(&mut Graph<'_>) -> Result<Var>>)> = vec![
            ("matmul", Box::new(|g| {
                let (x, y) = (g.param(a), g.param(b));
                let p = g.matmul(x, y)?;
                let sq = g.square(p)?;
                g.sum(sq)
            })),
            ("matmul_nt_tn", Box::new(|g| {
                let (x, y) = (g.param(a), g.param(bt));
                let p = g.matmul_nt(x, y)?; // m×n
                let q = g.matmul_ext(p, true, x, false)?; // n×k
                let sq = g.square(q)?;
                g.sum(sq)
            })),
            ("elementwise", Box::new(|g| {
                let (x, y, z) = (g.param(a), g.param(c), g.param(d));
                let s1 = g.add(x, y)?;
                let s2 = g.sub(s1, z)?;
                let s3 = g.mul(s2, x)?;
                let s4 = g.div(s3, z)?;
                let s5 = g.neg(s4)?;
                let s6 = g.exp(s5)?;
                let s7 = g.scale(s6, 0.7)?;
                let s8 = g.add_scalar(s7, 0.1)?;
                let k = g.param(sc);
                let s9 = g.mul(s8, k)?;
                let s10 = g.square(s9)?;
                g.sum(s10)
            })),
            ("reductions", Box::new(|g| {
                let x = g.param(a);
                let s0 = g.sum_axis(x, 0)?;
                let s1 = g.mean_axis(x, 1)?;
                let b0 = g.broadcast_axis(s0, 0, 3)?;
                let b1 = g.broadcast_axis(s1, 1, 2)?;
                let q0 = g.square(b0)?;
                let q1 = g.square(b1)?;
                let (r0, r1) = (g.sum(q0)?, g.sum(q1)?);
                g.add(r0, r1)
            })),
            ("shape_ops", Box::new(|g| {
                let (x, y) = (g.param(a), g.param(c));
                let t = g.transpose(x)?;
                let r = g.reshape(t, &[m * k])?;
                let r2 = g.reshape(r, &[k, m])?;
                let back = g.transpose(r2)?;
                let cat = g.concat_cols(&[back, y])?;
                let sl = g.slice_cols(cat, k / 2, k + 1)?;
                let sl = g.slice_rows(sl, m / 2, m)?;
                let e = g.exp(sl)?;
                let wq = g.param(w);
                let cut = g.slice_cols(wq, 0, k - k / 2 + 1)?;
                let cut = g.slice_rows(cut, 0, m - m / 2)?;
                let p = g.mul(e, cut)?;
                g.sum(p)
            })),
            ("softmax", Box::new(|g| {
                let (x, y) = (g.param(a), g.param(w));
                let s0 = g.softmax(x, 1)?;
                let s1 = g.softmax(x, 0)?;
                let p0 = g.mul(s0, y)?;
                let p1 = g.mul(s1, y)?;
                let t = g.add(p0, p1)?;
                let sq = g.square(t)?;
                g.sum(sq)
            })),
            ("layer_norm", Box::new(|g| {
                let (x, gn, bs, y) = (g.param(a), g.param(gain), g.param(bias), g.param(w));
                let ln = g.layer_norm(x, gn, bs, 1e-5)?;
                let p = g.mul(ln, y)?;
                let sq = g.square(p)?;
                g.sum(sq)
            })),
            ("gelu", Box::new(|g| {
                let (x, y) = (g.param(a), g.param(w));
                let s = g.scale(x, 3.0)?;
                let ge = g.gelu(s)?;
                let p = g.mul(ge, y)?;
                g.sum(p)
            })),
            ("add_row", Box::new(|g| {
                let (x, r, y) = (g.param(a), g.param(bias), g.param(w));
                let z = g.add_row(x, r)?;
                let p = g.mul(z, y)?;
                let sq = g.square(p)?;
                g.sum(sq)
            })),
            ("cross_entropy", Box::new(|g| {
                let x = g.param(a);
                let row = g.mean_axis(x, 0)?;
                g.cross_entropy(row, label)
            })),
        ];
        for (name, f) in &cases {
            let r = grad_check(&mut s, &all, DEFAULT_STEP, f).unwrap();
            assert!(r.max_rel_error < 1e-5, "trial {trial} op {name}: {r:?}");
        }
    }
}

#[test]
fn corrupted_backward_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut s = ParamStore::new();
    let a = s.register("a", rand_tensor(&mut rng, &[3, 4]));
    let b = s.register("b", rand_tensor(&mut rng, &[4, 2]));
    let f = |g: &mut Graph<'_>| {
        let (x, y) = (g.param(a), g.param(b));
        let p = g.matmul(x, y)?;
        let sq = g.square(p)?;
        g.sum(sq)
    };
    assert!(grad_check(&mut s, &[a, b], DEFAULT_STEP, f).unwrap().max_rel_error < 1e-5);
    assert!(grad_check_corrupted(&mut s, &[a, b], DEFAULT_STEP, f).unwrap().max_rel_error > 1e-2);
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = ParamStore::new();
    let a = s.register("a", rand_tensor(&mut rng, &[4, 5]));
    let b = s.register("b", rand_tensor(&mut rng, &[5, 3]));
    let run = || {
        let mut g = Graph::new(&s);
        let (x, y) = (g.param(a), g.param(b));
        let p = g.matmul(x, y).unwrap();
        let sm = g.softmax(p, 1).unwrap();
        let e = g.exp(sm).unwrap();
        let root = g.sum(e).unwrap();
        g.backward(root).unwrap()
    };
    let (g1, g2) = (run(), run());
    for id in [a, b] {
        let (x, y) = (g1.get(id).unwrap(), g2.get(id).unwrap());
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn k_symmetric_uses_give_k_times_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut s = ParamStore::new();
    let p = s.register("p", rand_tensor(&mut rng, &[3, 3]));
    let x = rand_tensor(&mut rng, &[2, 3]);
    let grad_for = |k: usize| {
        let mut g = Graph::new(&s);
        let xv = g.constant(x.clone());
        let w = g.param(p);
        let mut total = None;
        for _ in 0..k {
            let y = g.matmul(xv, w).unwrap();
            let t = g.exp(y).unwrap();
            let s = g.sum(t).unwrap();
            total = Some(match total {
                None => s,
                Some(acc) => g.add(acc, s).unwrap(),
            });
        }
        g.backward(total.unwrap()).unwrap().get(p).unwrap().clone()
    };
    let one = grad_for(1);
    for k in 2..=4 {
        let many = grad_for(k);
        for (a, b) in many.data().iter().zip(one.data()) {
            assert!((a - k as f64 * b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_are_shift_invariant(
        row in proptest::collection::vec(-50.0f64..50.0, 1..8),
        shift in -100.0f64..100.0,
    ) {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let n = row.len();
        let x = g.constant(Tensor::new(vec![1, n], row.clone()).unwrap());
        let y = g.softmax(x, 1).unwrap();
        let total: f64 = g.value(y).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        let shifted = g.constant(Tensor::new(vec![1, n], row.iter().map(|v| v + shift).collect()).unwrap());
        let ys = g.softmax(shifted, 1).unwrap();
        for (p, q) in g.value(y).data().iter().zip(g.value(ys).data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }
}
