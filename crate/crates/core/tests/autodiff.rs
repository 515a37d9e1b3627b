mod common;

use common::{normal_vec, probe, tensor64};
use moe_core::autodiff::{grad_check, relative_error, topk_indices, Tape, Tensor, Var};
use moe_core::Error;
use proptest::prelude::*;

const EPS: f64 = 1e-3;
const TOL: f64 = 1e-3;
const SEEDS: u64 = 10;

fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
    Tensor::from_f64(data, shape).unwrap()
}

/// Runs `op` under a probe loss for ten random inputs of `shape`.
fn check_unary(shape: &[usize], op: impl Fn(&mut Tape<f64>, Var) -> moe_core::Result<Var>) {
    for seed in 0..SEEDS {
        let x = tensor64(shape, seed);
        let err = grad_check(&x, EPS, |tape, v| {
            let y = op(tape, v)?;
            probe(tape, y, seed)
        })
        .unwrap();
        assert!(err < TOL, "seed {seed}: relative error {err}");
    }
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::<f64>::new();
    let i = tape.leaf(&t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]));
    let b = tape.leaf(&t(&[3.0, 4.0, 5.0, 6.0], &[2, 2]));
    let y = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(y), &[3.0, 4.0, 5.0, 6.0]);

    let a = tape.leaf(&t(&[1.0, 2.0], &[1, 2]));
    let b = tape.leaf(&t(&[3.0, 4.0], &[2, 1]));
    let y = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(y), &[11.0]);

    let bad = tape.leaf(&t(&[1.0, 2.0, 3.0], &[3, 1]));
    match tape.matmul(a, bad) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![1, 2]);
            assert_eq!(rhs, vec![3, 1]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_gradients() {
    for seed in 0..SEEDS {
        let b = tensor64(&[3, 2], 100 + seed);
        check_unary(&[4, 3], |tape, v| {
            let bv = tape.leaf(&b);
            tape.matmul(v, bv)
        });
        let a = tensor64(&[4, 3], 200 + seed);
        check_unary(&[3, 2], |tape, v| {
            let av = tape.leaf(&a);
            tape.matmul(av, v)
        });
    }
    // Leading batch dimensions fold into rows.
    let w = tensor64(&[3, 5], 7);
    check_unary(&[2, 4, 3], |tape, v| {
        let wv = tape.leaf(&w);
        tape.matmul(v, wv)
    });
}

#[test]
fn matmul_nt_and_bmm_gradients() {
    let b = tensor64(&[5, 3], 1);
    check_unary(&[4, 3], |tape, v| {
        let bv = tape.leaf(&b);
        tape.matmul_nt(v, bv)
    });
    check_unary(&[5, 3], |tape, v| {
        let av = tape.leaf(&tensor64(&[4, 3], 2));
        tape.matmul_nt(av, v)
    });
    for transpose in [false, true] {
        let other = if transpose { tensor64(&[2, 3, 5, 4], 3) } else { tensor64(&[2, 3, 4, 5], 3) };
        check_unary(&[2, 3, 6, 4], |tape, v| {
            let o = tape.leaf(&other);
            tape.bmm(v, o, transpose)
        });
        let lhs = tensor64(&[2, 3, 6, 4], 4);
        let shape = if transpose { [2, 3, 5, 4] } else { [2, 3, 4, 5] };
        check_unary(&shape, |tape, v| {
            let l = tape.leaf(&lhs);
            tape.bmm(l, v, transpose)
        });
    }
}

#[test]
fn bmm_matches_per_group_products() {
    let a = tensor64(&[3, 2, 4], 5);
    let b = tensor64(&[3, 4, 3], 6);
    let mut tape = Tape::<f64>::new();
    let (av, bv) = (tape.leaf(&a), tape.leaf(&b));
    let y = tape.bmm(av, bv, false).unwrap();
    for g in 0..3 {
        for i in 0..2 {
            for j in 0..3 {
                let want: f64 = (0..4).map(|q| a.data[g * 8 + i * 4 + q] * b.data[g * 12 + q * 3 + j]).sum();
                let got = tape.value(y)[g * 6 + i * 3 + j];
                assert!((want - got).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn elementwise_gradients() {
    let other = tensor64(&[3, 4], 9);
    check_unary(&[3, 4], |tape, v| {
        let o = tape.leaf(&other);
        tape.add(v, o)
    });
    let bias = tensor64(&[4], 10);
    check_unary(&[2, 3, 4], |tape, v| {
        let b = tape.leaf(&bias);
        tape.add_suffix(v, b)
    });
    check_unary(&[4], |tape, v| {
        let a = tape.leaf(&tensor64(&[2, 3, 4], 11));
        tape.add_suffix(a, v)
    });
    check_unary(&[3, 4], |tape, v| Ok(tape.scale(v, -1.7)));
    check_unary(&[3, 4], |tape, v| Ok(tape.gelu(v)));
}

#[test]
fn gelu_matches_tanh_form() {
    let xs = normal_vec(200, 3.0, 12);
    let mut tape = Tape::<f64>::new();
    let v = tape.leaf(&t(&xs, &[200]));
    let y = tape.gelu(v);
    for (&x, &g) in xs.iter().zip(tape.value(y)) {
        let want = 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh());
        assert!((want - g).abs() <= 1e-12 * (1.0 + want.abs()), "{x}: {want} vs {g}");
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(&t(&[0.0, 0.0], &[2]));
    let y = tape.softmax(a);
    assert_eq!(tape.value(y), &[0.5, 0.5]);

    let a = tape.leaf(&t(&[3.0, 2.0], &[2]));
    let y = tape.softmax(a);
    let e = (1.0f64).exp();
    let oracle = [e / (e + 1.0), 1.0 / (e + 1.0)];
    for (got, want) in tape.value(y).iter().zip(oracle) {
        assert!((got - want).abs() < 1e-12);
    }
    assert!((tape.value(y)[0] - 0.7311).abs() < 1e-4);
    assert!((tape.value(y)[1] - 0.2689).abs() < 1e-4);

    let mut tape = Tape::<f32>::new();
    let a = tape.leaf(&Tensor::from_f64(&[1000.0, 0.0], &[2]).unwrap());
    let y = tape.softmax(a);
    assert_eq!(tape.value(y), &[1.0, 0.0]);
}

#[test]
fn softmax_gradients() {
    check_unary(&[3, 5], |tape, v| Ok(tape.softmax(v)));
}

#[test]
fn causal_ops() {
    check_unary(&[2, 4, 4], |tape, v| {
        let m = tape.causal_mask(v)?;
        Ok(tape.softmax(m))
    });
    check_unary(&[2, 3, 5, 5], |tape, v| tape.causal_softmax(v, 0.6));

    let x = tensor64(&[2, 2, 6, 6], 13);
    let mut tape = Tape::<f64>::new();
    let v = tape.leaf(&x);
    let fused = tape.causal_softmax(v, 0.25).unwrap();
    let s = tape.scale(v, 0.25);
    let m = tape.causal_mask(s).unwrap();
    let composed = tape.softmax(m);
    for (a, b) in tape.value(fused).iter().zip(tape.value(composed)) {
        assert!((a - b).abs() < 1e-14);
    }
    let p = tape.value(fused);
    for blk in 0..4 {
        for i in 0..6 {
            for j in i + 1..6 {
                assert_eq!(p[blk * 36 + i * 6 + j], 0.0);
            }
        }
    }
}

#[test]
fn slice_last_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], &[8]).with_grad(true));
    let y = tape.slice_last(x, 4).unwrap();
    assert_eq!(tape.value(y), &[5.0, 6.0, 7.0, 8.0]);
    let all = tape.slice_last(x, 8).unwrap();
    assert_eq!(tape.value(all), tape.value(x));
    assert!(matches!(tape.slice_last(x, 9), Err(Error::Dimension { .. })));

    let two = tape.slice_last(x, 2).unwrap();
    let loss = tape.sum(two);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn slicing_and_gathering_gradients() {
    check_unary(&[3, 6], |tape, v| tape.slice_last(v, 2));
    check_unary(&[3, 6], |tape, v| tape.slice_cols(v, 1, 3));
    check_unary(&[2, 5], |tape, v| tape.gather_cols(v, &[4, 0, 2, 2], 2));
    check_unary(&[2, 2], |tape, v| tape.scatter_cols(v, &[3, 0, 1, 2], 4));
    check_unary(&[4, 3], |tape, v| tape.gather_rows(v, &[3, 0, 3, 1]));
    check_unary(&[2, 3, 4, 2], |tape, v| tape.permute_0213(v));
    check_unary(&[2, 6], |tape, v| tape.reshape(v, &[3, 4]));
    check_unary(&[4, 3], |tape, v| Ok(tape.mean_rows(v)));
    check_unary(&[4, 3], |tape, v| Ok(tape.sum(v)));
    check_unary(&[2, 5], |tape, v| Ok(tape.topk(v, 2)?.1));
}

#[test]
fn topk_examples() {
    assert_eq!(topk_indices(&[1.0f64, 3.0, 2.0, 0.5], 2), vec![1, 2]);
    assert_eq!(topk_indices(&[5.0f64, 5.0, 5.0], 2), vec![0, 1]);
    assert_eq!(topk_indices(&[0.1f64, 0.4, 0.3, 0.2], 4), vec![1, 2, 3, 0]);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&t(&[1.0, 3.0, 2.0, 0.5], &[1, 4]));
    let (idx, vals) = tape.topk(x, 2).unwrap();
    assert_eq!(idx, vec![1, 2]);
    assert_eq!(tape.value(vals), &[3.0, 2.0]);
    assert!(matches!(tape.topk(x, 5), Err(Error::Dimension { .. })));
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let g = tape.leaf(&Tensor::filled(&[2], 1.0));
    let b = tape.leaf(&Tensor::zeros(&[2]));
    let x = tape.leaf(&t(&[1.0, -1.0], &[1, 2]));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    let oracle = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((tape.value(y)[0] - oracle).abs() < 1e-12);
    assert!((tape.value(y)[0] - 1.0).abs() < 1e-3);
    assert!((tape.value(y)[1] + 1.0).abs() < 1e-3);

    let g4 = tape.leaf(&Tensor::filled(&[4], 1.0));
    let b4 = tape.leaf(&Tensor::zeros(&[4]));
    let c = tape.leaf(&t(&[2.5; 4], &[1, 4]));
    let y = tape.layer_norm(c, g4, b4, 1e-5).unwrap();
    assert_eq!(tape.value(y), &[0.0; 4]);
}

#[test]
fn layer_norm_gradients() {
    let gamma = tensor64(&[8], 20);
    let beta = tensor64(&[8], 21);
    check_unary(&[4, 8], |tape, v| {
        let (g, b) = (tape.leaf(&gamma), tape.leaf(&beta));
        tape.layer_norm(v, g, b, 1e-5)
    });
    let x = tensor64(&[4, 8], 22);
    check_unary(&[8], |tape, v| {
        let (xv, b) = (tape.leaf(&x), tape.leaf(&beta));
        tape.layer_norm(xv, v, b, 1e-5)
    });
    check_unary(&[8], |tape, v| {
        let (xv, g) = (tape.leaf(&x), tape.leaf(&gamma));
        tape.layer_norm(xv, g, v, 1e-5)
    });
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::<f64>::new();
    let u = tape.leaf(&Tensor::zeros(&[1, 4]));
    let l = tape.cross_entropy(u, &[2]).unwrap();
    assert!((tape.value(l)[0] - 4.0f64.ln()).abs() < 1e-12);

    let d = tape.leaf(&t(&[0.0, 20.0, 0.0], &[1, 3]));
    let l = tape.cross_entropy(d, &[1]).unwrap();
    assert!(tape.value(l)[0] < 1e-8);

    let x = tensor64(&[3, 5], 30);
    let targets = [4, 0, 2];
    let v = tape.leaf(&x);
    let l = tape.cross_entropy(v, &targets).unwrap();
    let mut oracle = 0.0;
    for (r, &tg) in targets.iter().enumerate() {
        let row = &x.data[r * 5..(r + 1) * 5];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        oracle -= (row[tg].exp() / z).ln();
    }
    oracle /= 3.0;
    assert!((tape.value(l)[0] - oracle).abs() < 1e-5);

    assert!(matches!(tape.cross_entropy(v, &[5, 0, 0]), Err(Error::Index { .. })));
}

#[test]
fn cross_entropy_gradients() {
    for seed in 0..SEEDS {
        let x = tensor64(&[2, 3, 5], seed);
        let err = grad_check(&x, EPS, |tape, v| tape.cross_entropy(v, &[0, 4, 2, 1, 1, 3])).unwrap();
        assert!(err < TOL, "{err}");
    }
}

#[test]
fn combine_gradients() {
    let parts = [tensor64(&[2, 3], 40), tensor64(&[3, 3], 41)];
    let slots = [(0, 1), (1, 0), (1, 2), (0, 0), (1, 1), (0, 1)];
    let weights = tensor64(&[3, 2], 42);
    check_unary(&[3, 2], |tape, w| {
        let p: Vec<Var> = parts.iter().map(|p| tape.leaf(p)).collect();
        tape.combine(&p, &slots, w)
    });
    check_unary(&[3, 3], |tape, p1| {
        let p0 = tape.leaf(&parts[0]);
        let w = tape.leaf(&weights);
        tape.combine(&[p0, p1], &slots, w)
    });
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&tensor64(&[2, 3], 50).with_grad(true));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);

    // loss = sum(x · W): dx[i, c] = Σ_j W[c, j].
    let mut tape = Tape::<f64>::new();
    let w = [1.0, 2.0, 3.0, 4.0];
    let x = tape.leaf(&t(&[0.5, -1.0, 2.0, 0.0], &[2, 2]).with_grad(true));
    let wv = tape.leaf(&t(&w, &[2, 2]));
    let y = tape.matmul(x, wv).unwrap();
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[3.0, 7.0, 3.0, 7.0]);

    let lonely = tape.leaf(&tensor64(&[3], 51).with_grad(true));
    tape.backward(loss).unwrap();
    assert!(tape.grad(lonely).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    // The second sweep doubled the retained gradient.
    assert_eq!(tape.grad(x).unwrap(), &[6.0, 14.0, 6.0, 14.0]);

    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
}

#[test]
fn grad_check_examples() {
    let x = tensor64(&[5], 60);
    let err = grad_check(&x, EPS, |tape, v| {
        let sq = tape.dot_const(v, &[0.0; 5])?;
        let c = tape.scale(sq, 0.0);
        Ok(c)
    })
    .unwrap();
    assert_eq!(err, 0.0);

    // Sum of squares through the primitives; the analytic gradient is 2x.
    let err = grad_check(&x, EPS, |tape, v| {
        let col = tape.reshape(v, &[5, 1])?;
        let row = tape.reshape(v, &[1, 5])?;
        let ss = tape.matmul(row, col)?;
        tape.reshape(ss, &[1])
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
    assert!(grad_check(&x, 1e-6, |tape, v| Ok(tape.sum(v))).is_err());
    assert_eq!(relative_error(0.0, 0.0), 0.0);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(xs in proptest::collection::vec(-30.0f32..30.0, 1..12)) {
        let n = xs.len();
        let mut tape = Tape::<f32>::new();
        let data: Vec<f64> = xs.iter().map(|&v| v as f64).collect();
        let v = tape.leaf(&Tensor::from_f64(&data, &[n]).unwrap());
        let y = tape.softmax(v);
        let s: f64 = tape.value(y).iter().map(|&p| p as f64).sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
        // Strict positivity holds whenever the spread is representable.
        let spread = xs.iter().cloned().fold(f32::MIN, f32::max) - xs.iter().cloned().fold(f32::MAX, f32::min);
        if spread < 80.0 {
            prop_assert!(tape.value(y).iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn slice_last_gradient_stays_in_window(h in 1usize..10, seed in 0u64..1000, frac in 0.0f64..1.0) {
        let n = 1 + ((h - 1) as f64 * frac) as usize;
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&tensor64(&[3, h], seed).with_grad(true));
        let s = tape.slice_last(x, n).unwrap();
        let l = probe(&mut tape, s, seed).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(x).unwrap();
        for r in 0..3 {
            for c in 0..h - n {
                prop_assert_eq!(g[r * h + c], 0.0);
            }
        }
    }

    #[test]
    fn topk_is_deterministic_under_ties(xs in proptest::collection::vec(0i8..3, 1..10), k in 1usize..10) {
        let k = k.min(xs.len());
        let row: Vec<f64> = xs.iter().map(|&v| v as f64).collect();
        let a = topk_indices(&row, k);
        prop_assert_eq!(&a, &topk_indices(&row, k));
        for w in a.windows(2) {
            let (i, j) = (w[0], w[1]);
            prop_assert!(row[i] > row[j] || (row[i] == row[j] && i < j));
        }
        for (pos, &i) in a.iter().enumerate() {
            for j in 0..row.len() {
                if !a.contains(&j) {
                    prop_assert!(row[i] > row[j] || (row[i] == row[j] && i < j), "pos {pos}");
                }
            }
        }
    }

    #[test]
    fn replay_gives_identical_gradients(seed in 0u64..500) {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(&common::tensor32(&[4, 6], seed).with_grad(true));
            let w = tape.leaf(&common::tensor32(&[6, 3], seed + 1).with_grad(true));
            let y = tape.matmul(x, w).unwrap();
            let y = tape.gelu(y);
            let y = tape.softmax(y);
            let l = tape.cross_entropy(y, &[0, 1, 2, 0]).unwrap();
            tape.backward(l).unwrap();
            (tape.grad(x).unwrap().to_vec(), tape.grad(w).unwrap().to_vec())
        };
        let (a, b) = (run(), run());
        prop_assert!(a.0.iter().zip(&b.0).all(|(p, q)| p.to_bits() == q.to_bits()));
        prop_assert!(a.1.iter().zip(&b.1).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
