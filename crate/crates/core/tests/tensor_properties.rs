use proptest::prelude::*;
use synqt::tensor::{grad_check, grad_check_many, Tape, Tensor};
use synqt::Rng;

const TOL: f64 = 1e-6;

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut Rng::new(seed))
}

/// Scalar reduction that weights every output element differently, so a
/// wrong gradient cannot hide behind symmetry.
fn weighted_sum(tape: &Tape, y: &Tensor, seed: u64) -> synqt::Result<Tensor> {
    let w = rand(y.shape(), seed ^ 0x5eed);
    tape.sum(&tape.mul(y, &w)?)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_gradients(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..1000) {
        let a = rand(&[m, k], seed);
        let b = rand(&[k, n], seed + 1);
        let errs = grad_check_many(|t, xs| weighted_sum(t, &t.matmul(&xs[0], &xs[1])?, seed), &[a, b], 1e-5).unwrap();
        prop_assert!(errs.iter().all(|&e| e < TOL), "{errs:?}");
    }

    #[test]
    fn layernorm_gradients(rows in 1usize..4, d in 3usize..7, seed in 0u64..1000) {
        let x = rand(&[rows, d], seed);
        let g = rand(&[d], seed + 1).map(|v| 1.0 + 0.3 * v);
        let b = rand(&[d], seed + 2);
        let errs = grad_check_many(
            |t, xs| weighted_sum(t, &t.layernorm(&xs[0], &xs[1], &xs[2], 1e-6)?, seed),
            &[x, g, b],
            1e-5,
        ).unwrap();
        prop_assert!(errs.iter().all(|&e| e < TOL), "{errs:?}");
    }

    #[test]
    fn softmax_gradients(rows in 1usize..4, cols in 1usize..7, seed in 0u64..1000) {
        let x = rand(&[rows, cols], seed);
        let e = grad_check(|t, x| weighted_sum(t, &t.softmax_rows(x)?, seed), &x, 1e-5).unwrap();
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn pointwise_gradients(len in 1usize..9, seed in 0u64..1000) {
        let x = rand(&[1, len], seed);
        let gelu = grad_check(|t, x| weighted_sum(t, &t.gelu(x)?, seed), &x, 1e-5).unwrap();
        let sigmoid = grad_check(|t, x| weighted_sum(t, &t.sigmoid(x)?, seed), &x, 1e-5).unwrap();
        prop_assert!(gelu < TOL && sigmoid < TOL, "{gelu} {sigmoid}");
    }

    #[test]
    fn attention_gradients(n in 1usize..4, m in 1usize..5, heads in 1usize..3, seed in 0u64..1000) {
        let d = 2 * heads;
        let q = rand(&[n, d], seed);
        let k = rand(&[m, d], seed + 1);
        let v = rand(&[m, d], seed + 2);
        let errs = grad_check_many(
            |t, xs| weighted_sum(t, &t.attention(&xs[0], &xs[1], &xs[2], heads)?, seed),
            &[q, k, v],
            1e-5,
        ).unwrap();
        prop_assert!(errs.iter().all(|&e| e < TOL), "{errs:?}");
    }

    #[test]
    fn structural_op_gradients(rows in 2usize..5, cols in 1usize..5, seed in 0u64..1000) {
        let x = rand(&[rows, cols], seed);
        let y = rand(&[rows, cols], seed + 1);
        let bias = rand(&[cols], seed + 2);
        let errs = grad_check_many(
            |t, xs| {
                let s = t.add_row(&t.add(&xs[0], &xs[1])?, &xs[2])?;
                let c = t.concat(&[&t.slice_rows(&s, 1, rows - 1)?, &t.mean_rows(&s)?], 0)?;
                weighted_sum(t, &t.scale(&c, -0.7)?, seed)
            },
            &[x, y, bias],
            1e-5,
        ).unwrap();
        prop_assert!(errs.iter().all(|&e| e < TOL), "{errs:?}");
    }

    #[test]
    fn cross_entropy_gradient(classes in 2usize..9, label_seed in 0usize..100, seed in 0u64..1000) {
        let x = rand(&[1, classes], seed);
        let e = grad_check(|t, x| t.cross_entropy(x, label_seed % classes), &x, 1e-5).unwrap();
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, shift in -50.0f64..50.0, seed in 0u64..1000) {
        let x = rand(&[rows, cols], seed).map(|v| 10.0 * v);
        let tape = Tape::new();
        let p = tape.softmax_rows(&x).unwrap();
        let shifted = tape.softmax_rows(&x.map(|v| v + shift)).unwrap();
        for r in 0..rows {
            let s: f64 = p.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        prop_assert!(p.max_abs_diff(&shifted) < 1e-12);
    }

    #[test]
    fn layernorm_normalizes_rows(rows in 1usize..5, d in 2usize..17, scale in 0.1f64..100.0, seed in 0u64..1000) {
        let x = rand(&[rows, d], seed).map(|v| scale * v);
        let tape = Tape::new();
        let y = tape.layernorm(&x, &Tensor::ones(&[d]), &Tensor::zeros(&[d]), 0.0).unwrap();
        for r in 0..rows {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn matmul_agrees_with_triple_loop(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..1000) {
        let a = rand(&[m, k], seed);
        let b = rand(&[k, n], seed + 1);
        let c = Tape::new().matmul(&a, &b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(i, p) * b.at(p, j);
                }
                prop_assert!((c.at(i, j) - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn constant_ops_record_nothing() {
    let tape = Tape::new();
    let a = rand(&[3, 4], 1);
    let b = rand(&[4, 2], 2);
    let y = tape.gelu(&tape.matmul(&a, &b).unwrap()).unwrap();
    assert!(!y.requires_grad());
    assert!(tape.is_empty());
    assert_eq!(tape.saved_scalar_count(), 0);
}

#[test]
fn retention_follows_which_operands_need_gradients() {
    let a = rand(&[3, 4], 1);
    let b = rand(&[4, 2], 2);

    let tape = Tape::new();
    let wa = tape.watch(&a);
    tape.matmul(&wa, &b).unwrap();
    assert_eq!(tape.saved_scalar_count(), 8);

    let tape = Tape::new();
    let wb = tape.watch(&b);
    tape.matmul(&a, &wb).unwrap();
    assert_eq!(tape.saved_scalar_count(), 12);

    let tape = Tape::new();
    let wa = tape.watch(&a);
    let y = tape.add(&wa, &wa).unwrap();
    tape.scale(&tape.mean_rows(&y).unwrap(), 2.0).unwrap();
    assert_eq!(tape.saved_scalar_count(), 0);
}

#[test]
fn shared_buffers_are_counted_once() {
    let x = rand(&[2, 5], 3);
    let tape = Tape::new();
    let wx = tape.watch(&x);
    let g = tape.gelu(&wx).unwrap();
    assert_eq!(tape.saved_scalar_count(), 10);
    tape.gelu(&wx).unwrap();
    assert_eq!(tape.saved_scalar_count(), 10);
    // A watched leaf shares its source's buffer.
    tape.mul(&g, &x).unwrap();
    assert_eq!(tape.saved_scalar_count(), 10);
    tape.mul(&g, &x.deep_copy()).unwrap();
    assert_eq!(tape.saved_scalar_count(), 20);
}

#[test]
fn parameters_are_not_counted_as_activations() {
    let w = rand(&[4, 4], 4).into_parameter();
    let x = rand(&[2, 4], 5);
    let tape = Tape::new();
    let wx = tape.watch(&x);
    tape.matmul(&wx, &w).unwrap();
    assert_eq!(tape.saved_scalar_count(), 0);
}

#[test]
fn saved_counts_add_over_independent_subgraphs() {
    let x = rand(&[3, 6], 6);
    let one = Tape::new();
    let wx = one.watch(&x);
    one.softmax_rows(&wx).unwrap();
    let a = one.saved_scalar_count();

    let two = Tape::new();
    let wx = two.watch(&x);
    let wy = two.watch(&x.map(|v| v + 1.0));
    two.softmax_rows(&wx).unwrap();
    two.softmax_rows(&wy).unwrap();
    assert_eq!(two.saved_scalar_count(), 2 * a);
}

#[test]
fn foreign_tape_tensors_are_rejected() {
    let one = Tape::new();
    let two = Tape::new();
    let x = one.watch(&rand(&[2, 2], 7));
    assert!(two.gelu(&x).is_err());
}
