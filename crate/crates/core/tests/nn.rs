mod common;

use common::{gradient_suite, naive_conv2d, pearson_oracle};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scopeqa::nn::{pearson_is_degenerate, pearson_loss_value, BatchNorm, Binding, Mode, Tape, Tensor};

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

#[test]
fn conv_identity_and_sum() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
    let w = tape.constant(t(&[1, 1, 1, 1], &[1.]));
    let y = tape.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    let ones = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let s = tape.conv2d(ones, k, None, 1, 0).unwrap();
    assert_eq!(tape.value(s).shape(), &[1, 1, 1, 1]);
    assert_eq!(tape.value(s).data()[0], 9.0);
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (stride, pad, k, side) in [(1, 0, 3, 5), (1, 1, 3, 5), (2, 1, 3, 5), (2, 0, 1, 6), (2, 1, 3, 8), (1, 2, 3, 4)] {
        let x = Tensor::<f64>::randn(&[1, 2, side, side], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[3, 2, k, k], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let y = tape.conv2d(xv, wv, None, stride, pad).unwrap();
        let (expected, shape) = naive_conv2d(
            x.data(),
            [1, 2, side, side],
            w.data(),
            [3, 2, k, k],
            stride,
            pad,
        );
        assert_eq!(tape.value(y).shape(), &shape);
        for (a, b) in tape.value(y).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn conv_shape_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert_eq!(tape.conv2d(x, w, None, 1, 0).unwrap_err().code(), "E_SHAPE");
    let w = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
    assert!(tape.conv2d(x, w, None, 0, 0).is_err());
}

#[test]
fn activations() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 4], &[0., 0., 0., 0.]));
    let s = tape.softmax(x).unwrap();
    assert!(tape.value(s).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let r = tape.constant(t(&[2], &[-2., 3.]));
    let r = tape.relu(r);
    assert_eq!(tape.value(r).data(), &[0., 3.]);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let x = Tensor::<f64>::randn(&[3, 7], 20.0, &mut rng);
        let xv = tape.constant(x.clone());
        let ls = tape.log_softmax(xv).unwrap();
        let sm = tape.softmax(xv).unwrap();
        for (row, (lrow, srow)) in x
            .data()
            .chunks(7)
            .zip(tape.value(ls).data().chunks(7).zip(tape.value(sm).data().chunks(7)))
        {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for (a, b) in row.iter().zip(lrow) {
                assert!((b + lse - a).abs() < 1e-9);
                assert!(b.is_finite());
            }
            assert!((srow.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn batch_norm_cases() {
    // zero-mean unit-variance batch is a fixed point
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 1, 1, 2], &[1., -1., 1., -1.]));
    let g = tape.constant(t(&[1], &[1.]));
    let b = tape.constant(t(&[1], &[0.]));
    let (y, _, _) = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
    for (a, e) in tape.value(y).data().iter().zip([1., -1., 1., -1.]) {
        assert!((a - e).abs() < 1e-5);
    }
    // gamma 0, beta 5
    let g0 = tape.constant(t(&[1], &[0.]));
    let b5 = tape.constant(t(&[1], &[5.]));
    let (y, _, _) = tape.batch_norm_train(x, g0, b5, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 5.0));

    // moments of a random batch
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xr = tape.constant(Tensor::randn(&[4, 3, 5, 5], 3.0, &mut rng).map(|v| v + 2.0));
    let g = tape.constant(Tensor::full(&[3], 1.0));
    let b = tape.constant(Tensor::zeros(&[3]));
    let (y, _, _) = tape.batch_norm_train(xr, g, b, 1e-5).unwrap();
    let d = tape.value(y).data();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| d[(n * 3 + c) * 25..(n * 3 + c + 1) * 25].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / 100.0;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 100.0;
        assert!(m.abs() < 1e-6);
        assert!((v - 1.0).abs() < 1e-4);
    }

    // batch of one rejected in training mode, running stats used in eval
    let bn = BatchNorm::<f64>::new(1);
    let one = tape.constant(t(&[1, 1, 1, 2], &[3., 5.]));
    assert!(bn.forward(&mut tape, one, Mode::Train, &mut Binding::frozen()).is_err());
    let e = bn.forward(&mut tape, one, Mode::Eval, &mut Binding::frozen()).unwrap();
    let k = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((tape.value(e).data()[0] - 3.0 * k).abs() < 1e-12);
}

#[test]
fn running_stats_update() {
    let mut bn = BatchNorm::<f64>::new(1);
    bn.update_running(&[2.0], &[3.0], 4);
    assert!((bn.running_mean.data()[0] - 0.2).abs() < 1e-15);
    // unbiased: 3 * 4/3 = 4 -> 0.9 * 1 + 0.1 * 4
    assert!((bn.running_var.data()[0] - 1.3).abs() < 1e-15);
}

#[test]
fn cross_entropy_values() {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::full(&[3, 20], 0.05));
    let l = tape.cross_entropy(p, &[0, 7, 19]).unwrap();
    assert!((tape.value(l).data()[0] - 20f64.ln()).abs() < 1e-12);
    assert!((tape.value(l).data()[0] - 2.9957).abs() < 1e-4);

    let onehot = tape.constant(t(&[2, 3], &[0., 1., 0., 1., 0., 0.]));
    let l = tape.cross_entropy(onehot, &[1, 0]).unwrap();
    assert_eq!(tape.value(l).data()[0], 0.0);

    let p = tape.constant(t(&[2, 2], &[0.5, 0.5, 0.75, 0.25]));
    let l = tape.cross_entropy(p, &[0, 1]).unwrap();
    let expected = (2f64.ln() + 4f64.ln()) / 2.0;
    assert!((tape.value(l).data()[0] - expected).abs() < 1e-12);

    // zero probability at the true class stays finite
    let z = tape.constant(t(&[1, 2], &[1.0, 0.0]));
    let l = tape.cross_entropy(z, &[1]).unwrap();
    assert!((tape.value(l).data()[0] - (-(1e-12f64).ln())).abs() < 1e-9);
    assert!(tape.cross_entropy(z, &[2]).is_err());
}

#[test]
fn pearson_values() {
    assert!(pearson_loss_value(&[1., 2., 3.], &[2., 4., 6.]).unwrap().abs() < 1e-12);
    assert!((pearson_loss_value(&[3., 2., 1.], &[1., 2., 3.]).unwrap() - 2.0).abs() < 1e-12);
    assert!((pearson_loss_value(&[1., 2., 3., 4.], &[1., 3., 2., 4.]).unwrap() - 0.2).abs() < 1e-12);
    assert!(pearson_loss_value(&[1.], &[1.]).is_err());
    // constant prediction: finite, flagged
    let l = pearson_loss_value(&[2., 2., 2.], &[1., 2., 3.]).unwrap();
    assert!(l.is_finite());
    assert!(pearson_is_degenerate(&[2., 2., 2.], &[1., 2., 3.]));
    assert!(pearson_is_degenerate(&[1., 2., 3.], &[5., 5., 5.]));
    assert!(!pearson_is_degenerate(&[1., 2., 3.], &[1., 2., 4.]));
}

#[test]
fn backward_basics() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::<f64>::full(&[2, 3, 4], 0.3));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).data().iter().all(|&v| v == 1.0));

    // (x w - y)^2 at w = 1, x = 2, y = 1
    let mut tape = Tape::new();
    let w = tape.leaf(t(&[1], &[1.]));
    let x = tape.constant(t(&[1], &[2.]));
    let y = tape.constant(t(&[1], &[1.]));
    let xw = tape.mul(x, w).unwrap();
    let d = tape.sub(xw, y).unwrap();
    let sq = tape.mul(d, d).unwrap();
    let l = tape.sum(sq);
    let unused = tape.leaf(t(&[2], &[5., 6.]));
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(w).data(), &[4.0]);
    assert_eq!(g.get(unused).data(), &[0.0, 0.0]);

    assert_eq!(tape.backward(unused).err().map(|e| e.code()), Some("E_SHAPE"));
}

#[test]
fn gradients_match_finite_differences() {
    let results = gradient_suite(20, 42);
    assert_eq!(results.len(), 11);
    for (name, err) in results {
        eprintln!("{name}: {err:e}");
        assert!(err <= 1e-4, "{name}: relative gradient error {err:e}");
    }
}

#[test]
fn pearson_affine_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let n = rng.random_range(3..30);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..100.0)).collect();
        let base = pearson_loss_value(&x, &y).unwrap();
        assert!((base - (1.0 - pearson_oracle(&x, &y))).abs() < 1e-9);
        let a = rng.random_range(0.01..50.0);
        let b = rng.random_range(-100.0..100.0);
        let pos: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let neg: Vec<f64> = x.iter().map(|v| -a * v + b).collect();
        assert!((pearson_loss_value(&pos, &y).unwrap() - base).abs() < 1e-9);
        assert!((pearson_loss_value(&neg, &y).unwrap() - (2.0 - base)).abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn pearson_loss_in_range(v in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 2..40)) {
        let (x, y): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        let l = pearson_loss_value(&x, &y).unwrap();
        prop_assert!(l.is_finite());
        prop_assert!((-1e-9..=2.0 + 1e-9).contains(&l));
    }

    #[test]
    fn softmax_rows_normalized(v in prop::collection::vec(-80f64..80.0, 1..30)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, v.len()], v.clone()).unwrap());
        let s = tape.softmax(x).unwrap();
        let ls = tape.log_softmax(x).unwrap();
        prop_assert!((tape.value(s).data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(tape.value(ls).data().iter().all(|v| v.is_finite() && *v <= 0.0));
    }
}
