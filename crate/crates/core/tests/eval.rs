mod common;

use common::{
    arithmetic_oracle, geometric_oracle, harmonic_oracle, kendall_oracle, median_oracle, pearson_oracle,
    spearman_oracle,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scopeqa::eval::{evaluate_quality, fit_logistic5, krocc, mapped_plcc, plcc, srocc, Logistic5Params};
use scopeqa::pooling::{pool_conventional, pool_conventional_strict, PoolingMode};

/// Score vector with deliberate ties: values drawn from a small pool half
/// of the time.
fn tied_vector(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let pool: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..10.0)).collect();
    (0..n)
        .map(|_| {
            if rng.random_bool(0.5) {
                pool[rng.random_range(0..pool.len())]
            } else {
                rng.random_range(0.0..10.0)
            }
        })
        .collect()
}

#[test]
fn correlations_match_oracles_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    while checked < 1000 {
        let n = rng.random_range(3..=50);
        let x = tied_vector(n, &mut rng);
        let y = tied_vector(n, &mut rng);
        let (Ok(p), Ok(s), Ok(k)) = (plcc(&x, &y), srocc(&x, &y), krocc(&x, &y)) else {
            continue;
        };
        assert!((p - pearson_oracle(&x, &y)).abs() <= 1e-10);
        assert!((s - spearman_oracle(&x, &y)).abs() <= 1e-10);
        assert!((k - kendall_oracle(&x, &y)).abs() <= 1e-10);
        checked += 1;
    }
}

#[test]
fn correlation_error_codes() {
    assert_eq!(plcc(&[1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap_err().code(), "E_SHAPE");
    assert_eq!(srocc(&[1.0, f64::NAN, 2.0], &[1.0, 2.0, 3.0]).unwrap_err().code(), "E_PRECOND");
    assert_eq!(krocc(&[5.0; 6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap_err().code(), "E_DEGENERATE");
}

#[test]
fn poolers_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..1000 {
        let n = rng.random_range(1..=40);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..100.0)).collect();
        let am = pool_conventional(&x, PoolingMode::Arithmetic).unwrap();
        let gm = pool_conventional(&x, PoolingMode::Geometric).unwrap();
        let hm = pool_conventional(&x, PoolingMode::Harmonic).unwrap();
        let md = pool_conventional(&x, PoolingMode::Median).unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
        assert!(rel(am, arithmetic_oracle(&x)) <= 1e-12);
        assert!(rel(gm, geometric_oracle(&x)) <= 1e-12);
        assert!(rel(hm, harmonic_oracle(&x)) <= 1e-12);
        assert_eq!(md, median_oracle(&x));
        let slack = 1e-12 * am;
        assert!(am + slack >= gm && gm + slack >= hm, "{am} {gm} {hm}");
    }
}

#[test]
fn strict_pooling_rejects_nonpositive() {
    for mode in [PoolingMode::Geometric, PoolingMode::Harmonic] {
        assert_eq!(pool_conventional_strict(&[1.0, 0.0], mode).unwrap_err().code(), "E_PRECOND");
        assert!(pool_conventional(&[1.0, 0.0], mode).unwrap() > 0.0);
    }
    assert_eq!(pool_conventional(&[], PoolingMode::Median).unwrap_err().code(), "E_PRECOND");
}

#[test]
fn logistic_fit_never_worse_than_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..30 {
        let n = rng.random_range(8..60);
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mos: Vec<f64> = raw
            .iter()
            .map(|r| 50.0 + 40.0 * (r * 1.5).tanh() + rng.random_range(-5.0..5.0))
            .collect();
        let fit = fit_logistic5(&raw, &mos).unwrap();
        let mapped = mapped_plcc(&fit, &raw, &mos).unwrap();
        assert!(mapped + 1e-9 >= plcc(&raw, &mos).unwrap().abs());
        assert!(fit.iterations <= scopeqa::eval::MAX_ITERATIONS);
    }
}

#[test]
fn report_rows_follow_input_order() {
    let names: Vec<String> = (0..8).map(|i| format!("clip{i}")).collect();
    let pred = [0.1, 0.5, 0.2, 0.9, 0.4, 0.7, 0.3, 0.8];
    let mos = [20.0, 55.0, 25.0, 90.0, 45.0, 70.0, 35.0, 85.0];
    let r = evaluate_quality(&names, &pred, &mos).unwrap();
    assert_eq!(r.clips.len(), 8);
    for (row, (n, (&p, &m))) in r.clips.iter().zip(names.iter().zip(pred.iter().zip(&mos))) {
        assert_eq!((&row.clip, row.raw, row.mos), (n, p, m));
    }
    assert!((r.srocc - 1.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn correlations_bounded_and_symmetric(v in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 3..40)) {
        let (x, y): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        for f in [plcc, srocc, krocc] {
            if let (Ok(a), Ok(b)) = (f(&x, &y), f(&y, &x)) {
                prop_assert!((-1.0..=1.0).contains(&a));
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rank_correlations_invariant_to_monotone_maps(v in prop::collection::vec((-5f64..5.0, -5f64..5.0), 3..30)) {
        let (x, y): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        let xm: Vec<f64> = x.iter().map(|a| a.exp() * 3.0 + 1.0).collect();
        if let (Ok(a), Ok(b)) = (srocc(&x, &y), srocc(&xm, &y)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        if let (Ok(a), Ok(b)) = (krocc(&x, &y), krocc(&xm, &y)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pooled_value_within_range(v in prop::collection::vec(1e-3f64..1e3, 1..50)) {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for mode in PoolingMode::ALL {
            let p = pool_conventional(&v, mode).unwrap();
            prop_assert!(p >= lo * (1.0 - 1e-12) && p <= hi * (1.0 + 1e-12));
        }
    }

    #[test]
    fn logistic_is_monotone_in_its_slope_direction(
        b1 in 1.0f64..100.0, b2 in 0.1f64..5.0, b3 in -2.0f64..2.0, b5 in -10.0f64..10.0,
        xs in prop::collection::vec(-5f64..5.0, 2..20),
    ) {
        let p = Logistic5Params { beta: [b1, b2, b3, 0.0, b5] };
        let mut xs = xs;
        xs.sort_by(f64::total_cmp);
        let ys = p.map(&xs);
        for w in ys.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-12);
        }
    }
}
