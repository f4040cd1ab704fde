//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use scopeqa::nn::{Tape, Tensor, Var};
use scopeqa::Result;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-3;

/// Largest gap between analytic and central-difference gradients across all
/// inputs, divided by the largest finite-difference magnitude (floored at 1e-8).
pub fn gradcheck<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars).expect("forward");
        tape.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars).expect("forward");
    let grads = tape.backward(out).expect("backward");

    let mut worst_gap: f64 = 0.0;
    let mut scale: f64 = 1e-8;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]);
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst_gap = worst_gap.max((numeric - analytic.data()[i]).abs());
            scale = scale.max(numeric.abs());
        }
    }
    worst_gap / scale
}

/// Contracts `y` against a fixed weight tensor so any output becomes a scalar
/// with a generic upstream gradient.
pub fn weighted_sum(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Direct six-loop cross-correlation, NCHW input and OCHW weights.
pub fn naive_conv2d(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, wd] = xs;
    let [o, _, kh, kw] = ws;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * w[((oc * c + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    (out, [n, o, oh, ow])
}

/// Pearson r straight from the definition.
pub fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Average (fractional) ranks by counting, O(n^2).
pub fn average_ranks_oracle(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn spearman_oracle(x: &[f64], y: &[f64]) -> f64 {
    pearson_oracle(&average_ranks_oracle(x), &average_ranks_oracle(y))
}

/// Kendall tau-b by enumerating every pair.
pub fn kendall_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let (mut conc, mut disc, mut tie_x, mut tie_y) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 && dy == 0.0 {
                continue;
            } else if dx == 0.0 {
                tie_x += 1.0;
            } else if dy == 0.0 {
                tie_y += 1.0;
            } else if dx * dy > 0.0 {
                conc += 1.0;
            } else {
                disc += 1.0;
            }
        }
    }
    (conc - disc) / ((conc + disc + tie_x) * (conc + disc + tie_y)).sqrt()
}

pub fn arithmetic_oracle(x: &[f64]) -> f64 {
    let mut s = 0.0;
    for v in x {
        s += v;
    }
    s / x.len() as f64
}

pub fn geometric_oracle(x: &[f64]) -> f64 {
    // n-th root of the product, taken factor by factor to stay in range
    let n = x.len() as f64;
    x.iter().map(|v| v.powf(1.0 / n)).product()
}

pub fn harmonic_oracle(x: &[f64]) -> f64 {
    let mut s = 0.0;
    for v in x {
        s += 1.0 / v;
    }
    x.len() as f64 / s
}

pub fn median_oracle(x: &[f64]) -> f64 {
    // selection by counting instead of sorting
    let n = x.len();
    let kth = |k: usize| -> f64 {
        *x.iter()
            .find(|&&v| {
                let less = x.iter().filter(|&&u| u < v).count();
                let le = x.iter().filter(|&&u| u <= v).count();
                less <= k && k < le
            })
            .expect("order statistic exists")
    };
    if n % 2 == 1 {
        kth(n / 2)
    } else {
        0.5 * (kth(n / 2 - 1) + kth(n / 2))
    }
}

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use scopeqa::nn::Binding;
use scopeqa::pooling::{AggregatorConfig, FcnnAggregator, HiddenActivation};

fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, std, rng)
}

/// Values bounded away from zero so ReLU kinks stay outside the FD stencil.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn probs_labels(n: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..c)).collect()
}

/// Worst relative gradient error per operation over `instances` random cases.
pub fn gradient_suite(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results: Vec<(&'static str, f64)> = Vec::new();
    let mut record = |name: &'static str, err: f64| {
        match results.iter_mut().find(|(n, _)| *n == name) {
            Some((_, e)) => *e = e.max(err),
            None => results.push((name, err)),
        }
    };
    for _ in 0..instances {
        // conv2d with stride/padding/bias variations
        let n = rng.random_range(1..3);
        let c = rng.random_range(1..4);
        let o = rng.random_range(1..4);
        let k = [1, 3][rng.random_range(0..2)];
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..2);
        let side = rng.random_range(k.max(3)..7);
        let x = randn(&[n, c, side, side], 1.0, &mut rng);
        let w = randn(&[o, c, k, k], 0.5, &mut rng);
        let b = randn(&[o], 0.5, &mut rng);
        let probe_shape = {
            let os = (side + 2 * pad - k) / stride + 1;
            [n, o, os, os]
        };
        let r = randn(&probe_shape, 1.0, &mut rng);
        record(
            "conv2d",
            gradcheck(&[x, w, b], |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                weighted_sum(t, y, &r)
            }),
        );

        // batch norm, batch statistics and running statistics
        let n = rng.random_range(2..4);
        let c = rng.random_range(1..4);
        let x = randn(&[n, c, 3, 3], 1.0, &mut rng);
        let g = randn(&[c], 1.0, &mut rng);
        let be = randn(&[c], 1.0, &mut rng);
        let r = randn(&[n, c, 3, 3], 1.0, &mut rng);
        record(
            "batch_norm_train",
            gradcheck(&[x.clone(), g.clone(), be.clone()], |t, v| {
                let (y, _, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(t, y, &r)
            }),
        );
        let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
        record(
            "batch_norm_eval",
            gradcheck(&[x, g, be], |t, v| {
                let y = t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
                weighted_sum(t, y, &r)
            }),
        );

        // fully connected
        let n = rng.random_range(1..5);
        let d_in = rng.random_range(1..6);
        let d_out = rng.random_range(1..6);
        let x = randn(&[n, d_in], 1.0, &mut rng);
        let w = randn(&[d_out, d_in], 1.0, &mut rng);
        let b = randn(&[d_out], 1.0, &mut rng);
        let r = randn(&[n, d_out], 1.0, &mut rng);
        record(
            "fully_connected",
            gradcheck(&[x, w, b], |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                weighted_sum(t, y, &r)
            }),
        );

        // relu, tanh, global average pooling
        let x = away_from_zero(&[2, 3, 2, 2], &mut rng);
        let r = randn(&[2, 3, 2, 2], 1.0, &mut rng);
        record(
            "relu",
            gradcheck(std::slice::from_ref(&x), |t, v| {
                let y = t.relu(v[0]);
                weighted_sum(t, y, &r)
            }),
        );
        let r2 = randn(&[2, 3], 1.0, &mut rng);
        record(
            "global_avg_pool",
            gradcheck(&[x], |t, v| {
                let y = t.global_avg_pool(v[0])?;
                weighted_sum(t, y, &r2)
            }),
        );

        // softmax and log_softmax
        let n = rng.random_range(1..4);
        let c = rng.random_range(2..7);
        let x = randn(&[n, c], 2.0, &mut rng);
        let r = randn(&[n, c], 1.0, &mut rng);
        record(
            "softmax",
            gradcheck(std::slice::from_ref(&x), |t, v| {
                let y = t.softmax(v[0])?;
                weighted_sum(t, y, &r)
            }),
        );
        record(
            "log_softmax",
            gradcheck(std::slice::from_ref(&x), |t, v| {
                let y = t.log_softmax(v[0])?;
                weighted_sum(t, y, &r)
            }),
        );

        // cross-entropy on softmax probabilities
        let labels = probs_labels(n, c, &mut rng);
        record(
            "cross_entropy",
            gradcheck(std::slice::from_ref(&x), |t, v| {
                let p = t.softmax(v[0])?;
                t.cross_entropy(p, &labels)
            }),
        );

        // frame-level Pearson loss on raw predictions
        let len = rng.random_range(3..12);
        let pred = randn(&[len], 1.0, &mut rng);
        let target: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..100.0)).collect();
        record(
            "pearson_frame",
            gradcheck(&[pred], |t, v| t.pearson_loss(v[0], &target)),
        );

        // video-level Pearson loss through the aggregator, with respect to
        // the frame scores it pools
        // video batches hold at least four clips
        let clips = rng.random_range(4..9);
        let nf = rng.random_range(2..6);
        let activation = [HiddenActivation::LogSoftmax, HiddenActivation::Tanh][rng.random_range(0..2)];
        let agg = FcnnAggregator::<f64>::new(
            AggregatorConfig {
                nf,
                hidden: vec![4, 3],
                activation,
                input_shift: 0.5,
                input_scale: 2.0,
            },
            &mut rng,
        )
        .unwrap();
        let scores = randn(&[clips, nf], 1.0, &mut rng);
        let mos: Vec<f64> = (0..clips).map(|_| rng.random_range(0.0..100.0)).collect();
        record(
            "pearson_video",
            gradcheck(&[scores], |t, v| {
                let s = agg.forward(t, v[0], &mut Binding::frozen())?;
                t.pearson_loss(s, &mos)
            }),
        );
    }
    results
}
