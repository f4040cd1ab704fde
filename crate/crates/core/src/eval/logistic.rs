//! Five-parameter logistic mapping from raw predictions to the mos scale:
//! `q(x) = b1 * (1/2 - 1/(1 + exp(b2 * (x - b3)))) + b4 * x + b5`.

use serde::{Deserialize, Serialize};

use super::metrics::plcc;
use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 200;
pub const STEP_TOLERANCE: f64 = 1e-8;
pub const MIN_POINTS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Logistic5Params {
    pub beta: [f64; 5],
}

impl Logistic5Params {
    pub const IDENTITY: Logistic5Params = Logistic5Params {
        beta: [0.0, 1.0, 0.0, 1.0, 0.0],
    };

    pub fn apply(&self, x: f64) -> f64 {
        let [b1, b2, b3, b4, b5] = self.beta;
        b1 * (0.5 - sigmoid_neg(b2 * (x - b3))) + b4 * x + b5
    }

    pub fn map(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.apply(x)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub params: Logistic5Params,
    /// False when the iteration cap was hit before the step fell below
    /// tolerance; the parameters are then the best seen.
    pub converged: bool,
    pub iterations: usize,
    pub rmse: f64,
}

/// `1 / (1 + exp(z))` without overflow.
fn sigmoid_neg(z: f64) -> f64 {
    if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

fn model(p: &[f64; 5], x: f64) -> f64 {
    Logistic5Params { beta: *p }.apply(x)
}

fn sse(p: &[f64; 5], x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(&a, &b)| (model(p, a) - b).powi(2)).sum()
}

/// Row of the Jacobian of `model` with respect to the parameters.
fn jacobian_row(p: &[f64; 5], x: f64) -> [f64; 5] {
    let [b1, b2, b3, _, _] = *p;
    let s = sigmoid_neg(b2 * (x - b3));
    let ds = s * (1.0 - s);
    [0.5 - s, b1 * ds * (x - b3), -b1 * ds * b2, x, 1.0]
}

/// Solves a small dense system by Gaussian elimination with partial
/// pivoting. Returns None when singular.
fn solve<const N: usize>(mut a: [[f64; N]; N], mut b: [f64; N]) -> Option<[f64; N]> {
    for col in 0..N {
        let piv = (col..N).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 || !a[piv][col].is_finite() {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..N {
            let f = a[r][col] / a[col][col];
            for c in col..N {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut out = [0.0; N];
    for r in (0..N).rev() {
        let s: f64 = (r + 1..N).map(|c| a[r][c] * out[c]).sum();
        out[r] = (b[r] - s) / a[r][r];
    }
    out.iter().all(|v| v.is_finite()).then_some(out)
}

/// Least squares for `y ~ sum_k c_k * cols[k]` via Householder QR.
fn linear_lsq<const K: usize>(rows: &[[f64; K]], y: &[f64]) -> Option<[f64; K]> {
    let m = rows.len();
    let mut a: Vec<[f64; K]> = rows.to_vec();
    let mut b = y.to_vec();
    for k in 0..K {
        let norm = (k..m).map(|i| a[i][k] * a[i][k]).sum::<f64>().sqrt();
        if norm < 1e-300 {
            return None;
        }
        let alpha = if a[k][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..m).map(|i| a[i][k]).collect();
        v[0] -= alpha;
        let vv: f64 = v.iter().map(|t| t * t).sum();
        if vv > 0.0 {
            for c in k..K {
                let d: f64 = (k..m).map(|i| v[i - k] * a[i][c]).sum::<f64>() * 2.0 / vv;
                for i in k..m {
                    a[i][c] -= d * v[i - k];
                }
            }
            let d: f64 = (k..m).map(|i| v[i - k] * b[i]).sum::<f64>() * 2.0 / vv;
            for i in k..m {
                b[i] -= d * v[i - k];
            }
        }
    }
    let scale = (0..K).map(|k| a[k][k].abs()).fold(0.0, f64::max);
    let mut out = [0.0; K];
    for r in (0..K).rev() {
        if a[r][r].abs() <= scale * 1e-13 {
            return None;
        }
        let s: f64 = (r + 1..K).map(|c| a[r][c] * out[c]).sum();
        out[r] = (b[r] - s) / a[r][r];
    }
    Some(out)
}

/// Best linear part for fixed slope and center of the logistic term.
fn profile(b2: f64, b3: f64, x: &[f64], y: &[f64]) -> Option<[f64; 5]> {
    let rows: Vec<[f64; 3]> = x.iter().map(|&v| [0.5 - sigmoid_neg(b2 * (v - b3)), v, 1.0]).collect();
    let [b1, b4, b5] = linear_lsq(&rows, y)?;
    Some([b1, b2, b3, b4, b5])
}

fn affine_fit(x: &[f64], y: &[f64]) -> Option<[f64; 2]> {
    let rows: Vec<[f64; 2]> = x.iter().map(|&v| [v, 1.0]).collect();
    linear_lsq(&rows, y)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = (v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n).sqrt();
    (m, s)
}

/// Levenberg-Marquardt from `start`; returns (params, converged, iterations).
fn levenberg_marquardt(start: [f64; 5], x: &[f64], y: &[f64]) -> ([f64; 5], bool, usize) {
    let mut p = start;
    let mut cost = sse(&p, x, y);
    let mut lambda = 1e-3;
    for it in 1..=MAX_ITERATIONS {
        let mut jtj = [[0.0; 5]; 5];
        let mut jtr = [0.0; 5];
        for (&xi, &yi) in x.iter().zip(y) {
            let j = jacobian_row(&p, xi);
            let r = model(&p, xi) - yi;
            for a in 0..5 {
                jtr[a] += j[a] * r;
                for b in 0..5 {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        }
        let mut damped = jtj;
        for (a, row) in damped.iter_mut().enumerate() {
            row[a] += lambda * jtj[a][a].max(1e-12);
        }
        let Some(step) = solve(damped, jtr.map(|v| -v)) else {
            lambda *= 10.0;
            if lambda > 1e20 {
                return (p, false, it);
            }
            continue;
        };
        let norm = step.iter().map(|s| s * s).sum::<f64>().sqrt();
        let trial: [f64; 5] = std::array::from_fn(|k| p[k] + step[k]);
        let trial_cost = sse(&trial, x, y);
        if trial_cost.is_finite() && trial_cost < cost {
            p = trial;
            cost = trial_cost;
            lambda = (lambda / 10.0).max(1e-15);
        } else {
            lambda *= 10.0;
        }
        if norm < STEP_TOLERANCE {
            return (p, true, it);
        }
    }
    (p, false, MAX_ITERATIONS)
}

/// Least-squares fit of the logistic mapping from `raw` to `mos`.
///
/// The fit runs on standardized data: a grid over slope and center with the
/// linear part solved exactly, Levenberg-Marquardt from the best grid point,
/// then an affine refit of the mapped scores. The best linear map is always
/// a candidate, so the mapped PLCC is never below the raw PLCC.
pub fn fit_logistic5(raw: &[f64], mos: &[f64]) -> Result<LogisticFit> {
    if raw.len() != mos.len() {
        return Err(Error::shape(format!("{} scores vs {} mos values", raw.len(), mos.len())));
    }
    if raw.len() < MIN_POINTS {
        return Err(Error::precondition(format!(
            "logistic fitting needs at least {MIN_POINTS} points, got {}",
            raw.len()
        )));
    }
    if raw.iter().chain(mos).any(|v| !v.is_finite()) {
        return Err(Error::precondition("logistic fitting inputs must be finite"));
    }
    let (mx, sx) = mean_std(raw);
    let (my, sy) = mean_std(mos);
    if sx == 0.0 || sy == 0.0 {
        return Err(Error::degenerate("logistic fitting needs spread in both scores and mos"));
    }
    let x: Vec<f64> = raw.iter().map(|v| (v - mx) / sx).collect();
    let y: Vec<f64> = mos.iter().map(|v| (v - my) / sy).collect();

    let linear = affine_fit(&x, &y).ok_or_else(|| Error::degenerate("singular linear fit"))?;
    let mut best = [0.0, 1.0, 0.0, linear[0], linear[1]];
    let mut best_cost = sse(&best, &x, &y);
    for b2 in [-8.0, -4.0, -2.0, -1.0, -0.5, 0.5, 1.0, 2.0, 4.0, 8.0] {
        for k in 0..=12 {
            let b3 = -2.0 + k as f64 / 3.0;
            if let Some(p) = profile(b2, b3, &x, &y) {
                let c = sse(&p, &x, &y);
                if c < best_cost {
                    best = p;
                    best_cost = c;
                }
            }
        }
    }
    let (p, converged, iterations) = levenberg_marquardt(best, &x, &y);
    let mut p = if sse(&p, &x, &y) <= best_cost { p } else { best };

    // affine closure: rescaling the mapped scores stays in the family
    let mapped: Vec<f64> = x.iter().map(|&v| model(&p, v)).collect();
    if let Some([a, b]) = affine_fit(&mapped, &y) {
        let q = [a * p[0], p[1], p[2], a * p[3], a * p[4] + b];
        if sse(&q, &x, &y) <= sse(&p, &x, &y) {
            p = q;
        }
    }

    let beta = [sy * p[0], p[1] / sx, mx + sx * p[2], sy * p[3] / sx, my + sy * p[4] - sy * p[3] * mx / sx];
    let params = Logistic5Params { beta };
    let n = raw.len() as f64;
    let rmse = (raw.iter().zip(mos).map(|(&r, &m)| (params.apply(r) - m).powi(2)).sum::<f64>() / n).sqrt();
    Ok(LogisticFit {
        params,
        converged,
        iterations,
        rmse,
    })
}

/// PLCC of the logistic-mapped scores against mos. Falls back to the raw
/// PLCC if the mapped scores collapse to a constant.
pub fn mapped_plcc(fit: &LogisticFit, raw: &[f64], mos: &[f64]) -> Result<f64> {
    match plcc(&fit.params.map(raw), mos) {
        Err(Error::Degenerate(_)) => plcc(raw, mos),
        other => other,
    }
}
