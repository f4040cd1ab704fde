//! Quality metrics, logistic mapping, classification summaries, the PSNR
//! baseline and report files.

mod logistic;
mod metrics;
mod report;

use serde::{Deserialize, Serialize};

pub use logistic::{fit_logistic5, mapped_plcc, Logistic5Params, LogisticFit, MAX_ITERATIONS, MIN_POINTS, STEP_TOLERANCE};
pub use metrics::{average_ranks, krocc, plcc, srocc};
pub use report::{loss_curves_svg, rows_csv, scatter_svg, LossCurve};

use crate::error::{Error, Result};
use crate::media::{Frame, VideoClip};
use crate::pooling::{pool_conventional, PoolingMode};

/// PSNR assigned to frames identical to their reference.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRow {
    pub clip: String,
    pub mos: f64,
    pub raw: f64,
    pub mapped: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[t][p]`: samples of true class `t` predicted as `p`.
    pub counts: Vec<Vec<usize>>,
    pub accuracy: f64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn to_csv(&self, names: &[String]) -> String {
        let mut s = String::from("true\\predicted");
        for n in names {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            s.push_str(names.get(i).map(String::as_str).unwrap_or("?"));
            for c in row {
                s.push_str(&format!(",{c}"));
            }
            s.push('\n');
        }
        s
    }
}

pub fn confusion_matrix(predicted: &[usize], truth: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if predicted.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predictions vs {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::precondition("confusion matrix of no samples"));
    }
    let mut counts = vec![vec![0usize; classes]; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(Error::precondition(format!("label {} out of range 0..{classes}", p.max(t))));
        }
        counts[t][p] += 1;
    }
    let correct: usize = (0..classes).map(|i| counts[i][i]).sum();
    Ok(ConfusionMatrix {
        counts,
        accuracy: correct as f64 / predicted.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// PLCC of logistic-mapped scores.
    pub plcc: f64,
    /// Rank correlations of raw scores.
    pub srocc: f64,
    pub krocc: f64,
    pub plcc_raw: f64,
    pub srocc_mapped: f64,
    pub krocc_mapped: f64,
    pub logistic: Logistic5Params,
    pub logistic_converged: bool,
    pub clips: Vec<ClipRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confusion: Option<ConfusionMatrix>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Rank correlation of mapped scores; a mapping that flattens everything
/// leaves no ranking, so that case falls back to zero.
fn rank_or_zero(r: Result<f64>) -> Result<f64> {
    match r {
        Err(Error::Degenerate(_)) => Ok(0.0),
        other => other,
    }
}

/// Correlations between per-clip predictions and mos.
pub fn evaluate_quality(names: &[String], predictions: &[f64], mos: &[f64]) -> Result<EvalReport> {
    if names.len() != predictions.len() {
        return Err(Error::shape("clip names and predictions differ in length"));
    }
    let fit = fit_logistic5(predictions, mos)?;
    let mapped = fit.params.map(predictions);
    Ok(EvalReport {
        plcc: mapped_plcc(&fit, predictions, mos)?,
        srocc: srocc(predictions, mos)?,
        krocc: krocc(predictions, mos)?,
        plcc_raw: plcc(predictions, mos)?,
        srocc_mapped: rank_or_zero(srocc(&mapped, mos))?,
        krocc_mapped: rank_or_zero(krocc(&mapped, mos))?,
        logistic: fit.params,
        logistic_converged: fit.converged,
        clips: names
            .iter()
            .zip(predictions)
            .zip(mos)
            .zip(&mapped)
            .map(|(((n, &raw), &m), &q)| ClipRow {
                clip: n.clone(),
                mos: m,
                raw,
                mapped: q,
            })
            .collect(),
        confusion: None,
    })
}

/// PSNR of `distorted` against `reference` with pixels in `[0, 1]`, capped
/// at [`PSNR_CAP_DB`].
pub fn psnr(distorted: &Frame, reference: &Frame) -> Result<f64> {
    if !distorted.same_dims(reference) {
        return Err(Error::shape(format!(
            "frame sizes differ: {}x{} vs {}x{}",
            distorted.width(),
            distorted.height(),
            reference.width(),
            reference.height()
        )));
    }
    let n = distorted.data().len() as f64;
    let mse = distorted
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Per-frame PSNR pooled over the clip.
pub fn psnr_baseline(distorted: &VideoClip, reference: &VideoClip, mode: PoolingMode) -> Result<f64> {
    if distorted.len() != reference.len() {
        return Err(Error::shape(format!(
            "clip has {} frames, reference has {}",
            distorted.len(),
            reference.len()
        )));
    }
    let scores = distorted
        .frames()
        .iter()
        .zip(reference.frames())
        .map(|(d, r)| psnr(d, r))
        .collect::<Result<Vec<f64>>>()?;
    pool_conventional(&scores, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_counts() {
        let m = confusion_matrix(&[0, 1, 1], &[0, 1, 2], 3).unwrap();
        assert!((m.accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.counts[2], vec![0, 1, 0]);
        let zero = confusion_matrix(&[0, 0, 0, 0], &[0, 1, 2, 1], 3).unwrap();
        assert!(zero.counts.iter().all(|r| r[1] == 0 && r[2] == 0));
        assert_eq!(zero.counts.iter().map(|r| r.iter().sum::<usize>()).collect::<Vec<_>>(), vec![1, 2, 1]);
        assert_eq!(confusion_matrix(&[3], &[0], 3).unwrap_err().code(), "E_PRECOND");
    }

    #[test]
    fn perfect_and_reversed_predictors() {
        let mos: Vec<f64> = (0..10).map(|i| 20.0 + 7.0 * i as f64).collect();
        let names: Vec<String> = (0..10).map(|i| format!("c{i}")).collect();
        let r = evaluate_quality(&names, &mos, &mos).unwrap();
        for v in [r.plcc, r.srocc, r.krocc] {
            assert!((v - 1.0).abs() < 1e-12, "{v}");
        }
        let rev: Vec<f64> = mos.iter().map(|m| -m).collect();
        let r = evaluate_quality(&names, &rev, &mos).unwrap();
        assert_eq!((r.srocc, r.krocc), (-1.0, -1.0));
    }

    #[test]
    fn psnr_values() {
        let a = Frame::filled(4, 4, 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let b = Frame::filled(4, 4, 0.6);
        assert!((psnr(&b, &a).unwrap() - 20.0).abs() < 1e-5);
    }
}
