//! Temporal pooling of per-frame scores into one video score.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Binding, Linear, Module, Scalar, Tape, Tensor, TensorKind, Var};

/// Lower clamp applied before geometric and harmonic pooling.
pub const POSITIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolingMode {
    Arithmetic,
    Geometric,
    Harmonic,
    Median,
}

impl PoolingMode {
    pub const ALL: [PoolingMode; 4] = [
        PoolingMode::Arithmetic,
        PoolingMode::Geometric,
        PoolingMode::Harmonic,
        PoolingMode::Median,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PoolingMode::Arithmetic => "arith",
            PoolingMode::Geometric => "geo",
            PoolingMode::Harmonic => "harm",
            PoolingMode::Median => "median",
        }
    }
}

impl fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoolingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "arith" | "arithmetic" | "mean" => Ok(PoolingMode::Arithmetic),
            "geo" | "geometric" => Ok(PoolingMode::Geometric),
            "harm" | "harmonic" => Ok(PoolingMode::Harmonic),
            "median" => Ok(PoolingMode::Median),
            _ => Err(Error::precondition(format!("unknown pooling mode {s:?}"))),
        }
    }
}

/// Pools `scores`, clamping at [`POSITIVE_FLOOR`] for the geometric and
/// harmonic means.
pub fn pool_conventional(scores: &[f64], mode: PoolingMode) -> Result<f64> {
    pool(scores, mode, true)
}

/// Like [`pool_conventional`] but rejects nonpositive input to the
/// geometric and harmonic means instead of clamping it.
pub fn pool_conventional_strict(scores: &[f64], mode: PoolingMode) -> Result<f64> {
    pool(scores, mode, false)
}

fn pool(scores: &[f64], mode: PoolingMode, clamp: bool) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::precondition("cannot pool an empty score vector"));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::precondition("scores must be finite"));
    }
    let n = scores.len() as f64;
    let positive = |v: f64| -> Result<f64> {
        if clamp {
            Ok(v.max(POSITIVE_FLOOR))
        } else if v > 0.0 {
            Ok(v)
        } else {
            Err(Error::precondition(format!(
                "{mode} pooling needs positive scores, got {v}"
            )))
        }
    };
    match mode {
        PoolingMode::Arithmetic => Ok(scores.iter().sum::<f64>() / n),
        PoolingMode::Geometric => {
            let mut log_sum = 0.0;
            for &v in scores {
                log_sum += positive(v)?.ln();
            }
            Ok((log_sum / n).exp())
        }
        PoolingMode::Harmonic => {
            let mut inv = 0.0;
            for &v in scores {
                inv += 1.0 / positive(v)?;
            }
            Ok(n / inv)
        }
        PoolingMode::Median => {
            let mut s = scores.to_vec();
            s.sort_by(f64::total_cmp);
            let mid = s.len() / 2;
            Ok(if s.len() % 2 == 1 {
                s[mid]
            } else {
                0.5 * (s[mid - 1] + s[mid])
            })
        }
    }
}

/// Nonlinearity between the aggregator's hidden layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HiddenActivation {
    #[default]
    LogSoftmax,
    Relu,
    Tanh,
    Identity,
}

impl FromStr for HiddenActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log-softmax" => Ok(HiddenActivation::LogSoftmax),
            "relu" => Ok(HiddenActivation::Relu),
            "tanh" => Ok(HiddenActivation::Tanh),
            "identity" => Ok(HiddenActivation::Identity),
            _ => Err(Error::precondition(format!("unknown activation {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregatorConfig {
    /// Frame scores per clip.
    pub nf: usize,
    pub hidden: Vec<usize>,
    pub activation: HiddenActivation,
    /// Frame scores are mapped to `(s - input_shift) / input_scale` before
    /// the first layer.
    pub input_shift: f64,
    pub input_scale: f64,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig {
            nf: 25,
            hidden: vec![32, 16, 8],
            activation: HiddenActivation::LogSoftmax,
            input_shift: 0.0,
            input_scale: 1.0,
        }
    }
}

impl AggregatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nf == 0 {
            return Err(Error::precondition("aggregator needs at least one frame score"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::precondition("hidden layer widths must be positive"));
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0 && self.input_shift.is_finite()) {
            return Err(Error::precondition("input normalization must be finite with positive scale"));
        }
        Ok(())
    }
}

/// Fully connected network mapping `nf` ordered frame scores to one score.
#[derive(Debug, Clone, PartialEq)]
pub struct FcnnAggregator<T> {
    pub config: AggregatorConfig,
    /// Hidden layers followed by the single-neuron output layer.
    pub layers: Vec<Linear<T>>,
}

impl<T: Scalar> FcnnAggregator<T> {
    pub fn new<R: Rng + ?Sized>(config: AggregatorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut widths = vec![config.nf];
        widths.extend(&config.hidden);
        widths.push(1);
        let layers = widths.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Ok(FcnnAggregator { config, layers })
    }

    /// Every weight and bias zero.
    pub fn zeros(config: AggregatorConfig) -> Result<Self> {
        config.validate()?;
        let mut widths = vec![config.nf];
        widths.extend(&config.hidden);
        widths.push(1);
        let layers = widths.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect();
        Ok(FcnnAggregator { config, layers })
    }

    pub fn nf(&self) -> usize {
        self.config.nf
    }

    /// `scores: [B, nf] -> [B]`.
    pub fn forward(&self, tape: &mut Tape<T>, scores: Var, b: &mut Binding<T>) -> Result<Var> {
        let shape = tape.value(scores).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.config.nf {
            return Err(Error::shape(format!(
                "aggregator expects [batch, {}] scores, got {shape:?}",
                self.config.nf
            )));
        }
        let a = T::lit(1.0 / self.config.input_scale);
        let c = T::lit(-self.config.input_shift / self.config.input_scale);
        let mut h = tape.scale_shift(scores, a, c);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h, b)?;
            if i < last {
                h = match self.config.activation {
                    HiddenActivation::LogSoftmax => tape.log_softmax(h)?,
                    HiddenActivation::Relu => tape.relu(h),
                    HiddenActivation::Tanh => tape.tanh(h),
                    HiddenActivation::Identity => h,
                };
            }
        }
        tape.reshape(h, &[shape[0]])
    }

    /// Video score for one clip's frame scores.
    pub fn aggregate(&self, scores: &[T]) -> Result<T> {
        Ok(self.aggregate_batch(&[scores.to_vec()])?[0])
    }

    pub fn aggregate_batch(&self, clips: &[Vec<T>]) -> Result<Vec<T>> {
        let nf = self.config.nf;
        if let Some(bad) = clips.iter().find(|c| c.len() != nf) {
            return Err(Error::shape(format!(
                "aggregator expects {nf} frame scores, got {}",
                bad.len()
            )));
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[clips.len(), nf], clips.concat())?);
        let y = self.forward(&mut tape, x, &mut Binding::frozen())?;
        Ok(tape.value(y).data().to_vec())
    }

    pub fn cast<U: Scalar>(&self) -> FcnnAggregator<U> {
        FcnnAggregator {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }
}

impl<T: Scalar> Module<T> for FcnnAggregator<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>, TensorKind)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("fc{i}")), f);
        }
    }

    fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'a mut Tensor<T>, TensorKind),
    ) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("fc{i}")), f);
        }
    }
}

/// Video score of one clip through a single-precision aggregator.
pub fn aggregate_fcnn(agg: &FcnnAggregator<f32>, scores: &[f32]) -> Result<f32> {
    agg.aggregate(scores)
}
