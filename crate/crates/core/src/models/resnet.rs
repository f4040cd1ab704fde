//! Compact residual network with a swappable head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::Frame;
use crate::nn::{
    join, BatchNorm, Binding, Conv2d, Linear, Mode, Module, Scalar, Tape, Tensor, TensorKind, Var,
};

/// Frames per forward chunk during inference.
const INFER_CHUNK: usize = 32;

/// Standard deviation of the regression head's initial weights.
pub const REGRESSION_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    Classification(usize),
    Regression,
}

impl Head {
    pub fn outputs(self) -> usize {
        match self {
            Head::Classification(c) => c,
            Head::Regression => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResNetConfig {
    pub stem_channels: usize,
    /// Output channels of each stage; every stage after the first halves
    /// the spatial resolution.
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Square input crop side.
    pub crop: usize,
    pub head: Head,
}

impl Default for ResNetConfig {
    fn default() -> Self {
        ResNetConfig {
            stem_channels: 16,
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: 2,
            crop: 64,
            head: Head::Classification(super::NUM_CLASSES),
        }
    }
}

impl ResNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 || self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::precondition("network needs at least one stage and nonzero widths"));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::precondition("each stage needs at least one residual block"));
        }
        if self.crop < 1 << (self.stage_channels.len() - 1) {
            return Err(Error::precondition("crop too small for the number of stages"));
        }
        if self.head.outputs() == 0 {
            return Err(Error::precondition("head needs at least one output"));
        }
        Ok(())
    }

    pub fn feature_width(&self) -> usize {
        *self.stage_channels.last().expect("validated")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasicBlock<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm<T>,
    pub shortcut: Option<(Conv2d<T>, BatchNorm<T>)>,
}

impl<T: Scalar> BasicBlock<T> {
    fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, stride: usize, rng: &mut R) -> Self {
        let shortcut = (stride != 1 || c_in != c_out)
            .then(|| (Conv2d::new(c_in, c_out, 1, stride, 0, rng), BatchNorm::new(c_out)));
        BasicBlock {
            conv1: Conv2d::new(c_in, c_out, 3, stride, 1, rng),
            bn1: BatchNorm::new(c_out),
            conv2: Conv2d::new(c_out, c_out, 3, 1, 1, rng),
            bn2: BatchNorm::new(c_out),
            shortcut,
        }
    }

    fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode, b: &mut Binding<T>) -> Result<Var> {
        let h = self.conv1.forward(tape, x, b)?;
        let h = self.bn1.forward(tape, h, mode, b)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, h, b)?;
        let h = self.bn2.forward(tape, h, mode, b)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(tape, x, b)?;
                bn.forward(tape, s, mode, b)?
            }
            None => x,
        };
        let sum = tape.add(h, skip)?;
        Ok(tape.relu(sum))
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut v = vec![&mut self.bn1, &mut self.bn2];
        if let Some((_, bn)) = &mut self.shortcut {
            v.push(bn);
        }
        v
    }
}

impl<T: Scalar> Module<T> for BasicBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>, TensorKind)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        if let Some((conv, bn)) = &self.shortcut {
            conv.visit(&join(prefix, "shortcut.conv"), f);
            bn.visit(&join(prefix, "shortcut.bn"), f);
        }
    }

    fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'a mut Tensor<T>, TensorKind),
    ) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        if let Some((conv, bn)) = &mut self.shortcut {
            conv.visit_mut(&join(prefix, "shortcut.conv"), f);
            bn.visit_mut(&join(prefix, "shortcut.bn"), f);
        }
    }
}

/// Stem convolution, residual stages, global average pooling and a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct ResNet<T> {
    pub config: ResNetConfig,
    pub stem: Conv2d<T>,
    pub stem_bn: BatchNorm<T>,
    pub blocks: Vec<BasicBlock<T>>,
    pub head: Linear<T>,
}

impl<T: Scalar> ResNet<T> {
    pub fn new<R: Rng + ?Sized>(config: ResNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let stem = Conv2d::new(3, config.stem_channels, 3, 1, 1, rng);
        let mut blocks = Vec::new();
        let mut c_in = config.stem_channels;
        for (s, &c_out) in config.stage_channels.iter().enumerate() {
            for i in 0..config.blocks_per_stage {
                let stride = if s > 0 && i == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(c_in, c_out, stride, rng));
                c_in = c_out;
            }
        }
        let head = match config.head {
            Head::Classification(c) => Linear::new(c_in, c, rng),
            Head::Regression => Linear::with_std(c_in, 1, REGRESSION_INIT_STD, rng),
        };
        Ok(ResNet {
            stem_bn: BatchNorm::new(config.stem_channels),
            config,
            stem,
            blocks,
            head,
        })
    }

    /// Pooled backbone features `[N, C]` for input `[N, 3, crop, crop]`.
    pub fn features(&self, tape: &mut Tape<T>, x: Var, mode: Mode, b: &mut Binding<T>) -> Result<Var> {
        let shape = tape.value(x).shape();
        let crop = self.config.crop;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != crop || shape[3] != crop {
            return Err(Error::shape(format!(
                "network expects [N, 3, {crop}, {crop}] input, got {shape:?}"
            )));
        }
        let h = self.stem.forward(tape, x, b)?;
        let h = self.stem_bn.forward(tape, h, mode, b)?;
        let mut h = tape.relu(h);
        for block in &self.blocks {
            h = block.forward(tape, h, mode, b)?;
        }
        tape.global_avg_pool(h)
    }

    /// Head output `[N, outputs]` (logits or scores).
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode, b: &mut Binding<T>) -> Result<Var> {
        let f = self.features(tape, x, mode, b)?;
        self.head.forward(tape, f, b)
    }

    /// Batch norms in the order their statistics are recorded during a forward pass.
    fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut v = vec![&mut self.stem_bn];
        for block in &mut self.blocks {
            v.extend(block.norms_mut());
        }
        v
    }

    /// Folds batch statistics recorded by a training-mode forward into the
    /// running estimates. Consumes the first entries of `stats`; returns how
    /// many were used.
    pub fn commit_batch_stats(&mut self, stats: &[(Vec<T>, Vec<T>, usize)]) -> Result<usize> {
        let norms = self.norms_mut();
        if stats.len() < norms.len() {
            return Err(Error::shape("fewer batch statistics than normalization layers"));
        }
        let used = norms.len();
        for (bn, (mean, var, count)) in norms.into_iter().zip(stats) {
            bn.update_running(mean, var, *count);
        }
        Ok(used)
    }

    /// Replaces every running mean and variance with the population
    /// statistics of `frames`, measured with training-mode forwards over
    /// chunks of `chunk` frames. Weights are untouched.
    pub fn recalibrate_norms(&mut self, frames: &[Frame], chunk: usize) -> Result<()> {
        if frames.len() < 2 || chunk < 2 {
            return Err(Error::precondition("recalibration needs batches of at least two frames"));
        }
        // per layer: (sum of values, sum of squares, count), in f64
        let mut acc: Vec<(Vec<f64>, Vec<f64>, usize)> = Vec::new();
        let mut chunks: Vec<&[Frame]> = frames.chunks(chunk).collect();
        if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
            let tail = chunks.pop().expect("nonempty").len();
            let k = chunks.len() - 1;
            let start = k * chunk;
            chunks[k] = &frames[start..start + chunk + tail];
        }
        for c in chunks {
            let mut tape = Tape::new();
            let x = tape.constant(frames_to_tensor(c)?);
            let mut b = Binding::frozen();
            self.features(&mut tape, x, Mode::Train, &mut b)?;
            if acc.is_empty() {
                acc = b
                    .bn_stats
                    .iter()
                    .map(|(m, _, _)| (vec![0.0; m.len()], vec![0.0; m.len()], 0))
                    .collect();
            }
            for ((s, q, n), (mean, var, count)) in acc.iter_mut().zip(&b.bn_stats) {
                let k = *count as f64;
                for (i, (&m, &v)) in mean.iter().zip(var).enumerate() {
                    let (m, v) = (m.as_f64(), v.as_f64());
                    s[i] += m * k;
                    q[i] += (v + m * m) * k;
                }
                *n += count;
            }
        }
        for (bn, (s, q, n)) in self.norms_mut().into_iter().zip(acc) {
            let nf = n as f64;
            let unbias = nf / (nf - 1.0).max(1.0);
            for (i, r) in bn.running_mean.data_mut().iter_mut().enumerate() {
                *r = T::lit(s[i] / nf);
            }
            for (i, r) in bn.running_var.data_mut().iter_mut().enumerate() {
                let m = s[i] / nf;
                *r = T::lit(((q[i] / nf - m * m).max(0.0)) * unbias);
            }
        }
        Ok(())
    }

    /// Same backbone, new head.
    pub fn with_head<R: Rng + ?Sized>(&self, head: Head, rng: &mut R) -> Self {
        let mut config = self.config.clone();
        config.head = head;
        let width = config.feature_width();
        let head_layer = match head {
            Head::Classification(c) => Linear::new(width, c, rng),
            Head::Regression => Linear::with_std(width, 1, REGRESSION_INIT_STD, rng),
        };
        ResNet {
            config,
            stem: self.stem.clone(),
            stem_bn: self.stem_bn.clone(),
            blocks: self.blocks.clone(),
            head: head_layer,
        }
    }

    /// Eval-mode head outputs for a set of frames, `[N, outputs]`.
    pub fn infer(&self, frames: &[Frame]) -> Result<Tensor<T>> {
        self.infer_with(frames, |net, tape, x, b| net.forward(tape, x, Mode::Eval, b))
    }

    /// Eval-mode pooled features, `[N, C]`.
    pub fn infer_features(&self, frames: &[Frame]) -> Result<Tensor<T>> {
        self.infer_with(frames, |net, tape, x, b| net.features(tape, x, Mode::Eval, b))
    }

    fn infer_with(
        &self,
        frames: &[Frame],
        f: impl Fn(&Self, &mut Tape<T>, Var, &mut Binding<T>) -> Result<Var>,
    ) -> Result<Tensor<T>> {
        if frames.is_empty() {
            return Err(Error::precondition("no frames to run"));
        }
        let mut out = Vec::new();
        let mut width = 0;
        for chunk in frames.chunks(INFER_CHUNK) {
            let mut tape = Tape::new();
            let x = tape.constant(frames_to_tensor(chunk)?);
            let y = f(self, &mut tape, x, &mut Binding::frozen())?;
            width = tape.value(y).shape()[1];
            out.extend_from_slice(tape.value(y).data());
        }
        Tensor::new(&[frames.len(), width], out)
    }
}

impl<T: Scalar> Module<T> for ResNet<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>, TensorKind)) {
        self.stem.visit(&join(prefix, "stem.conv"), f);
        self.stem_bn.visit(&join(prefix, "stem.bn"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'a mut Tensor<T>, TensorKind),
    ) {
        self.stem.visit_mut(&join(prefix, "stem.conv"), f);
        self.stem_bn.visit_mut(&join(prefix, "stem.bn"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Stacks equally sized frames into an `[N, 3, H, W]` tensor.
pub fn frames_to_tensor<T: Scalar>(frames: &[Frame]) -> Result<Tensor<T>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::precondition("no frames to stack"))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(frames.len() * 3 * w * h);
    for f in frames {
        if !f.same_dims(first) {
            return Err(Error::shape(format!(
                "frame {}x{} differs from {w}x{h}",
                f.width(),
                f.height()
            )));
        }
        data.extend(f.data().iter().map(|&v| T::lit(v as f64)));
    }
    Tensor::new(&[frames.len(), 3, h, w], data)
}
