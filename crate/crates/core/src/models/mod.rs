//! Frame-level distortion classifier, frame-level quality predictor and the
//! video quality network that pools frame scores with a learned aggregator.

mod checkpoint;
mod resnet;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, SavedModel, TrainMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use resnet::{frames_to_tensor, BasicBlock, Head, ResNet, ResNetConfig, REGRESSION_INIT_STD};

use crate::distort::{DistortionType, SeverityLevel};
use crate::error::{Error, Result};
use crate::media::{sample_frames, Frame, VideoClip};
use crate::nn::{join, Binding, Mode, Module, Tape, Tensor, TensorKind, Var};
use crate::pooling::FcnnAggregator;

/// Number of joint (type, level) classes.
pub const NUM_CLASSES: usize = 20;
/// Number of distortion types.
pub const NUM_TYPES: usize = 5;

/// Joint class index, type-major: `4 * type + (level - 1)`.
pub fn encode_label(ty: DistortionType, level: SeverityLevel) -> usize {
    4 * ty.index() + level.index()
}

pub fn decode_label(class: usize) -> Option<(DistortionType, SeverityLevel)> {
    if class >= NUM_CLASSES {
        return None;
    }
    Some((DistortionType::from_index(class / 4)?, SeverityLevel::ALL[class % 4]))
}

/// All 20 classes in index order.
pub fn class_list() -> Vec<(DistortionType, SeverityLevel)> {
    (0..NUM_CLASSES).filter_map(decode_label).collect()
}

/// Joint class to type index.
pub fn collapse_class(class: usize) -> usize {
    class / 4
}

/// `"WN-EA"` style name of a joint class.
pub fn class_name(class: usize) -> Option<String> {
    decode_label(class).map(|(t, l)| format!("{}-{}", t.code(), l.code()))
}

/// Argmax with ties going to the lowest index.
pub fn predict_class<T: PartialOrd + Copy>(probs: &[T]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Softmax class probabilities `[N, C]` in eval mode.
pub fn fdc_forward(model: &ResNet<f32>, frames: &[Frame]) -> Result<Tensor<f32>> {
    if !matches!(model.config.head, Head::Classification(_)) {
        return Err(Error::precondition("model does not have a classification head"));
    }
    let logits = model.infer(frames)?;
    let mut tape = Tape::new();
    let x = tape.constant(logits);
    let p = tape.softmax(x)?;
    Ok(tape.value(p).clone())
}

/// Copies the backbone of a 20-class model under a fresh 5-class head.
pub fn fine_tune_distortion_only<R: Rng + ?Sized>(fdc: &ResNet<f32>, rng: &mut R) -> Result<ResNet<f32>> {
    if fdc.config.head != Head::Classification(NUM_CLASSES) {
        return Err(Error::precondition(format!(
            "expected a {NUM_CLASSES}-class classifier, got head {:?}",
            fdc.config.head
        )));
    }
    Ok(fdc.with_head(Head::Classification(NUM_TYPES), rng))
}

/// Copies the backbone of a classifier under a single-neuron regression head.
pub fn fqp_from_fdc<R: Rng + ?Sized>(fdc: &ResNet<f32>, rng: &mut R) -> Result<ResNet<f32>> {
    if !matches!(fdc.config.head, Head::Classification(_)) {
        return Err(Error::precondition("frame quality model must start from a classifier"));
    }
    Ok(fdc.with_head(Head::Regression, rng))
}

/// One unbounded score per frame.
pub fn fqp_forward(model: &ResNet<f32>, frames: &[Frame]) -> Result<Vec<f32>> {
    if model.config.head != Head::Regression {
        return Err(Error::precondition("model does not have a regression head"));
    }
    Ok(model.infer(frames)?.into_data())
}

/// Samples `nf` frames uniformly and center-crops them to `crop`.
/// Frames smaller than the crop are rejected.
pub fn clip_input(clip: &VideoClip, nf: usize, crop: usize) -> Result<Vec<Frame>> {
    sample_frames(clip, nf)?
        .iter()
        .map(|f| f.center_crop(crop, crop))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VqpMode {
    /// Frame model frozen, aggregator trained.
    Transfer,
    /// Both trained jointly.
    EndToEnd,
}

/// Frame quality model followed by the temporal aggregator.
#[derive(Debug, Clone, PartialEq)]
pub struct VqpNet {
    pub frame: ResNet<f32>,
    pub aggregator: FcnnAggregator<f32>,
    pub mode: VqpMode,
}

impl VqpNet {
    pub fn new(frame: ResNet<f32>, aggregator: FcnnAggregator<f32>, mode: VqpMode) -> Result<Self> {
        if frame.config.head != Head::Regression {
            return Err(Error::precondition("video network needs a frame quality model"));
        }
        Ok(VqpNet {
            frame,
            aggregator,
            mode,
        })
    }

    pub fn nf(&self) -> usize {
        self.aggregator.nf()
    }

    /// Video scores `[B]` for clip frames stacked as `[B * nf, 3, crop, crop]`.
    /// The frame model always runs with its running normalization statistics.
    pub fn forward(
        &self,
        tape: &mut Tape<f32>,
        frames: Var,
        frame_binding: &mut Binding<f32>,
        agg_binding: &mut Binding<f32>,
    ) -> Result<(Var, Var)> {
        let n = tape.value(frames).shape()[0];
        let nf = self.nf();
        if !n.is_multiple_of(nf) {
            return Err(Error::shape(format!("{n} frames is not a multiple of {nf}")));
        }
        let s = self.frame.forward(tape, frames, Mode::Eval, frame_binding)?;
        let per_clip = tape.reshape(s, &[n / nf, nf])?;
        let v = self.aggregator.forward(tape, per_clip, agg_binding)?;
        Ok((s, v))
    }

    /// Frame scores and video score for one clip's prepared frames.
    pub fn predict(&self, frames: &[Frame]) -> Result<(Vec<f32>, f32)> {
        if frames.len() != self.nf() {
            return Err(Error::shape(format!(
                "expected {} frames, got {}",
                self.nf(),
                frames.len()
            )));
        }
        let scores = fqp_forward(&self.frame, frames)?;
        let video = self.aggregator.aggregate(&scores)?;
        Ok((scores, video))
    }
}

impl Module<f32> for VqpNet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<f32>, TensorKind)) {
        self.frame.visit(&join(prefix, "frame"), f);
        self.aggregator.visit(&join(prefix, "aggregator"), f);
    }

    fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'a mut Tensor<f32>, TensorKind),
    ) {
        self.frame.visit_mut(&join(prefix, "frame"), f);
        self.aggregator.visit_mut(&join(prefix, "aggregator"), f);
    }
}
