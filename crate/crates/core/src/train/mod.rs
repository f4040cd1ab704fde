//! Training procedures: distortion classification, the distortion-only
//! fine-tune, frame quality regression and the video network in transfer
//! and end-to-end modes.

mod augment;
mod pseudo_mos;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use augment::augment_frame;
pub use pseudo_mos::{assign_pseudo_mos, PseudoMosSpec};

use crate::error::{Error, Result};
use crate::media::{load_clip, sample_frames, DatasetManifest, Frame, ManifestEntry, Split};
use crate::models::{
    encode_label, fdc_forward, fine_tune_distortion_only, fqp_forward, fqp_from_fdc, frames_to_tensor,
    Head, ResNet, ResNetConfig, VqpMode, VqpNet, NUM_CLASSES,
};
use crate::nn::{
    collect_grads, pearson_is_degenerate, pearson_loss_value, Adam, Binding, Mode, Module,
    PlateauSchedule, Tape, Tensor, PROB_FLOOR,
};
use crate::pooling::{AggregatorConfig, FcnnAggregator};

/// Smallest frame batch for the frame-level Pearson loss.
pub const MIN_FRAME_BATCH: usize = 8;
/// Smallest clip batch for the video-level Pearson loss.
pub const MIN_CLIP_BATCH: usize = 4;
/// Frames per forward/backward chunk when the frame model trains inside the
/// video network.
const E2E_CHUNK: usize = 32;
/// Mixed into the run seed to initialize the aggregator, so transfer and
/// end-to-end runs with one seed start from the same aggregator.
const AGGREGATOR_SEED_SALT: u64 = 0xa66e_6a70;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Frames per batch for frame models, clips per batch for the video network.
    pub batch: usize,
    pub seed: u64,
    /// Share of the training split held out for validation, per content.
    pub val_fraction: f64,
    /// Random crop and horizontal flip for frame-level training.
    pub augment: bool,
    /// Frames sampled from each clip.
    pub frames_per_clip: usize,
    /// Halve the learning rate when the training loss stalls.
    pub plateau: bool,
    /// Re-estimate normalization statistics on the training frames after
    /// every epoch instead of relying on the running averages alone.
    pub recalibrate_norms: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::fdc()
    }
}

impl TrainConfig {
    pub fn fdc() -> Self {
        TrainConfig {
            lr: 0.01,
            epochs: 30,
            batch: 32,
            seed: 0,
            val_fraction: 0.2,
            augment: true,
            frames_per_clip: 25,
            plateau: true,
            recalibrate_norms: true,
        }
    }

    pub fn fqp() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 10,
            ..Self::fdc()
        }
    }

    pub fn vqp() -> Self {
        TrainConfig {
            lr: 1e-5,
            epochs: 20,
            batch: 8,
            augment: false,
            ..Self::fdc()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::precondition(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::precondition("at least one epoch is required"));
        }
        if self.batch < 2 {
            return Err(Error::precondition("batch size must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::precondition("validation fraction must lie in [0, 1)"));
        }
        if self.frames_per_clip == 0 {
            return Err(Error::precondition("frames per clip must be positive"));
        }
        Ok(())
    }
}

/// A manifest entry with its sampled frames in memory.
#[derive(Debug, Clone)]
pub struct LoadedClip {
    pub entry: ManifestEntry,
    pub frames: Vec<Frame>,
}

impl LoadedClip {
    fn mos(&self) -> Result<f64> {
        self.entry
            .mos
            .ok_or_else(|| Error::precondition(format!("clip {} has no mos", self.entry.clip_path)))
    }
}

/// Loads and samples `nf` frames from each entry, preserving order.
pub fn load_clips(manifest: &DatasetManifest, entries: &[ManifestEntry], nf: usize) -> Result<Vec<LoadedClip>> {
    entries
        .par_iter()
        .map(|e| {
            let clip = load_clip(manifest.resolve(e), None)?;
            Ok(LoadedClip {
                entry: e.clone(),
                frames: sample_frames(&clip, nf)?,
            })
        })
        .collect()
}

/// Holds out `fraction` of each reference content's entries, chosen at
/// random. Returns (train, validation) indices in input order.
pub fn validation_split(entries: &[ManifestEntry], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        groups.entry(e.reference_id.as_str()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val = Vec::new();
    for idx in groups.values_mut() {
        idx.shuffle(&mut rng);
        let k = (fraction * idx.len() as f64).round() as usize;
        val.extend_from_slice(&idx[..k.min(idx.len().saturating_sub(1))]);
    }
    val.sort_unstable();
    let train = (0..entries.len()).filter(|i| val.binary_search(i).is_err()).collect();
    (train, val)
}

#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Vec<LoadedClip>,
    pub val: Vec<LoadedClip>,
}

/// Training split of `manifest`, loaded and divided into train/validation.
pub fn prepare_training_data(manifest: &DatasetManifest, config: &TrainConfig) -> Result<Datasets> {
    config.validate()?;
    let entries: Vec<ManifestEntry> = manifest.split_entries(Split::Train).cloned().collect();
    if entries.is_empty() {
        return Err(Error::precondition("the manifest has no training clips"));
    }
    let (tr, va) = validation_split(&entries, config.val_fraction, config.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| entries[i].clone()).collect::<Vec<_>>();
    Ok(Datasets {
        train: load_clips(manifest, &pick(&tr), config.frames_per_clip)?,
        val: load_clips(manifest, &pick(&va), config.frames_per_clip)?,
    })
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub logs: Vec<EpochLog>,
    /// Validation loss before the first update.
    pub initial_val_loss: Option<f64>,
    pub initial_accuracy: Option<f64>,
    /// Epoch whose model was returned (1-based; 0 means the initial model).
    pub best_epoch: usize,
    /// Batches skipped because their targets had no spread.
    pub skipped_batches: usize,
}

impl TrainReport {
    pub fn final_log(&self) -> Option<&EpochLog> {
        self.logs.last()
    }

    /// Validation losses with the initial value first.
    pub fn val_curve(&self) -> Vec<f64> {
        self.initial_val_loss
            .into_iter()
            .chain(self.logs.iter().filter_map(|l| l.val_loss))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("epoch,lr,train_loss,val_loss,accuracy\n");
        for l in &self.logs {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                l.epoch,
                l.lr,
                l.train_loss,
                opt(l.val_loss),
                opt(l.accuracy)
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub report: TrainReport,
}

struct EpochStats {
    loss: f64,
    skipped: usize,
}

#[derive(Clone, Copy)]
struct Validation {
    loss: Option<f64>,
    accuracy: Option<f64>,
}

/// Splits `0..n` into batches of `size`; a tail shorter than `min` joins
/// the previous batch.
fn batch_ranges(n: usize, size: usize, min: usize) -> Vec<Range<usize>> {
    let mut out: Vec<Range<usize>> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() < min) {
        let tail = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").end = tail.end;
    }
    out
}

/// Shared epoch loop: plateau schedule on the epoch training loss, returning
/// the model with the lowest validation loss (the last one without
/// validation data).
fn fit<M: Clone>(
    mut model: M,
    config: &TrainConfig,
    mut epoch: impl FnMut(&mut M, &mut Adam<f32>, &mut ChaCha8Rng) -> Result<EpochStats>,
    validate: impl Fn(&M) -> Result<Validation>,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome<M>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.lr);
    let mut schedule = PlateauSchedule::new(config.lr);
    let initial = validate(&model)?;
    let mut report = TrainReport {
        initial_val_loss: initial.loss,
        initial_accuracy: initial.accuracy,
        ..Default::default()
    };
    let mut best: Option<(f64, M)> = None;
    for e in 1..=config.epochs {
        adam.lr = schedule.lr;
        let stats = epoch(&mut model, &mut adam, &mut rng)?;
        report.skipped_batches += stats.skipped;
        let v = validate(&model)?;
        let log = EpochLog {
            epoch: e,
            lr: adam.lr,
            train_loss: stats.loss,
            val_loss: v.loss,
            accuracy: v.accuracy,
        };
        progress(&log);
        report.logs.push(log);
        if config.plateau {
            schedule.observe(stats.loss);
        }
        if let Some(l) = v.loss {
            if best.as_ref().is_none_or(|(b, _)| l < *b) {
                best = Some((l, model.clone()));
                report.best_epoch = e;
            }
        }
    }
    let model = match best {
        Some((_, m)) => m,
        None => {
            report.best_epoch = config.epochs;
            model
        }
    };
    Ok(TrainOutcome { model, report })
}

fn adam_step<M: Module<f32>>(model: &mut M, adam: &mut Adam<f32>, grads: &[Tensor<f32>]) -> Result<()> {
    let mut params = model.params_mut();
    adam.step(&mut params, grads)
}

/// Frames for one training step: augmented crops, or center crops.
fn batch_frames(frames: &[&Frame], crop: usize, augment: bool, rng: &mut ChaCha8Rng) -> Result<Vec<Frame>> {
    frames
        .iter()
        .map(|f| {
            if augment {
                augment_frame(f, crop, true, rng)
            } else {
                f.center_crop(crop, crop)
            }
        })
        .collect()
}

fn center_crops(clips: &[LoadedClip], crop: usize) -> Result<Vec<Vec<Frame>>> {
    clips
        .iter()
        .map(|c| c.frames.iter().map(|f| f.center_crop(crop, crop)).collect())
        .collect()
}

/// Center crops of every training frame, interleaved across clips so each
/// calibration batch mixes content and distortion.
fn calibration_frames(clips: &[LoadedClip], crop: usize) -> Result<Vec<Frame>> {
    let rounds = clips.iter().map(|c| c.frames.len()).max().unwrap_or(0);
    let mut out = Vec::new();
    for r in 0..rounds {
        for c in clips {
            if let Some(f) = c.frames.get(r) {
                out.push(f.center_crop(crop, crop)?);
            }
        }
    }
    Ok(out)
}

/// Mean cross-entropy and accuracy of a classifier on center-cropped frames.
pub fn classifier_metrics(
    model: &ResNet<f32>,
    clips: &[LoadedClip],
    label: impl Fn(&ManifestEntry) -> usize,
) -> Result<(f64, f64)> {
    let crop = model.config.crop;
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut count = 0usize;
    for c in clips {
        let frames: Vec<Frame> = c.frames.iter().map(|f| f.center_crop(crop, crop)).collect::<Result<_>>()?;
        let probs = fdc_forward(model, &frames)?;
        let y = label(&c.entry);
        let classes = probs.shape()[1];
        for row in probs.data().chunks(classes) {
            loss -= (row[y] as f64).max(PROB_FLOOR).ln();
            if crate::models::predict_class(row) == y {
                correct += 1;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::precondition("no frames to evaluate"));
    }
    Ok((loss / count as f64, correct as f64 / count as f64))
}

fn train_classifier(
    model: ResNet<f32>,
    data: &Datasets,
    label: impl Fn(&ManifestEntry) -> usize + Copy,
    config: &TrainConfig,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome<ResNet<f32>>> {
    if data.train.is_empty() {
        return Err(Error::precondition("empty training split"));
    }
    let classes = model.config.head.outputs();
    if let Some(c) = data.train.iter().chain(&data.val).find(|c| label(&c.entry) >= classes) {
        return Err(Error::precondition(format!("label of {} exceeds the head", c.entry.clip_path)));
    }
    let crop = model.config.crop;
    let samples: Vec<(usize, usize)> = data
        .train
        .iter()
        .enumerate()
        .flat_map(|(ci, c)| (0..c.frames.len()).map(move |fi| (ci, fi)))
        .collect();
    if samples.len() < 2 {
        return Err(Error::precondition("need at least two training frames"));
    }
    let calibration = calibration_frames(&data.train, crop)?;
    let epoch = |model: &mut ResNet<f32>, adam: &mut Adam<f32>, rng: &mut ChaCha8Rng| {
        let mut order = samples.clone();
        order.shuffle(rng);
        let mut total = 0.0;
        for r in batch_ranges(order.len(), config.batch, 2) {
            let picks = &order[r];
            let frames: Vec<&Frame> = picks.iter().map(|&(c, f)| &data.train[c].frames[f]).collect();
            let labels: Vec<usize> = picks.iter().map(|&(c, _)| label(&data.train[c].entry)).collect();
            let x = frames_to_tensor(&batch_frames(&frames, crop, config.augment, rng)?)?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let mut b = Binding::trainable();
            let logits = model.forward(&mut tape, xv, Mode::Train, &mut b)?;
            let probs = tape.softmax(logits)?;
            let loss = tape.cross_entropy(probs, &labels)?;
            total += tape.value(loss).data()[0] as f64 * picks.len() as f64;
            let mut grads = tape.backward(loss)?;
            let g = collect_grads(&mut grads, &b.vars);
            adam_step(model, adam, &g)?;
            model.commit_batch_stats(&b.bn_stats)?;
        }
        if config.recalibrate_norms {
            model.recalibrate_norms(&calibration, config.batch)?;
        }
        Ok(EpochStats {
            loss: total / order.len() as f64,
            skipped: 0,
        })
    };
    let validate = |m: &ResNet<f32>| -> Result<Validation> {
        if data.val.is_empty() {
            return Ok(Validation { loss: None, accuracy: None });
        }
        let (loss, acc) = classifier_metrics(m, &data.val, label)?;
        Ok(Validation {
            loss: Some(loss),
            accuracy: Some(acc),
        })
    };
    fit(model, config, epoch, validate, progress)
}

/// 20-class joint label of an entry.
pub fn joint_label(e: &ManifestEntry) -> usize {
    encode_label(e.distortion_type, e.severity_level)
}

/// Distortion-type label of an entry.
pub fn type_label(e: &ManifestEntry) -> usize {
    e.distortion_type.index()
}

/// Trains the 20-class classifier from scratch.
pub fn train_fdc(
    data: &Datasets,
    net: &ResNetConfig,
    config: &TrainConfig,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome<ResNet<f32>>> {
    let mut net = net.clone();
    net.head = Head::Classification(NUM_CLASSES);
    let model = ResNet::new(net, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
    train_classifier(model, data, joint_label, config, progress)
}

/// Fine-tunes a 20-class model into a 5-class distortion-type classifier.
pub fn train_fdc5(
    data: &Datasets,
    fdc: &ResNet<f32>,
    config: &TrainConfig,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome<ResNet<f32>>> {
    let model = fine_tune_distortion_only(fdc, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
    train_classifier(model, data, type_label, config, progress)
}

/// Frame-level Pearson loss over all frames of `clips`, each frame
/// targeting its clip's mos.
pub fn frame_pearson_loss(model: &ResNet<f32>, clips: &[LoadedClip]) -> Result<f64> {
    let crop = model.config.crop;
    let mut pred = Vec::new();
    let mut target = Vec::new();
    for c in clips {
        let frames: Vec<Frame> = c.frames.iter().map(|f| f.center_crop(crop, crop)).collect::<Result<_>>()?;
        let mos = c.mos()?;
        pred.extend(fqp_forward(model, &frames)?.into_iter().map(f64::from));
        target.extend(std::iter::repeat_n(mos, frames.len()));
    }
    pearson_loss_value(&pred, &target)
}

fn require_mos(data: &Datasets) -> Result<()> {
    for c in data.train.iter().chain(&data.val) {
        c.mos()?;
    }
    Ok(())
}

fn require_distinct_mos(clips: &[LoadedClip]) -> Result<()> {
    let first = clips.first().map(|c| c.entry.mos);
    if clips.iter().all(|c| Some(c.entry.mos) == first) {
        return Err(Error::degenerate("every training clip has the same mos"));
    }
    Ok(())
}

/// Frame order for one frame-quality epoch: clips shuffled, frames
/// shuffled within each clip, then dealt round-robin so consecutive frames
/// come from different clips.
fn interleaved_frames(data: &[LoadedClip], rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut clips: Vec<usize> = (0..data.len()).collect();
    clips.shuffle(rng);
    let per_clip: Vec<Vec<usize>> = clips
        .iter()
        .map(|&c| {
            let mut f: Vec<usize> = (0..data[c].frames.len()).collect();
            f.shuffle(rng);
            f
        })
        .collect();
    let rounds = per_clip.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for r in 0..rounds {
        for (k, &c) in clips.iter().enumerate() {
            if let Some(&f) = per_clip[k].get(r) {
                out.push((c, f));
            }
        }
    }
    out
}

/// Fine-tunes a regression head on top of the classifier backbone with the
/// frame-level Pearson loss.
pub fn train_fqp(
    data: &Datasets,
    fdc: &ResNet<f32>,
    config: &TrainConfig,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome<ResNet<f32>>> {
    require_mos(data)?;
    if data.train.len() < MIN_CLIP_BATCH {
        return Err(Error::precondition(format!(
            "frame quality training mixes at least {MIN_CLIP_BATCH} clips per batch"
        )));
    }
    require_distinct_mos(&data.train)?;
    let batch = config.batch.max(MIN_FRAME_BATCH);
    let model = fqp_from_fdc(fdc, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
    let crop = model.config.crop;
    let epoch = |model: &mut ResNet<f32>, adam: &mut Adam<f32>, rng: &mut ChaCha8Rng| {
        let order = interleaved_frames(&data.train, rng);
        let mut total = 0.0;
        let mut used = 0usize;
        let mut skipped = 0usize;
        for r in batch_ranges(order.len(), batch, MIN_FRAME_BATCH) {
            let picks = &order[r];
            let target: Vec<f32> = picks
                .iter()
                .map(|&(c, _)| data.train[c].entry.mos.unwrap_or_default() as f32)
                .collect();
            let frames: Vec<&Frame> = picks.iter().map(|&(c, f)| &data.train[c].frames[f]).collect();
            // crops are drawn even for skipped batches so the random stream
            // does not depend on which batches are degenerate
            let x = frames_to_tensor(&batch_frames(&frames, crop, config.augment, rng)?)?;
            if pearson_is_degenerate(&target, &target) {
                skipped += 1;
                continue;
            }
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let mut b = Binding::trainable();
            let s = model.forward(&mut tape, xv, Mode::Train, &mut b)?;
            let loss = tape.pearson_loss(s, &target)?;
            total += tape.value(loss).data()[0] as f64;
            used += 1;
            let mut grads = tape.backward(loss)?;
            let g = collect_grads(&mut grads, &b.vars);
            adam_step(model, adam, &g)?;
            model.commit_batch_stats(&b.bn_stats)?;
        }
        if used == 0 {
            return Err(Error::degenerate("every frame batch in the epoch had a single mos"));
        }
        Ok(EpochStats {
            loss: total / used as f64,
            skipped,
        })
    };
    let validate = |m: &ResNet<f32>| -> Result<Validation> {
        let loss = if data.val.len() >= 2 {
            Some(frame_pearson_loss(m, &data.val)?)
        } else {
            None
        };
        Ok(Validation { loss, accuracy: None })
    };
    fit(model, config, epoch, validate, progress)
}

/// Eval-mode frame scores of each clip's center-cropped frames.
pub fn clip_frame_scores(model: &ResNet<f32>, clips: &[LoadedClip]) -> Result<Vec<Vec<f32>>> {
    let crop = model.config.crop;
    clips
        .iter()
        .map(|c| {
            let frames: Vec<Frame> = c.frames.iter().map(|f| f.center_crop(crop, crop)).collect::<Result<_>>()?;
            fqp_forward(model, &frames)
        })
        .collect()
}

/// Aggregator for a video network trained on `fqp`: input normalization
/// from the frame scores of the training clips and weights drawn from the
/// run seed.
pub fn init_aggregator(
    train_scores: &[Vec<f32>],
    agg: &AggregatorConfig,
    seed: u64,
) -> Result<FcnnAggregator<f32>> {
    let all: Vec<f64> = train_scores.iter().flatten().map(|&v| v as f64).collect();
    if all.is_empty() {
        return Err(Error::precondition("no frame scores to normalize"));
    }
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let std = (all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let mut config = agg.clone();
    config.input_shift = mean;
    config.input_scale = if std > 1e-12 { std } else { 1.0 };
    FcnnAggregator::new(config, &mut ChaCha8Rng::seed_from_u64(config_seed(seed)))
}

fn config_seed(seed: u64) -> u64 {
    seed ^ AGGREGATOR_SEED_SALT
}

fn check_vqp_inputs(data: &Datasets, agg: &AggregatorConfig, config: &TrainConfig) -> Result<()> {
    require_mos(data)?;
    if data.train.len() < MIN_CLIP_BATCH {
        return Err(Error::precondition(format!(
            "video training needs at least {MIN_CLIP_BATCH} training clips"
        )));
    }
    require_distinct_mos(&data.train)?;
    if let Some(c) = data.train.iter().chain(&data.val).find(|c| c.frames.len() != agg.nf) {
        return Err(Error::shape(format!(
            "clip {} has {} frames, the aggregator expects {}",
            c.entry.clip_path,
            c.frames.len(),
            agg.nf
        )));
    }
    if config.batch < MIN_CLIP_BATCH {
        return Err(Error::precondition(format!("video batches need at least {MIN_CLIP_BATCH} clips")));
    }
    Ok(())
}

fn video_val_loss(net: &VqpNet, scores: &[Vec<f32>], clips: &[LoadedClip]) -> Result<Option<f64>> {
    if clips.len() < 2 {
        return Ok(None);
    }
    let pred: Vec<f64> = net.aggregator.aggregate_batch(scores)?.into_iter().map(f64::from).collect();
    let mos: Vec<f64> = clips.iter().map(|c| c.mos()).collect::<Result<_>>()?;
    Ok(Some(pearson_loss_value(&pred, &mos)?))
}

/// Trains the aggregator on frozen frame scores.
pub fn train_vqp_transfer(
    data: &Datasets,
    fqp: &ResNet<f32>,
    agg: &AggregatorConfig,
    config: &TrainConfig,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome<VqpNet>> {
    check_vqp_inputs(data, agg, config)?;
    let train_scores = clip_frame_scores(fqp, &data.train)?;
    let val_scores = clip_frame_scores(fqp, &data.val)?;
    let aggregator = init_aggregator(&train_scores, agg, config.seed)?;
    let net = VqpNet::new(fqp.clone(), aggregator, VqpMode::Transfer)?;
    let mos: Vec<f32> = data.train.iter().map(|c| c.entry.mos.unwrap_or_default() as f32).collect();
    let epoch = |net: &mut VqpNet, adam: &mut Adam<f32>, rng: &mut ChaCha8Rng| {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(rng);
        let (mut total, mut used, mut skipped) = (0.0, 0usize, 0usize);
        for r in batch_ranges(order.len(), config.batch, MIN_CLIP_BATCH) {
            let picks = &order[r];
            let target: Vec<f32> = picks.iter().map(|&i| mos[i]).collect();
            if pearson_is_degenerate(&target, &target) {
                skipped += 1;
                continue;
            }
            let rows: Vec<f32> = picks.iter().flat_map(|&i| train_scores[i].iter().copied()).collect();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(&[picks.len(), agg.nf], rows)?);
            let mut b = Binding::trainable();
            let v = net.aggregator.forward(&mut tape, x, &mut b)?;
            let loss = tape.pearson_loss(v, &target)?;
            total += tape.value(loss).data()[0] as f64;
            used += 1;
            let mut grads = tape.backward(loss)?;
            let g = collect_grads(&mut grads, &b.vars);
            adam_step(&mut net.aggregator, adam, &g)?;
        }
        if used == 0 {
            return Err(Error::degenerate("every clip batch in the epoch had a single mos"));
        }
        Ok(EpochStats {
            loss: total / used as f64,
            skipped,
        })
    };
    let validate = |net: &VqpNet| -> Result<Validation> {
        Ok(Validation {
            loss: video_val_loss(net, &val_scores, &data.val)?,
            accuracy: None,
        })
    };
    fit(net, config, epoch, validate, progress)
}

/// Trains the frame model and the aggregator jointly under the video-level
/// Pearson loss. The aggregator starts exactly where the transfer run with
/// the same seed starts.
pub fn train_vqp_e2e(
    data: &Datasets,
    fqp: &ResNet<f32>,
    agg: &AggregatorConfig,
    config: &TrainConfig,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome<VqpNet>> {
    check_vqp_inputs(data, agg, config)?;
    let train_scores = clip_frame_scores(fqp, &data.train)?;
    let aggregator = init_aggregator(&train_scores, agg, config.seed)?;
    let net = VqpNet::new(fqp.clone(), aggregator, VqpMode::EndToEnd)?;
    train_vqp_joint(net, data, config, progress)
}

/// Joint training from an existing video network.
pub fn train_vqp_joint(
    net: VqpNet,
    data: &Datasets,
    config: &TrainConfig,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome<VqpNet>> {
    check_vqp_inputs(data, &net.aggregator.config, config)?;
    let crop = net.frame.config.crop;
    let train_frames = center_crops(&data.train, crop)?;
    let mos: Vec<f32> = data.train.iter().map(|c| c.entry.mos.unwrap_or_default() as f32).collect();
    let epoch = |net: &mut VqpNet, adam: &mut Adam<f32>, rng: &mut ChaCha8Rng| {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(rng);
        let (mut total, mut used, mut skipped) = (0.0, 0usize, 0usize);
        for r in batch_ranges(order.len(), config.batch, MIN_CLIP_BATCH) {
            let picks = &order[r];
            let target: Vec<f32> = picks.iter().map(|&i| mos[i]).collect();
            if pearson_is_degenerate(&target, &target) {
                skipped += 1;
                continue;
            }
            let (loss, grads) = joint_gradients(net, picks, &train_frames, &target)?;
            total += loss;
            used += 1;
            let mut params = net.params_mut();
            adam.step(&mut params, &grads)?;
        }
        if used == 0 {
            return Err(Error::degenerate("every clip batch in the epoch had a single mos"));
        }
        Ok(EpochStats {
            loss: total / used as f64,
            skipped,
        })
    };
    let validate = |net: &VqpNet| -> Result<Validation> {
        let scores = clip_frame_scores(&net.frame, &data.val)?;
        Ok(Validation {
            loss: video_val_loss(net, &scores, &data.val)?,
            accuracy: None,
        })
    };
    let mut out = fit(net, config, epoch, validate, progress)?;
    out.model.mode = VqpMode::EndToEnd;
    Ok(out)
}

/// Loss and gradients (frame parameters, then aggregator parameters) of
/// one clip batch. The frame model runs on fixed normalization statistics,
/// so frames are independent and are pushed through in chunks: scores
/// first, then each chunk again with its slice of the score gradient.
fn joint_gradients(
    net: &VqpNet,
    picks: &[usize],
    frames: &[Vec<Frame>],
    target: &[f32],
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let nf = net.nf();
    let batch_frames: Vec<Frame> = picks.iter().flat_map(|&i| frames[i].iter().cloned()).collect();
    let scores = fqp_forward(&net.frame, &batch_frames)?;

    let mut tape = Tape::new();
    let s = tape.leaf(Tensor::new(&[picks.len(), nf], scores)?);
    let mut agg_binding = Binding::trainable();
    let v = net.aggregator.forward(&mut tape, s, &mut agg_binding)?;
    let loss = tape.pearson_loss(v, target)?;
    let loss_value = tape.value(loss).data()[0] as f64;
    let mut grads = tape.backward(loss)?;
    let agg_grads = collect_grads(&mut grads, &agg_binding.vars);
    let ds = grads.take(s).into_data();

    let mut frame_grads: Vec<Tensor<f32>> = net.frame.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    for (k, chunk) in batch_frames.chunks(E2E_CHUNK).enumerate() {
        let seed = &ds[k * E2E_CHUNK..k * E2E_CHUNK + chunk.len()];
        let mut tape = Tape::new();
        let x = tape.constant(frames_to_tensor(chunk)?);
        let mut b = Binding::trainable();
        let out = net.frame.forward(&mut tape, x, Mode::Eval, &mut b)?;
        let mut g = tape.backward_with_seed(out, Tensor::new(&[chunk.len(), 1], seed.to_vec())?)?;
        for (acc, var) in frame_grads.iter_mut().zip(&b.vars) {
            acc.add_assign(&g.take(*var));
        }
    }
    frame_grads.extend(agg_grads);
    Ok((loss_value, frame_grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_tail_merges() {
        assert_eq!(batch_ranges(10, 4, 3), vec![0..4, 4..10]);
        assert_eq!(batch_ranges(11, 4, 3), vec![0..4, 4..8, 8..11]);
        assert_eq!(batch_ranges(3, 4, 2), vec![0..3]);
        assert_eq!(batch_ranges(33, 32, 2), vec![0..33]);
    }

    #[test]
    fn validation_split_is_per_content() {
        let entries: Vec<ManifestEntry> = (0..30)
            .map(|i| ManifestEntry {
                clip_path: format!("c{i}"),
                reference_id: format!("r{}", i % 3),
                distortion_type: crate::distort::DistortionType::Noise,
                severity_level: crate::distort::SeverityLevel::HardlyVisible,
                mos: None,
                split: Split::Train,
            })
            .collect();
        let (tr, va) = validation_split(&entries, 0.2, 4);
        assert_eq!(tr.len() + va.len(), 30);
        assert_eq!(va.len(), 6);
        for r in 0..3 {
            assert_eq!(va.iter().filter(|&&i| i % 3 == r).count(), 2);
        }
        assert_eq!(validation_split(&entries, 0.2, 4), (tr, va));
        assert!(validation_split(&entries, 0.0, 4).1.is_empty());
    }

    #[test]
    fn chunked_joint_gradient_matches_single_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = ResNetConfig {
            stem_channels: 4,
            stage_channels: vec![4, 8],
            blocks_per_stage: 1,
            crop: 8,
            head: Head::Classification(NUM_CLASSES),
        };
        let fdc = ResNet::<f32>::new(cfg, &mut rng).unwrap();
        let fqp = fqp_from_fdc(&fdc, &mut rng).unwrap();
        let nf = 10;
        let agg = FcnnAggregator::new(
            AggregatorConfig {
                nf,
                hidden: vec![6, 4],
                ..AggregatorConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        let net = VqpNet::new(fqp, agg, VqpMode::EndToEnd).unwrap();
        // 4 clips of 10 frames span two chunks
        let frames: Vec<Vec<Frame>> = (0..4)
            .map(|_| {
                (0..nf)
                    .map(|_| {
                        let data = (0..3 * 64).map(|_| rand::Rng::random::<f32>(&mut rng)).collect();
                        Frame::new(8, 8, data).unwrap()
                    })
                    .collect()
            })
            .collect();
        let picks = [2, 0, 3, 1];
        let target = [30.0f32, 55.0, 80.0, 41.0];
        let (loss, chunked) = joint_gradients(&net, &picks, &frames, &target).unwrap();

        let all: Vec<Frame> = picks.iter().flat_map(|&i| frames[i].iter().cloned()).collect();
        let mut tape = Tape::new();
        let x = tape.constant(frames_to_tensor(&all).unwrap());
        let (mut fb, mut ab) = (Binding::trainable(), Binding::trainable());
        let (_, v) = net.forward(&mut tape, x, &mut fb, &mut ab).unwrap();
        let l = tape.pearson_loss(v, &target).unwrap();
        assert!((tape.value(l).data()[0] as f64 - loss).abs() < 1e-5);
        let mut grads = tape.backward(l).unwrap();
        let mut direct = collect_grads(&mut grads, &fb.vars);
        direct.extend(collect_grads(&mut grads, &ab.vars));
        assert_eq!(direct.len(), chunked.len());
        assert_eq!(direct.len(), net.params().len());
        for (a, b) in chunked.iter().zip(&direct) {
            assert_eq!(a.shape(), b.shape());
            let scale = b.data().iter().fold(1e-6f32, |m, v| m.max(v.abs()));
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-4 * scale, "{x} vs {y}");
            }
        }
    }
}
