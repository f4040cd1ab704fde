use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use scopeqa::distort::{synthesize_dataset, DistortionParams};
use scopeqa::eval::{confusion_matrix, evaluate_quality, loss_curves_svg, rows_csv, scatter_svg, LossCurve};
use scopeqa::media::{
    load_clip, make_split, synthetic_reference, write_clip, DatasetManifest, Frame, FrameFormat, SceneSpec, Split,
    SplitGranularity, SplitSpec,
};
use scopeqa::models::{
    class_list, class_name, clip_input, collapse_class, fdc_forward, fqp_forward, predict_class, Checkpoint, ResNet,
    ResNetConfig, SavedModel, TrainMeta, NUM_CLASSES, NUM_TYPES,
};
use scopeqa::pooling::{pool_conventional, AggregatorConfig};
use scopeqa::train::{
    assign_pseudo_mos, load_clips, prepare_training_data, train_fdc, train_fdc5, train_fqp, train_vqp_e2e,
    train_vqp_transfer, EpochLog, LoadedClip, PseudoMosSpec, TrainConfig, TrainReport,
};
use scopeqa::{Error, Result};

use crate::{
    EvaluateArgs, FrameFormatArg, GlobalOpts, OracleArgs, PoolingArg, PredictArgs, RefsArgs, ReportFormat, SynthArgs,
    Task, TrainArgs,
};

pub const CHECKPOINT_FILE: &str = "model.sqa";
pub const LOG_FILE: &str = "train_log.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

fn frame_format(f: FrameFormatArg) -> FrameFormat {
    match f {
        FrameFormatArg::Png => FrameFormat::Png,
        FrameFormatArg::Ppm => FrameFormat::Ppm,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value"));
}

pub fn refs(g: &GlobalOpts, a: RefsArgs) -> Result<()> {
    if a.count == 0 {
        return Err(Error::precondition("--count must be at least 1"));
    }
    create_dir(&a.out)?;
    let mut ids = Vec::new();
    for i in 0..a.count {
        let id = format!("ref{i}");
        let seed = g.seed.wrapping_add(i as u64);
        let clip = synthetic_reference(&SceneSpec::new(&id, a.width, a.height, a.frames, seed))?;
        write_clip(&clip, a.out.join(&id), frame_format(a.frame_format))?;
        eprintln!("wrote {id}");
        ids.push(id);
    }
    print_json(&json!({ "refs": ids, "dir": a.out }));
    Ok(())
}

fn clip_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for e in rd {
        let e = e.map_err(|err| Error::io(dir, err))?;
        if e.path().is_dir() {
            out.push(e.path());
        }
    }
    out.sort();
    Ok(out)
}

pub fn synth(g: &GlobalOpts, a: SynthArgs) -> Result<()> {
    let dirs = clip_dirs(&a.refs)?;
    if dirs.is_empty() {
        return Err(Error::precondition(format!("{} holds no reference clips", a.refs.display())));
    }
    let mut params = match &a.params {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<DistortionParams>(&text).map_err(|e| Error::format(format!("{}: {e}", p.display())))?
        }
        None => DistortionParams::default(),
    };
    params.seed = g.seed;
    let refs = dirs
        .iter()
        .map(|d| load_clip(d, None))
        .collect::<Result<Vec<_>>>()?;
    eprintln!("synthesizing {} clips from {} references", refs.len() * 20, refs.len());
    let manifest = synthesize_dataset(&refs, &a.out, &params, frame_format(a.frame_format))?;
    let split = SplitSpec {
        train_fraction: a.train_fraction,
        granularity: if a.content_split {
            SplitGranularity::ContentDisjoint
        } else {
            SplitGranularity::PerClip
        },
        seed: g.seed,
    };
    let mut manifest = make_split(&manifest, &split)?;
    if a.pseudo_mos {
        manifest = assign_pseudo_mos(&manifest, &PseudoMosSpec::default(), g.seed)?;
    }
    let path = a.out.join(MANIFEST_FILE);
    manifest.save(&path)?;
    print_json(&json!({
        "manifest": path,
        "clips": manifest.entries.len(),
        "train": manifest.split_entries(Split::Train).count(),
        "test": manifest.split_entries(Split::Test).count(),
    }));
    Ok(())
}

fn load_manifest(path: &Path, pseudo_mos: bool, seed: u64) -> Result<DatasetManifest> {
    let m = DatasetManifest::load(path)?;
    if pseudo_mos && !m.has_mos() {
        return assign_pseudo_mos(&m, &PseudoMosSpec::default(), seed);
    }
    Ok(m)
}

fn load_init(task: Task, init: &Option<PathBuf>, want: &str) -> Result<Checkpoint> {
    let Some(path) = init else {
        return Err(Error::precondition(format!(
            "{} needs --init with a trained {want} checkpoint",
            task.name()
        )));
    };
    let ck = Checkpoint::load(path)?;
    if ck.model.kind() != want {
        return Err(Error::precondition(format!(
            "{} needs a {want} checkpoint, {} holds {}",
            task.name(),
            path.display(),
            ck.model.kind()
        )));
    }
    Ok(ck)
}

fn frame_model(ck: Checkpoint) -> ResNet<f32> {
    match ck.model {
        SavedModel::Fdc(m) | SavedModel::Fdc5(m) | SavedModel::Fqp(m) => m,
        SavedModel::Vqp(v) => v.frame,
        SavedModel::Oracle => unreachable!("kind checked by load_init"),
    }
}

pub fn train(g: &GlobalOpts, a: TrainArgs) -> Result<()> {
    let needs_mos = matches!(a.task, Task::Fqp | Task::VqpTl | Task::VqpE2e);
    // prerequisites are checked before any data is touched
    let init = match a.task {
        Task::Fdc => None,
        Task::Fdc5 | Task::Fqp => Some(load_init(a.task, &a.init, "fdc")?),
        Task::VqpTl | Task::VqpE2e => Some(load_init(a.task, &a.init, "fqp")?),
    };
    let manifest = load_manifest(&a.manifest, a.pseudo_mos && needs_mos, g.seed)?;
    let mut config = match a.task {
        Task::Fdc | Task::Fdc5 => TrainConfig::fdc(),
        Task::Fqp => TrainConfig::fqp(),
        Task::VqpTl | Task::VqpE2e => TrainConfig::vqp(),
    };
    config.seed = g.seed;
    config.frames_per_clip = a.nf;
    if let Some(v) = a.epochs {
        config.epochs = v;
    }
    if let Some(v) = a.lr {
        config.lr = v;
    }
    if let Some(v) = a.batch {
        config.batch = v;
    }
    if let Some(v) = a.val_fraction {
        config.val_fraction = v;
    }
    if a.no_augment {
        config.augment = false;
    }
    let data = prepare_training_data(&manifest, &config)?;
    eprintln!(
        "{}: {} training clips, {} validation clips",
        a.task.name(),
        data.train.len(),
        data.val.len()
    );
    let mut progress = |l: &EpochLog| {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.5}")).unwrap_or_else(|| "-".into());
        eprintln!(
            "epoch {:>3}  lr {:.2e}  train {:.5}  val {}  acc {}",
            l.epoch,
            l.lr,
            l.train_loss,
            opt(l.val_loss),
            opt(l.accuracy)
        );
    };
    let (model, report): (SavedModel, TrainReport) = match a.task {
        Task::Fdc => {
            let net = ResNetConfig {
                stem_channels: a.channels,
                stage_channels: vec![a.channels, 2 * a.channels, 4 * a.channels],
                blocks_per_stage: a.blocks,
                crop: a.crop,
                ..ResNetConfig::default()
            };
            let out = train_fdc(&data, &net, &config, &mut progress)?;
            (SavedModel::Fdc(out.model), out.report)
        }
        Task::Fdc5 => {
            let fdc = frame_model(init.expect("checked"));
            let out = train_fdc5(&data, &fdc, &config, &mut progress)?;
            (SavedModel::Fdc5(out.model), out.report)
        }
        Task::Fqp => {
            let fdc = frame_model(init.expect("checked"));
            let out = train_fqp(&data, &fdc, &config, &mut progress)?;
            (SavedModel::Fqp(out.model), out.report)
        }
        Task::VqpTl | Task::VqpE2e => {
            let fqp = frame_model(init.expect("checked"));
            let agg = AggregatorConfig {
                nf: a.nf,
                ..AggregatorConfig::default()
            };
            let out = if a.task == Task::VqpTl {
                train_vqp_transfer(&data, &fqp, &agg, &config, &mut progress)?
            } else {
                train_vqp_e2e(&data, &fqp, &agg, &config, &mut progress)?
            };
            (SavedModel::Vqp(out.model), out.report)
        }
    };

    create_dir(&a.out)?;
    let last = report.final_log();
    let mut meta = TrainMeta {
        epoch: report.best_epoch,
        lr: last.map_or(config.lr, |l| l.lr),
        loss: last.map_or(f64::NAN, |l| l.train_loss),
        seed: g.seed,
        ..TrainMeta::default()
    };
    meta.extra.insert("task".into(), json!(a.task.name()));
    meta.extra.insert("epochs".into(), json!(config.epochs));
    meta.extra.insert("skipped_batches".into(), json!(report.skipped_batches));
    if let Some(v) = last.and_then(|l| l.val_loss) {
        meta.extra.insert("val_loss".into(), json!(v));
    }
    let ck_path = a.out.join(CHECKPOINT_FILE);
    Checkpoint::new(model, meta).save(&ck_path)?;
    let log_path = a.out.join(LOG_FILE);
    report.write_csv(&log_path)?;
    let curve = report.val_curve();
    if !curve.is_empty() {
        let svg = loss_curves_svg(
            &[LossCurve {
                label: format!("{} validation", a.task.name()),
                values: curve,
            }],
            "Validation loss",
        );
        write(&a.out.join("loss_curve.svg"), &svg)?;
    }
    print_json(&json!({
        "task": a.task.name(),
        "checkpoint": ck_path,
        "log": log_path,
        "best_epoch": report.best_epoch,
        "final_val_loss": last.and_then(|l| l.val_loss),
        "skipped_batches": report.skipped_batches,
    }));
    Ok(())
}

fn pool_frames(scores: &[f32], mode: scopeqa::pooling::PoolingMode) -> Result<f64> {
    let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
    pool_conventional(&s, mode)
}

/// Scores one clip's prepared frames with a quality checkpoint.
fn score_clip(model: &SavedModel, frames: &[Frame], pooling: Option<PoolingArg>) -> Result<(Vec<f32>, f64)> {
    match model {
        SavedModel::Fqp(m) => {
            let scores = fqp_forward(m, frames)?;
            let mode = pooling.unwrap_or(PoolingArg::Arith).conventional().ok_or_else(|| {
                Error::precondition("fcnn pooling needs a video network checkpoint")
            })?;
            let v = pool_frames(&scores, mode)?;
            Ok((scores, v))
        }
        SavedModel::Vqp(v) => match pooling.unwrap_or(PoolingArg::Fcnn).conventional() {
            None => {
                let (scores, video) = v.predict(frames)?;
                Ok((scores, video as f64))
            }
            Some(mode) => {
                let scores = fqp_forward(&v.frame, frames)?;
                let video = pool_frames(&scores, mode)?;
                Ok((scores, video))
            }
        },
        _ => Err(Error::precondition(format!("{} checkpoint does not predict quality", model.kind()))),
    }
}

fn crop_of(model: &SavedModel) -> Option<usize> {
    match model {
        SavedModel::Fdc(m) | SavedModel::Fdc5(m) | SavedModel::Fqp(m) => Some(m.config.crop),
        SavedModel::Vqp(v) => Some(v.frame.config.crop),
        SavedModel::Oracle => None,
    }
}

/// Mean class probabilities over frames, then argmax.
fn classify(model: &ResNet<f32>, frames: &[Frame]) -> Result<(usize, Vec<f64>)> {
    let probs = fdc_forward(model, frames)?;
    let c = probs.shape()[1];
    let mut mean = vec![0.0f64; c];
    for row in probs.data().chunks(c) {
        for (m, &p) in mean.iter_mut().zip(row) {
            *m += p as f64 / frames.len() as f64;
        }
    }
    Ok((predict_class(&mean), mean))
}

fn type_name(t: usize) -> String {
    class_list()[4 * t].0.code().to_owned()
}

pub fn predict(_g: &GlobalOpts, a: PredictArgs) -> Result<()> {
    let checkpoints = a
        .checkpoints
        .iter()
        .map(Checkpoint::load)
        .collect::<Result<Vec<_>>>()?;
    let clip = load_clip(&a.clip, None)?;
    let mut out = json!({
        "clip": a.clip,
        "class": Value::Null,
        "class_name": Value::Null,
        "frame_scores": Value::Null,
        "video_score": Value::Null,
    });
    for ck in &checkpoints {
        let Some(crop) = crop_of(&ck.model) else {
            return Err(Error::precondition("the oracle checkpoint scores manifests, not clips"));
        };
        let nf = match &ck.model {
            SavedModel::Vqp(v) => v.nf(),
            _ => a.nf,
        };
        let frames = clip_input(&clip, nf, crop)?;
        match &ck.model {
            SavedModel::Fdc(m) => {
                let (c, _) = classify(m, &frames)?;
                out["class"] = json!(c);
                out["class_name"] = json!(class_name(c));
            }
            SavedModel::Fdc5(m) => {
                let (c, _) = classify(m, &frames)?;
                out["class"] = json!(c);
                out["class_name"] = json!(type_name(c));
            }
            model => {
                let (scores, video) = score_clip(model, &frames, a.pooling)?;
                out["frame_scores"] = json!(scores);
                out["video_score"] = json!(video);
            }
        }
    }
    print_json(&out);
    Ok(())
}

fn test_clips(manifest: &DatasetManifest, nf: usize) -> Result<Vec<LoadedClip>> {
    let entries: Vec<_> = manifest.split_entries(Split::Test).cloned().collect();
    if entries.is_empty() {
        return Err(Error::precondition("the manifest has no test clips"));
    }
    load_clips(manifest, &entries, nf)
}

fn cropped(c: &LoadedClip, crop: usize) -> Result<Vec<Frame>> {
    c.frames.iter().map(|f| f.center_crop(crop, crop)).collect()
}

pub fn evaluate(g: &GlobalOpts, a: EvaluateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let manifest = load_manifest(&a.manifest, a.pseudo_mos, g.seed)?;
    create_dir(&a.out)?;
    let wants = |f: ReportFormat| a.format.contains(&f);

    if let SavedModel::Fdc(m) | SavedModel::Fdc5(m) = &ck.model {
        let five = matches!(ck.model, SavedModel::Fdc5(_));
        let clips = test_clips(&manifest, a.nf)?;
        let (mut pred, mut truth) = (Vec::new(), Vec::new());
        for c in &clips {
            let probs = fdc_forward(m, &cropped(c, m.config.crop)?)?;
            let y = scopeqa::models::encode_label(c.entry.distortion_type, c.entry.severity_level);
            let y = if five { collapse_class(y) } else { y };
            for row in probs.data().chunks(probs.shape()[1]) {
                pred.push(predict_class(row));
                truth.push(y);
            }
        }
        let classes = if five { NUM_TYPES } else { NUM_CLASSES };
        let cm = confusion_matrix(&pred, &truth, classes)?;
        let names: Vec<String> = if five {
            (0..NUM_TYPES).map(type_name).collect()
        } else {
            (0..NUM_CLASSES).map(|c| class_name(c).expect("valid class")).collect()
        };
        let report = json!({
            "kind": ck.model.kind(),
            "frames": pred.len(),
            "clips": clips.len(),
            "accuracy": cm.accuracy,
            "classes": names,
            "confusion": cm.counts,
        });
        if wants(ReportFormat::Json) {
            write(&a.out.join("report.json"), &serde_json::to_string_pretty(&report).expect("json"))?;
        }
        if wants(ReportFormat::Csv) {
            write(&a.out.join("confusion.csv"), &cm.to_csv(&names))?;
        }
        print_json(&json!({ "kind": ck.model.kind(), "accuracy": cm.accuracy, "frames": pred.len() }));
        return Ok(());
    }

    let entries: Vec<_> = manifest.split_entries(Split::Test).cloned().collect();
    if entries.is_empty() {
        return Err(Error::precondition("the manifest has no test clips"));
    }
    let mos: Vec<f64> = entries
        .iter()
        .map(|e| {
            e.mos.ok_or_else(|| {
                Error::precondition(format!("test clip {} has no mos (try --pseudo-mos)", e.clip_path))
            })
        })
        .collect::<Result<_>>()?;
    let names: Vec<String> = entries.iter().map(|e| e.clip_path.clone()).collect();
    let scores: Vec<f64> = match &ck.model {
        SavedModel::Oracle => mos.clone(),
        model => {
            let crop = crop_of(model).expect("network checkpoint");
            let nf = match model {
                SavedModel::Vqp(v) => v.nf(),
                _ => a.nf,
            };
            let clips = load_clips(&manifest, &entries, nf)?;
            clips
                .iter()
                .map(|c| score_clip(model, &cropped(c, crop)?, a.pooling).map(|(_, v)| v))
                .collect::<Result<_>>()?
        }
    };
    let report = evaluate_quality(&names, &scores, &mos)?;
    if wants(ReportFormat::Json) {
        write(&a.out.join("report.json"), &report.to_json())?;
    }
    if wants(ReportFormat::Csv) {
        write(&a.out.join("clips.csv"), &rows_csv(&report.clips))?;
    }
    if wants(ReportFormat::Svg) {
        let title = format!("{} on {} test clips", ck.model.kind(), names.len());
        write(&a.out.join("scatter.svg"), &scatter_svg(&report.clips, &title))?;
    }
    print_json(&json!({
        "kind": ck.model.kind(),
        "clips": names.len(),
        "plcc": report.plcc,
        "srocc": report.srocc,
        "krocc": report.krocc,
        "logistic_converged": report.logistic_converged,
    }));
    Ok(())
}

pub fn oracle(a: OracleArgs) -> Result<()> {
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    Checkpoint::new(SavedModel::Oracle, TrainMeta::default()).save(&a.out)?;
    print_json(&json!({ "checkpoint": a.out }));
    Ok(())
}
