use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scopeqa::distort::{DistortionType, SeverityLevel};
use scopeqa::media::{synthetic_reference, Frame, ManifestEntry, SceneSpec, Split};
use scopeqa::models::{
    fdc_forward, fqp_from_fdc, Checkpoint, Head, ResNet, ResNetConfig, SavedModel, TrainMeta, VqpMode, VqpNet,
};
use scopeqa::nn::{Module, TensorKind};
use scopeqa::pooling::{AggregatorConfig, FcnnAggregator};
use scopeqa::train::{train_vqp_e2e, train_vqp_transfer, Datasets, LoadedClip, TrainConfig};

const SIDE: usize = 16;
const NF: usize = 3;

fn tiny_config(head: Head) -> ResNetConfig {
    ResNetConfig {
        stem_channels: 4,
        stage_channels: vec![4, 8],
        blocks_per_stage: 1,
        crop: SIDE,
        head,
    }
}

fn random_frames(n: usize, rng: &mut ChaCha8Rng) -> Vec<Frame> {
    (0..n)
        .map(|_| {
            let data = (0..3 * SIDE * SIDE).map(|_| rng.random::<f32>()).collect();
            Frame::new(SIDE, SIDE, data).unwrap()
        })
        .collect()
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn params_of<M: Module<f32>>(m: &M) -> Vec<(String, Vec<u32>)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, t, kind| {
        if kind == TensorKind::Param {
            out.push((name, bits(t.data())));
        }
    });
    out
}

fn vqp_net(rng: &mut ChaCha8Rng) -> VqpNet {
    let fdc = ResNet::<f32>::new(tiny_config(Head::Classification(20)), rng).unwrap();
    let fqp = fqp_from_fdc(&fdc, rng).unwrap();
    let agg = FcnnAggregator::new(
        AggregatorConfig {
            nf: NF,
            hidden: vec![5, 3],
            ..AggregatorConfig::default()
        },
        rng,
    )
    .unwrap();
    VqpNet::new(fqp, agg, VqpMode::EndToEnd).unwrap()
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let fdc = ResNet::<f32>::new(tiny_config(Head::Classification(20)), &mut rng).unwrap();
    let vqp = vqp_net(&mut rng);
    let meta = TrainMeta {
        epoch: 3,
        lr: 1e-3,
        loss: 0.25,
        seed: 9,
        ..TrainMeta::default()
    };
    let dir = tempfile::tempdir().unwrap();
    for (i, model) in [SavedModel::Fdc(fdc), SavedModel::Vqp(vqp)].into_iter().enumerate() {
        let ck = Checkpoint::new(model, meta.clone());
        let path = dir.path().join(format!("m{i}.sqa"));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
        for _ in 0..100 {
            match (&ck.model, &back.model) {
                (SavedModel::Fdc(a), SavedModel::Fdc(b)) => {
                    let x = random_frames(2, &mut rng);
                    let pa = fdc_forward(a, &x).unwrap();
                    let pb = fdc_forward(b, &x).unwrap();
                    assert_eq!(bits(pa.data()), bits(pb.data()));
                }
                (SavedModel::Vqp(a), SavedModel::Vqp(b)) => {
                    let x = random_frames(NF, &mut rng);
                    let (sa, va) = a.predict(&x).unwrap();
                    let (sb, vb) = b.predict(&x).unwrap();
                    assert_eq!(bits(&sa), bits(&sb));
                    assert_eq!(va.to_bits(), vb.to_bits());
                }
                _ => unreachable!(),
            }
        }
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ck = Checkpoint::new(SavedModel::Vqp(vqp_net(&mut rng)), TrainMeta::default());
    let bytes = ck.to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(Checkpoint::from_bytes(&bad).is_err());
    assert!(Checkpoint::from_bytes(&[]).is_err());
}

fn toy_data(clips: usize) -> Datasets {
    let make = |i: usize| {
        let clip = synthetic_reference(&SceneSpec::new(format!("r{i}"), SIDE, SIDE, NF, i as u64)).unwrap();
        LoadedClip {
            entry: ManifestEntry {
                clip_path: format!("c{i}"),
                reference_id: format!("r{}", i % 2),
                distortion_type: DistortionType::ALL[i % 5],
                severity_level: SeverityLevel::ALL[i % 4],
                mos: Some(20.0 + 7.5 * i as f64),
                split: Split::Train,
            },
            frames: clip.into_frames(),
        }
    };
    Datasets {
        train: (0..clips).map(make).collect(),
        val: (clips..clips + 2).map(make).collect(),
    }
}

#[test]
fn transfer_freezes_frame_model_and_joint_training_moves_both() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let fdc = ResNet::<f32>::new(tiny_config(Head::Classification(20)), &mut rng).unwrap();
    let fqp = fqp_from_fdc(&fdc, &mut rng).unwrap();
    let data = toy_data(6);
    let agg = AggregatorConfig {
        nf: NF,
        hidden: vec![5, 3],
        ..AggregatorConfig::default()
    };
    // one batch per epoch, so one optimizer step
    let config = TrainConfig {
        epochs: 1,
        batch: 6,
        lr: 1e-3,
        ..TrainConfig::vqp()
    };
    let before = params_of(&fqp);
    let tl = train_vqp_transfer(&data, &fqp, &agg, &config, &mut |_| {}).unwrap().model;
    let e2e = train_vqp_e2e(&data, &fqp, &agg, &config, &mut |_| {}).unwrap().model;
    assert_eq!(params_of(&tl.frame), before);
    assert_eq!(params_of(&fqp), before);

    let moved = |a: &[(String, Vec<u32>)], b: &[(String, Vec<u32>)]| a.iter().zip(b).filter(|(x, y)| x != y).count();
    assert!(moved(&params_of(&e2e.frame), &before) > 0);
    let init = scopeqa::train::init_aggregator(
        &scopeqa::train::clip_frame_scores(&fqp, &data.train).unwrap(),
        &agg,
        config.seed,
    )
    .unwrap();
    assert!(moved(&params_of(&e2e.aggregator), &params_of(&init)) > 0);
    assert!(moved(&params_of(&tl.aggregator), &params_of(&init)) > 0);
}
