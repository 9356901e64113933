mod common;

use common::rng;
use epan::data::{blur_with_kernel, make_linear_kernel, random_scene};
use epan::edge::CannyParams;
use epan::tensor::{Adam, AdamParams};
use epan::train::{
    append_jsonl, augment, epoch_rng, lr_at, train_epoch, train_epoch_with_lr, Augmentation, EpochStats, TrainConfig,
    TrainSample, Trainer,
};
use epan::{Error, Image, ModelConfig, Network, Variant};
use rand::Rng;

/// `1e-3 · (1e-3)^(0.5^0.3)`, evaluated independently of this crate.
const LR_AT_750: f64 = 3.657992501904346e-6;

fn tiny_model(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        levels: 2,
        cdn_base_channels: 4,
        convs_per_level: 1,
        ..Default::default()
    }
}

fn tiny_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        crop_h: 16,
        crop_w: 16,
        lr_start: 3e-3,
        lr_end: 1e-3,
        seed: 17,
        ..Default::default()
    }
}

fn sample(seed: u64, h: usize, w: usize) -> TrainSample {
    let sharp = random_scene(seed, 3, h, w);
    let blurry = blur_with_kernel(&sharp, &make_linear_kernel(5, 0.3, 5).unwrap());
    TrainSample::from_pair(blurry, sharp, &CannyParams::default()).unwrap()
}

fn dataset(n: usize) -> Vec<TrainSample> {
    (0..n as u64).map(|i| sample(i, 24, 20)).collect()
}

#[test]
fn schedule_endpoints_and_midpoint() {
    let c = TrainConfig::default();
    assert_eq!(lr_at(0, &c).unwrap(), 1e-3);
    let end = lr_at(1500, &c).unwrap();
    assert!(((end - 1e-6) / 1e-6).abs() < 1e-12);
    let mid = lr_at(750, &c).unwrap();
    assert!(((mid - LR_AT_750) / LR_AT_750).abs() < 1e-12, "{mid}");
    let mut prev = f64::INFINITY;
    for e in 0..=1500 {
        let lr = lr_at(e, &c).unwrap();
        assert!(lr <= prev);
        prev = lr;
    }
    assert!(matches!(lr_at(1501, &c), Err(Error::Parameter(_))));
}

#[test]
fn flip_is_involution_and_identity_crop_is_window() {
    let s = sample(1, 20, 24);
    assert_eq!(s.blurry.flip_horizontal().flip_horizontal(), s.blurry);
    let aug = Augmentation {
        y0: 0,
        x0: 0,
        crop_h: 8,
        crop_w: 12,
        flip: false,
        quarter_turns: 0,
    };
    let out = aug.apply_sample(&s).unwrap();
    assert_eq!(out.sharp, s.sharp.crop(0, 0, 8, 12).unwrap());
    assert_eq!(out.sharp_edges, s.sharp_edges.crop(0, 0, 8, 12).unwrap());
}

/// Forward-maps every source pixel: crop, mirror the column, then apply
/// `(r, c) → (W−1−c, r)` once per counter-clockwise quarter turn.
fn transform_oracle(img: &Image, a: &Augmentation) -> Image {
    let (ch, _, _) = img.dims();
    let (mut h, mut w) = (a.crop_h, a.crop_w);
    let mut pts: Vec<(usize, usize, usize, usize)> = Vec::new();
    for r in 0..a.crop_h {
        for c in 0..a.crop_w {
            let c2 = if a.flip { a.crop_w - 1 - c } else { c };
            pts.push((a.y0 + r, a.x0 + c, r, c2));
        }
    }
    for _ in 0..a.quarter_turns {
        for p in pts.iter_mut() {
            let (r, c) = (p.2, p.3);
            p.2 = w - 1 - c;
            p.3 = r;
        }
        std::mem::swap(&mut h, &mut w);
    }
    let mut out = Image::zeros(ch, h, w);
    for (sy, sx, dy, dx) in pts {
        for k in 0..ch {
            out.set(k, dy, dx, img.get(k, sy, sx));
        }
    }
    out
}

#[test]
fn augmentation_moves_all_planes_together() {
    let s = sample(2, 30, 26);
    for seed in 0..40 {
        let cfg = TrainConfig {
            crop_h: 16,
            crop_w: 16,
            flip_prob: 0.5,
            rotate_prob: 0.7,
            ..Default::default()
        };
        let mut r1 = rng(seed);
        let mut r2 = rng(seed);
        let out = augment(&s, &cfg, &mut r1).unwrap();
        let a = Augmentation::draw(30, 26, &cfg, &mut r2).unwrap();
        assert_eq!(out.blurry, transform_oracle(&s.blurry, &a));
        assert_eq!(out.sharp, transform_oracle(&s.sharp, &a));
        assert_eq!(out.blurry_edges, transform_oracle(&s.blurry_edges, &a));
        assert_eq!(out.sharp_edges, transform_oracle(&s.sharp_edges, &a));
    }
}

#[test]
fn non_square_crops_keep_their_shape() {
    let cfg = TrainConfig {
        crop_h: 8,
        crop_w: 16,
        rotate_prob: 1.0,
        ..Default::default()
    };
    let s = sample(3, 20, 20);
    let mut r = rng(4);
    for _ in 0..20 {
        let a = Augmentation::draw(20, 20, &cfg, &mut r).unwrap();
        assert_eq!(a.quarter_turns, 2);
        assert_eq!(a.apply(&s.blurry).unwrap().dims(), (3, 8, 16));
    }
    assert!(matches!(Augmentation::draw(7, 20, &cfg, &mut r), Err(Error::Data(_))));
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let model = tiny_model(Variant::Epan);
    let cfg = tiny_config(5);
    let mut net = Network::<f32>::build(&model, 1).unwrap();
    let before = net.params().to_vec();
    let mut adam = Adam::new(AdamParams::default(), net.params().iter().map(|p| &p.tensor));
    train_epoch_with_lr(&mut net, &mut adam, &dataset(3), &cfg, 0, 0.0).unwrap();
    for (a, b) in net.params().iter().zip(&before) {
        assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
    }
}

#[test]
fn single_sample_overfits() {
    let model = tiny_model(Variant::Epan);
    let cfg = TrainConfig {
        flip_prob: 0.0,
        rotate_prob: 0.0,
        ..tiny_config(200)
    };
    let mut t = Trainer::new(&model, cfg).unwrap();
    let data = vec![sample(5, 16, 16)];
    let first = t.run_epoch(&data).unwrap().loss;
    let mut last = first;
    while !t.is_finished() {
        last = t.run_epoch(&data).unwrap().loss;
    }
    assert!(last < first, "{last} vs {first}");
}

#[test]
fn identical_seeds_give_identical_stats() {
    let run = || -> Vec<EpochStats> {
        let mut t = Trainer::new(&tiny_model(Variant::PhiAdd), tiny_config(3)).unwrap();
        let data = dataset(5);
        (0..3).map(|_| t.run_epoch(&data).unwrap()).collect()
    };
    let a = run();
    assert_eq!(a, run());
    assert_eq!(a[0].batches, 2);
    assert!(a[0].edge_loss.is_some());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let data = dataset(5);
    let model = tiny_model(Variant::Epan);

    let mut full = Trainer::new(&model, tiny_config(4)).unwrap();
    let full_stats: Vec<EpochStats> = (0..4).map(|_| full.run_epoch(&data).unwrap()).collect();

    let mut first = Trainer::new(&model, tiny_config(4)).unwrap();
    first.run_epoch(&data).unwrap();
    first.run_epoch(&data).unwrap();
    first.save(&path).unwrap();
    let mut resumed = Trainer::resume(&path).unwrap();
    assert_eq!(resumed.next_epoch, 2);
    assert_eq!(resumed.config, tiny_config(4));
    assert_eq!(resumed.run_epoch(&data).unwrap(), full_stats[2]);
    assert_eq!(resumed.run_epoch(&data).unwrap(), full_stats[3]);
    assert_eq!(resumed.network.params(), full.network.params());
    assert!(resumed.is_finished());
    assert!(resumed.run_epoch(&data).is_err());
}

#[test]
fn epoch_streams_are_independent() {
    let a: u64 = epoch_rng(3, 0).random();
    let b: u64 = epoch_rng(3, 1).random();
    assert_ne!(a, b);
    assert_eq!(a, epoch_rng(3, 0).random::<u64>());
}

#[test]
fn nan_loss_aborts_with_batch() {
    let mut net = Network::<f32>::build(&tiny_model(Variant::Phi), 0).unwrap();
    net.param_mut("cdn.head.bias").unwrap().data_mut()[0] = f32::NAN;
    let mut adam = Adam::new(AdamParams::default(), net.params().iter().map(|p| &p.tensor));
    match train_epoch(&mut net, &mut adam, &dataset(2), &tiny_config(2), 0) {
        Err(Error::Diverged(msg)) => assert!(msg.contains("epoch 0, batch 0"), "{msg}"),
        other => panic!("{:?}", other.map(|_| ())),
    }
}

#[test]
fn empty_dataset_is_an_error() {
    let mut t = Trainer::new(&tiny_model(Variant::Phi), tiny_config(2)).unwrap();
    assert!(matches!(t.run_epoch(&[]), Err(Error::Data(_))));
}

#[test]
fn stats_log_is_line_delimited() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let mut t = Trainer::new(&tiny_model(Variant::Phi), tiny_config(2)).unwrap();
    let data = dataset(2);
    for _ in 0..2 {
        append_jsonl(&log, &t.run_epoch(&data).unwrap()).unwrap();
    }
    let text = std::fs::read_to_string(&log).unwrap();
    let rows: Vec<EpochStats> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1].epoch, 1);
    assert!(rows[0].edge_loss.is_none());
}
