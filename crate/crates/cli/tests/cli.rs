use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use epan::data::{blur_with_kernel, make_linear_kernel, random_scene, DatasetManifest, ManifestRecord, Split};
use epan::model::checkpoint::save_checkpoint;
use epan::{Image, ModelConfig, Network, Variant};
use serde_json::Value;

fn epan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn epan")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn scene(dir: &Path, name: &str, seed: u64, h: usize, w: usize) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let p = dir.join(name);
    random_scene(seed, 3, h, w).write_png(&p).unwrap();
    p
}

fn small_model(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        levels: 2,
        cdn_base_channels: 4,
        convs_per_level: 1,
        ..Default::default()
    }
}

/// Checkpoint whose output heads are zero, so it maps inputs to themselves.
fn identity_checkpoint(path: &Path, variant: Variant) {
    let mut net = Network::<f32>::build(&small_model(variant), 0).unwrap();
    net.zero_heads();
    save_checkpoint(&net, 0, None, path).unwrap();
}

fn read_jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn pngs(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(epan(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(epan(&["train", "--epochs", "many"]).status.code(), Some(1));
    assert_eq!(epan(&["--help"]).status.code(), Some(0));
}

#[test]
fn detect_edges_outputs() {
    let t = tempfile::tempdir().unwrap();
    let empty = t.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = t.path().join("out0");
    let o = epan(&["detect-edges", "--input", s(&empty), "--output", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(pngs(&out).len(), 0);

    let inp = t.path().join("in");
    scene(&inp, "a.png", 1, 24, 30);
    fs::write(inp.join("notes.txt"), "ignored").unwrap();
    let (o1, o2) = (t.path().join("o1"), t.path().join("o2"));
    for o in [&o1, &o2] {
        let r = epan(&["detect-edges", "--input", s(&inp), "--output", s(o)]);
        assert!(r.status.success(), "{}", stderr(&r));
    }
    let edge = Image::read_png(&o1.join("a.png")).unwrap();
    assert_eq!(edge.dims(), (1, 24, 30));
    assert_eq!(fs::read(o1.join("a.png")).unwrap(), fs::read(o2.join("a.png")).unwrap());

    fs::write(inp.join("broken.png"), b"not a png").unwrap();
    let r = epan(&["detect-edges", "--input", s(&inp), "--output", s(&t.path().join("o3"))]);
    assert_eq!(r.status.code(), Some(2));
    assert!(stderr(&r).contains("broken.png"));
    assert!(t.path().join("o3/a.png").is_file());

    let r = epan(&["detect-edges", "--input", s(&inp), "--output", s(&o1), "--canny-low", "0.9"]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn kernel_mode_with_unit_kernel_copies() {
    let t = tempfile::tempdir().unwrap();
    let sharp = t.path().join("sharp_in");
    for i in 0..4 {
        scene(&sharp, &format!("sc{i}__0.png"), i, 16, 16);
    }
    let out = t.path().join("ds");
    let o = epan(&[
        "make-dataset", "kernel", "--sharp", s(&sharp), "--length", "1", "--output", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = DatasetManifest::read(&out.join("manifest.jsonl")).unwrap();
    assert_eq!(m.records.len(), 4);
    assert_eq!(m.split(Split::Test).len(), 1);
    for r in &m.records {
        assert_eq!(fs::read(out.join(&r.sharp_path)).unwrap(), fs::read(out.join(&r.blurry_path)).unwrap());
    }
    let o = epan(&[
        "make-dataset", "kernel", "--sharp", s(&sharp), "--length", "9", "--angle", "0.5", "--output", s(&out),
        "--test-scenarios", "sc2,sc3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = DatasetManifest::read(&out.join("manifest.jsonl")).unwrap();
    let test: Vec<&str> = m.split(Split::Test).iter().map(|r| r.scenario_id.as_str()).collect();
    assert_eq!(test, ["sc2", "sc3"]);
}

#[test]
fn average_mode_makes_one_pair_per_clip() {
    let t = tempfile::tempdir().unwrap();
    let frames = t.path().join("frames");
    let clips = 3;
    for c in 0..clips {
        let base = random_scene(c, 3, 20, 32);
        let clip = frames.join(format!("clip{c}"));
        fs::create_dir_all(&clip).unwrap();
        for f in 0..7 {
            let shifted = Image::from_fn(3, 16, 16, |ch, y, x| base.get(ch, y + 2, x + f * 2));
            shifted.write_png(&clip.join(format!("f{f}.png"))).unwrap();
        }
    }
    let out = t.path().join("ds");
    let o = epan(&["make-dataset", "average", "--frames", s(&frames), "--output", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = DatasetManifest::read(&out.join("manifest.jsonl")).unwrap();
    assert_eq!(m.records.len(), clips as usize);
    let mid = Image::read_png(&frames.join("clip1/f3.png")).unwrap();
    let rec = m.records.iter().find(|r| r.scenario_id == "clip1").unwrap();
    assert_eq!(Image::read_png(&out.join(&rec.sharp_path)).unwrap(), mid);
}

#[test]
fn align_mode_recovers_planted_shifts() {
    let t = tempfile::tempdir().unwrap();
    let (sd, bd) = (t.path().join("sharp"), t.path().join("blurry"));
    fs::create_dir_all(&sd).unwrap();
    fs::create_dir_all(&bd).unwrap();
    let shifts = [(3i64, -2i64), (-4, 1), (0, 5)];
    let mut sidecar = String::new();
    for (i, (dx, dy)) in shifts.iter().enumerate() {
        let sharp = random_scene(40 + i as u64, 3, 48, 48).quantized();
        let blurry = Image::from_fn(3, 48, 48, |c, y, x| {
            let sy = (y as i64 - dy).clamp(0, 47) as usize;
            let sx = (x as i64 - dx).clamp(0, 47) as usize;
            sharp.get(c, sy, sx)
        });
        let name = format!("scene{i}__a.png");
        sharp.write_png(&sd.join(&name)).unwrap();
        blurry.write_png(&bd.join(&name)).unwrap();
        sidecar.push_str(&format!("{{\"image\":\"{name}\",\"x\":16,\"y\":16,\"w\":16,\"h\":16,\"score\":0.9}}\n"));
        // Suppressed by NMS.
        sidecar.push_str(&format!("{{\"image\":\"{name}\",\"x\":17,\"y\":16,\"w\":16,\"h\":16,\"score\":0.5}}\n"));
    }
    let boxes = t.path().join("boxes.jsonl");
    let out = t.path().join("ds");
    let args = |b: &Path| {
        vec![
            "make-dataset".to_string(), "align".into(), "--sharp".into(), s(&sd).into(), "--blurry".into(),
            s(&bd).into(), "--boxes".into(), s(b).into(), "--output".into(), s(&out).into(),
        ]
    };
    let missing = Command::new(env!("CARGO_BIN_EXE_epan")).args(args(&boxes)).output().unwrap();
    assert_eq!(missing.status.code(), Some(1));
    assert!(stderr(&missing).contains("boxes sidecar"));
    assert!(!out.exists());

    fs::write(&boxes, sidecar).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_epan")).args(args(&boxes)).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let log = read_jsonl(&out.join("align.jsonl"));
    assert_eq!(log.len(), 3);
    for (row, (dx, dy)) in log.iter().zip(shifts) {
        assert_eq!((row["offset_x"].as_i64().unwrap(), row["offset_y"].as_i64().unwrap()), (dx, dy));
        assert_eq!(row["psnr"].as_f64().unwrap(), 99.0);
    }
    let m = DatasetManifest::read(&out.join("manifest.jsonl")).unwrap();
    for r in &m.records {
        assert_eq!(Image::read_png(&out.join(&r.sharp_path)).unwrap(), Image::read_png(&out.join(&r.blurry_path)).unwrap());
    }
}

fn tiny_dataset(root: &Path, n: u64) -> PathBuf {
    let k = make_linear_kernel(5, 0.3, 5).unwrap();
    let mut recs = Vec::new();
    for i in 0..n {
        let sharp = random_scene(i, 3, 16, 16);
        let blurry = blur_with_kernel(&sharp, &k);
        let (sp, bp) = (format!("s{i}.png"), format!("b{i}.png"));
        sharp.write_png(&root.join(&sp)).unwrap();
        blurry.write_png(&root.join(&bp)).unwrap();
        recs.push(ManifestRecord {
            sharp_path: sp.into(),
            blurry_path: bp.into(),
            scenario_id: format!("sc{i}"),
            split: if i + 1 < n { Split::Train } else { Split::Test },
        });
    }
    let path = root.join("manifest.jsonl");
    DatasetManifest::new(recs).write(&path).unwrap();
    path
}

fn train_args<'a>(manifest: &'a str, out: &'a str, variant: &'a str, epochs: &'a str) -> Vec<&'a str> {
    vec![
        "train", "--manifest", manifest, "--output", out, "--variant", variant, "--epochs", epochs, "--levels", "2",
        "--base-channels", "4", "--convs-per-level", "1",
    ]
}

fn with_defaults(mut args: Vec<&str>) -> Vec<&str> {
    for (flag, value) in [("--crop", "16"), ("--lr-start", "2e-3"), ("--lr-end", "1e-3")] {
        if !args.contains(&flag) {
            args.extend([flag, value]);
        }
    }
    args
}

#[test]
fn train_logs_and_checkpoints() {
    let t = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(t.path(), 3);
    let m = s(&manifest);

    let c0 = t.path().join("init.ckpt");
    let o = epan(&with_defaults(train_args(m, s(&c0), "epan", "0")));
    assert!(o.status.success(), "{}", stderr(&o));
    let (net, epoch, _) = epan::model::checkpoint::load_checkpoint::<f32>(&c0).unwrap();
    assert_eq!(epoch, 0);
    assert_eq!(net.params(), Network::<f32>::build(&small_model(Variant::Epan), 0).unwrap().params());

    let mut een = Vec::new();
    for v in ["phi", "epan"] {
        let out = t.path().join(format!("{v}.ckpt"));
        let mut args = train_args(m, s(&out), v, "4");
        args.extend(["--checkpoint-every", "2"]);
        let o = epan(&with_defaults(args));
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stderr(&o).contains(&format!("trained {v}")));
        assert!(t.path().join(format!("{v}.e00002.ckpt")).is_file());
        let log = read_jsonl(&t.path().join(format!("{v}.ckpt.log.jsonl")));
        assert_eq!(log.len(), 6);
        assert_eq!(log[0]["event"], "start");
        assert_eq!(log[1]["event"], "epoch");
        een.push(log[0]["een_parameters"].as_u64().unwrap());
    }
    assert_eq!(een[0], 0);
    assert!(een[1] > 0);
}

#[test]
fn invalid_training_config_writes_nothing() {
    let t = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(t.path(), 3);
    let out = t.path().join("runs/bad.ckpt");
    let mut args = train_args(s(&manifest), s(&out), "epan", "2");
    args.extend(["--crop", "15"]);
    let o = epan(&with_defaults(args));
    assert_eq!(o.status.code(), Some(1));
    assert!(!t.path().join("runs").exists());

    let cfg = t.path().join("cfg.json");
    fs::write(&cfg, r#"{"model": {"variant": "phi_xyz"}}"#).unwrap();
    let o = epan(&["train", "--config", s(&cfg), "--manifest", s(&manifest), "--output", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("phi_xyz"));

    fs::write(&cfg, r#"{"paths": {"manifest": "nowhere.jsonl", "output": "x.ckpt"}}"#).unwrap();
    let o = epan(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!t.path().join("x.ckpt").exists());
}

#[test]
fn config_file_drives_training() {
    let t = tempfile::tempdir().unwrap();
    tiny_dataset(t.path(), 3);
    let cfg = t.path().join("run.json");
    fs::write(
        &cfg,
        r#"{
            "model": {"variant": "phi_cat", "levels": 2, "cdn_base_channels": 4, "convs_per_level": 1},
            "train": {"epochs": 1, "crop_h": 16, "crop_w": 16, "seed": 5},
            "paths": {"manifest": "manifest.jsonl", "output": "cat.ckpt", "log": "cat.jsonl"}
        }"#,
    )
    .unwrap();
    let o = epan(&["train", "--config", s(&cfg), "--epochs", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = read_jsonl(&t.path().join("cat.jsonl"));
    assert_eq!(log[0]["variant"], "phi_cat");
    assert_eq!(log[0]["config"]["train"]["epochs"], 2);
    assert_eq!(log[0]["config"]["train"]["seed"], 5);
}

#[test]
fn divergence_exits_with_context() {
    let t = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(t.path(), 3);
    let out = t.path().join("boom.ckpt");
    let mut args = train_args(s(&manifest), s(&out), "phi", "5");
    args.extend(["--lr-start", "1e30", "--lr-end", "1e29"]);
    let o = epan(&with_defaults(args));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let msg = stderr(&o);
    assert!(msg.contains("diverged") && msg.contains("batch"), "{msg}");
    let log = read_jsonl(&t.path().join("boom.ckpt.log.jsonl"));
    assert_eq!(log.last().unwrap()["event"], "error");
}

#[test]
fn infer_keeps_size_and_identity() {
    let t = tempfile::tempdir().unwrap();
    let inp = t.path().join("in");
    scene(&inp, "odd.png", 3, 13, 19);
    scene(&inp, "even.png", 4, 16, 20);
    let ck = t.path().join("id.ckpt");
    identity_checkpoint(&ck, Variant::Epan);
    let (o1, o2) = (t.path().join("o1"), t.path().join("o2"));
    for o in [&o1, &o2] {
        let r = epan(&["infer", "--checkpoint", s(&ck), "--input", s(&inp), "--output", s(o)]);
        assert!(r.status.success(), "{}", stderr(&r));
    }
    for name in ["odd.png", "even.png"] {
        assert_eq!(Image::read_png(&o1.join(name)).unwrap(), Image::read_png(&inp.join(name)).unwrap());
        assert_eq!(fs::read(o1.join(name)).unwrap(), fs::read(o2.join(name)).unwrap());
    }
    assert_eq!(pngs(&o1).len(), 2);

    let bad = t.path().join("bad.ckpt");
    fs::write(&bad, b"EPANCKPT").unwrap();
    let r = epan(&["infer", "--checkpoint", s(&bad), "--input", s(&inp), "--output", s(&o1)]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn eval_reports_and_comparison() {
    let t = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(t.path(), 4);
    let (a, b) = (t.path().join("a.ckpt"), t.path().join("b.ckpt"));
    identity_checkpoint(&a, Variant::Phi);
    identity_checkpoint(&b, Variant::Epan);

    // Ground truth as prediction: the blurry path points at the sharp image.
    let gt = t.path().join("gt.jsonl");
    let mut m = DatasetManifest::read(&manifest).unwrap();
    for r in &mut m.records {
        r.blurry_path = r.sharp_path.clone();
    }
    m.write(&gt).unwrap();
    let report = t.path().join("gt_report.json");
    let o = epan(&["eval", "--checkpoint", s(&a), "--manifest", s(&gt), "--report", s(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let r0 = &v["results"][0];
    assert_eq!(r0["mean_psnr"], 99.0);
    assert_eq!(r0["mean_ssim"], 1.0);
    assert!(t.path().join("gt_report.txt").is_file());

    let report = t.path().join("cmp.json");
    let o = epan(&[
        "eval", "--checkpoint", s(&a), "--checkpoint", s(&b), "--manifest", s(&manifest), "--report", s(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let rows = v["results"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["variant"], "phi");
    assert_eq!(rows[1]["variant"], "epan");
    for row in rows {
        let per: Vec<f64> = row["per_image"].as_array().unwrap().iter().map(|r| r["psnr"].as_f64().unwrap()).collect();
        let mean = per.iter().sum::<f64>() / per.len() as f64;
        assert!((mean - row["mean_psnr"].as_f64().unwrap()).abs() < 1e-12);
    }
    let table = fs::read_to_string(t.path().join("cmp.txt")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().nth(2).unwrap().starts_with("epan"));

    let mut m = DatasetManifest::read(&manifest).unwrap();
    m.records.retain(|r| r.split == Split::Train);
    let train_only = t.path().join("train_only.jsonl");
    m.write(&train_only).unwrap();
    let o = epan(&["eval", "--checkpoint", s(&a), "--manifest", s(&train_only), "--report", s(&report)]);
    assert_eq!(o.status.code(), Some(1));
}
