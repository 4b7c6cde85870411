use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use matchpoints::geometry::{read_homography, warp_image, Point};
use matchpoints::imaging::{load_gray, save_gray, GrayImage};
use matchpoints::rng::indexed_stream;
use matchpoints::synth::textured_image;

const TOY_PLAN: &str = "2,4,8,16";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_matchpoints"));
    c.args(["--log-level", "warn"]);
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// Writes `n` textured base images and a manifest listing them.
fn bases(dir: &Path, n: usize, size: usize) -> PathBuf {
    let mut manifest = String::from("# bases\n");
    for i in 0..n {
        let img = textured_image(size, size, &mut indexed_stream(5, "base", i as u64)).unwrap();
        let name = format!("base_{i}.pgm");
        save_gray(&img, &dir.join(&name)).unwrap();
        manifest.push_str(&name);
        manifest.push('\n');
    }
    let path = dir.join("bases.txt");
    std::fs::write(&path, manifest).unwrap();
    path
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .filter(|(n, _)| n != "config.json")
        .collect();
    v.sort();
    v
}

fn toy_checkpoint(dir: &Path) -> PathBuf {
    let manifest = bases(dir, 1, 32);
    let out = dir.join("ck");
    let o = run(&["train", "--bases", s(&manifest), "--out", s(&out), "--epochs", "0", "--crop", "32", "--channel-plan", TOY_PLAN]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out.join("final.glam")
}

#[test]
fn gen_pairs_zero_count_writes_only_config() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = bases(dir.path(), 2, 48);
    let out = dir.path().join("pairs");
    let o = run(&["gen-pairs", "--bases", s(&manifest), "--out", s(&out), "--count", "0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let names: Vec<_> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec!["config.json"]);
    let cfg: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["command"], "gen-pairs");
    assert_eq!(cfg["gen_pairs"]["count"], 0);
}

#[test]
fn gen_pairs_is_reproducible_and_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = bases(dir.path(), 2, 96);
    let args = |out: &Path| {
        vec![
            "--seed".to_owned(), "11".into(), "gen-pairs".into(), "--bases".into(), s(&manifest).into(),
            "--out".into(), s(out).into(), "--count".into(), "3".into(), "--crop".into(), "64".into(),
            "--no-augment".into(), "--trans-max-x".into(), "8".into(), "--trans-max-y".into(), "8".into(),
            "--rot-max-deg".into(), "10".into(), "--persp-max".into(), "1e-4".into(),
        ]
    };
    let (o1, o2) = (dir.path().join("p1"), dir.path().join("p2"));
    assert_eq!(code(&bin().args(args(&o1)).output().unwrap()), 0);
    assert_eq!(code(&bin().args(args(&o2)).output().unwrap()), 0);
    let (b1, b2) = (dir_bytes(&o1), dir_bytes(&o2));
    assert_eq!(b1.len(), 9);
    assert_eq!(b1, b2);

    // Re-warping A by the written H reproduces B on the overlap.
    for k in 0..3 {
        let a = load_gray(&o1.join(format!("pair_{k:06}_a.pgm"))).unwrap();
        let b = load_gray(&o1.join(format!("pair_{k:06}_b.pgm"))).unwrap();
        let h = read_homography(&o1.join(format!("pair_{k:06}_h.txt"))).unwrap();
        let warped = warp_image(&a, &h, 64, 64).unwrap();
        let inv = h.inverse().unwrap();
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for y in 4..60 {
            for x in 4..60 {
                let p = inv.apply(Point::new(x as f64, y as f64)).unwrap();
                if p.x >= 2.0 && p.y >= 2.0 && p.x <= 61.0 && p.y <= 61.0 && b.get(x, y) > 0.0 && warped.get(x, y) > 0.0 {
                    xs.push(warped.get(x, y));
                    ys.push(b.get(x, y));
                }
            }
        }
        assert!(xs.len() > 500, "overlap {}", xs.len());
        assert!(correlation(&xs, &ys) > 0.9, "pair {k}: {}", correlation(&xs, &ys));
    }
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn train_zero_epochs_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ck = toy_checkpoint(dir.path());
    assert!(ck.exists());
    assert!(ck.with_file_name("checkpoint_000000.glam").exists());
    assert_eq!(std::fs::read(ck.with_file_name("metrics.jsonl")).unwrap(), b"");
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = bases(dir.path(), 4, 48);
    let common = |out: &Path, epochs: &str| {
        vec![
            "--seed".to_owned(), "3".into(), "train".into(), "--bases".into(), s(&manifest).into(),
            "--out".into(), s(out).into(), "--epochs".into(), epochs.into(), "--batch-size".into(), "2".into(),
            "--crop".into(), "32".into(), "--channel-plan".into(), TOY_PLAN.into(), "--nms-window".into(), "3".into(),
            "--trans-max-x".into(), "4".into(), "--trans-max-y".into(), "4".into(), "--rot-max-deg".into(), "5".into(),
        ]
    };
    let full = dir.path().join("full");
    let o = bin().args(common(&full, "2")).output().unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let part = dir.path().join("part");
    assert_eq!(code(&bin().args(common(&part, "1")).output().unwrap()), 0);
    let mut resume = common(&part, "2");
    resume.extend(["--resume".to_owned(), s(&part.join("final.glam")).into()]);
    let o = bin().args(resume).output().unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    assert_eq!(std::fs::read(full.join("final.glam")).unwrap(), std::fs::read(part.join("final.glam")).unwrap());
    let log = std::fs::read_to_string(full.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert_eq!(log, std::fs::read_to_string(part.join("metrics.jsonl")).unwrap());
}

#[test]
fn register_self_pair_and_featureless_failure() {
    let dir = tempfile::tempdir().unwrap();
    let ck = toy_checkpoint(dir.path());
    let img = textured_image(80, 80, &mut indexed_stream(9, "tex", 0)).unwrap();
    let a = dir.path().join("a.pgm");
    save_gray(&img, &a).unwrap();
    let out = dir.path().join("h.txt");
    let o = run(&["register", "--a", s(&a), "--b", s(&a), "--checkpoint", s(&ck), "--out", s(&out), "--nms-window", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let h = read_homography(&out).unwrap();
    for c in [(0.0, 0.0), (79.0, 0.0), (0.0, 79.0), (79.0, 79.0)] {
        let p = Point::new(c.0, c.1);
        assert!(h.apply(p).unwrap().distance(&p) < 0.5);
    }
    assert!(dir.path().join("h.txt.config.json").exists());

    let flat = dir.path().join("flat.pgm");
    save_gray(&GrayImage::filled(80, 80, 0.5).unwrap(), &flat).unwrap();
    let out2 = dir.path().join("h2.txt");
    let o = run(&["register", "--a", s(&flat), "--b", s(&flat), "--checkpoint", s(&ck), "--out", s(&out2)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("registration failed"));
    assert!(!out2.exists());
}

#[test]
fn eval_reports_identity_pair_and_empty_dir() {
    let dir = tempfile::tempdir().unwrap();
    let ck = toy_checkpoint(dir.path());
    let pairs = dir.path().join("pairs");
    std::fs::create_dir(&pairs).unwrap();
    let out = dir.path().join("empty.json");
    let o = run(&["eval", "--pairs", s(&pairs), "--checkpoint", s(&ck), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(r["n_pairs"], 0);

    let img = textured_image(80, 80, &mut indexed_stream(9, "tex", 1)).unwrap();
    save_gray(&img, &pairs.join("pair_000000_a.pgm")).unwrap();
    save_gray(&img, &pairs.join("pair_000000_b.pgm")).unwrap();
    std::fs::write(pairs.join("pair_000000_h.txt"), "1 0 0\n0 1 0\n0 0 1\n").unwrap();
    let out = dir.path().join("report.json");
    let o = run(&["eval", "--pairs", s(&pairs), "--checkpoint", s(&ck), "--out", s(&out), "--nms-window", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(r["n_pairs"], 1);
    let p = &r["pairs"][0];
    assert_eq!(p["pair_id"], "pair_000000");
    assert_eq!(p["class"], "acceptable");
    assert!(p["mee"].as_f64().unwrap() < 1e-6);
    assert_eq!(p["repeatability"], 1.0);
    assert_eq!(r["acceptable_pct"], 100.0);
}

#[test]
fn mosaic_stops_at_blank_frame() {
    let dir = tempfile::tempdir().unwrap();
    let ck = toy_checkpoint(dir.path());
    let frames = dir.path().join("frames");
    std::fs::create_dir(&frames).unwrap();
    let img = textured_image(64, 64, &mut indexed_stream(9, "tex", 2)).unwrap();
    for k in 0..4 {
        let f = if k == 2 { GrayImage::new(64, 64).unwrap() } else { img.clone() };
        save_gray(&f, &frames.join(format!("frame_{k:03}.pgm"))).unwrap();
    }
    let out = dir.path().join("mosaic");
    let o = run(&["mosaic", "--frames", s(&frames), "--checkpoint", s(&ck), "--out", s(&out), "--nms-window", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["frames_registered"], 2);
    assert_eq!(summary["failure_index"], 2);
    let m = load_gray(&out.join("mosaic.pgm")).unwrap();
    assert_eq!((m.width(), m.height()), (summary["canvas_w"].as_u64().unwrap() as usize, summary["canvas_h"].as_u64().unwrap() as usize));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
    let manifest = bases(dir.path(), 1, 48);
    let out = dir.path().join("o");
    // Crop not divisible by 16.
    assert_eq!(code(&run(&["train", "--bases", s(&manifest), "--out", s(&out), "--crop", "17"])), 1);
    let missing = dir.path().join("missing.txt");
    assert_eq!(code(&run(&["gen-pairs", "--bases", s(&missing), "--out", s(&out), "--count", "1"])), 3);
    let ck = dir.path().join("missing.glam");
    assert_eq!(code(&run(&["register", "--a", "x.pgm", "--b", "y.pgm", "--checkpoint", s(&ck), "--out", "h.txt"])), 3);
    assert_eq!(code(&run(&["--log-level", "loud", "gen-pairs", "--bases", s(&manifest), "--out", s(&out)])), 1);
}

#[test]
fn logs_are_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = bases(dir.path(), 1, 48);
    let out = dir.path().join("o");
    let o = Command::new(env!("CARGO_BIN_EXE_matchpoints"))
        .args(["--log-level", "info", "gen-pairs", "--bases", s(&manifest), "--out", s(&out), "--count", "1", "--crop", "32"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.lines().count() >= 1);
    for line in stderr.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["msg"].is_string());
    }
}
