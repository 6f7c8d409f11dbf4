use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tbnet::checkpoint::Checkpoint;
use tbnet::training::{self, TrainState};

const SMALL: &[&str] = &[
    "--desk",
    "--input-size",
    "64",
    "--width-divisor",
    "16",
    "--backbone-blocks",
    "1,1,1,1",
    "--context-depth",
    "128",
    "--seed",
    "1",
];

fn tbnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tbnet"))
        .args(args)
        .env_remove("TBNET_OUTPUT_ROOT")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = tbnet(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(args: &[&str]) -> (i32, String) {
    let o = tbnet(args);
    (o.status.code().unwrap(), String::from_utf8_lossy(&o.stderr).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dataset(root: &Path) {
    ok(&["generate", "--samples", "4", "--size", "64", "--seed", "7", "--out", s(root)]);
    ok(&["generate", "--samples", "2", "--size", "64", "--seed", "8", "--split", "val", "--out", s(root)]);
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> (i32, String) {
    let mut args = vec!["train", "--data", s(data), "--out", s(out), "--epochs", "2"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    code(&args)
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v = Vec::new();
    for split in ["images", "masks", "boundaries"] {
        let dir = root.join("train").join(split);
        let mut names: Vec<_> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            v.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
        }
    }
    v.push(("taxonomy.txt".into(), fs::read(root.join("taxonomy.txt")).unwrap()));
    v
}

#[test]
fn generate_writes_triples_and_is_repeatable() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    let out = ok(&["generate", "--samples", "5", "--size", "32", "--seed", "7", "--out", s(&a)]);
    ok(&["generate", "--samples", "5", "--size", "32", "--seed", "7", "--out", s(&b)]);
    assert!(out.contains("crack") && out.contains("background"), "{out}");
    for d in ["images", "masks", "boundaries"] {
        assert_eq!(fs::read_dir(a.join("train").join(d)).unwrap().count(), 5);
    }
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn unwritable_output_exits_with_2() {
    let t = tempfile::tempdir().unwrap();
    let file = t.path().join("plain");
    fs::write(&file, "x").unwrap();
    let (c, err) = code(&["generate", "--samples", "1", "--size", "16", "--out", s(&file.join("sub"))]);
    assert_eq!(c, 2);
    assert!(err.contains("error"), "{err}");
}

#[test]
fn bad_config_exits_with_2_listing_violations() {
    let t = tempfile::tempdir().unwrap();
    dataset(&t.path().join("d"));
    let (c, err) = train(&t.path().join("d"), &t.path().join("r"), &["--batch-size", "0", "--lambda-seg=-1"]);
    assert_eq!(c, 2);
    assert!(err.contains("batch_size") && err.contains("lambda_seg"), "{err}");
    let (c, _) = code(&["train", "--data", "x", "--out", "y", "--reduction", "median"]);
    assert_eq!(c, 2);
}

#[test]
fn train_eval_predict_round_trip() {
    let t = tempfile::tempdir().unwrap();
    let (d, r) = (t.path().join("d"), t.path().join("r"));
    dataset(&d);
    assert_eq!(train(&d, &r, &[]).0, 0);
    for f in ["last.ckpt", "best.ckpt", "manifest.json", "train_log.jsonl", "config.toml"] {
        assert!(r.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(r.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["input_size"], serde_json::json!([64, 64]));
    assert_eq!(manifest["dataset_sha256"].as_str().unwrap().len(), 64);

    let ckpt = r.join("last.ckpt");
    let e1 = t.path().join("e1");
    let e2 = t.path().join("e2");
    let printed = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&d), "--split", "train", "--out", s(&e1)]);
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&d), "--split", "train", "--out", s(&e2)]);
    assert!(printed.contains("mIoU"));
    assert_eq!(fs::read(e1.join("metrics.json")).unwrap(), fs::read(e2.join("metrics.json")).unwrap());
    let table = fs::read_to_string(e1.join("metrics.txt")).unwrap();
    let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().filter(|w| *w != "|").collect();
    assert_eq!(header.len(), 9, "{header:?}");
    assert_eq!(header[8], "Mean");

    let img = d.join("train/images/00001.png");
    let p = t.path().join("p");
    ok(&["predict", "--checkpoint", s(&ckpt), "--image", s(&img), "--out", s(&p)]);
    let mask = image::open(p.join("00001_mask.png")).unwrap().to_luma8();
    let boundary = image::open(p.join("00001_boundary.png")).unwrap().to_luma8();
    let overlay = image::open(p.join("00001_overlay.png")).unwrap().to_rgb8();
    for dims in [mask.dimensions(), boundary.dimensions(), overlay.dimensions()] {
        assert_eq!(dims, (64, 64));
    }
    let state = TrainState::from_checkpoint(Checkpoint::load(&ckpt).unwrap()).unwrap();
    let (labels, prob) = training::predict(&state, &tbnet::data::load_image(&img).unwrap()).unwrap();
    assert_eq!(mask.as_raw(), labels.data());
    let expect: Vec<u8> = prob.unwrap().data().iter().map(|p| (255.0 * p).round() as u8).collect();
    assert_eq!(boundary.as_raw(), &expect);
}

#[test]
fn no_boundary_checkpoint_has_no_boundary_parameters() {
    let t = tempfile::tempdir().unwrap();
    let (d, r) = (t.path().join("d"), t.path().join("r"));
    dataset(&d);
    assert_eq!(train(&d, &r, &["--no-boundary"]).0, 0);
    let c = Checkpoint::load(&r.join("last.ckpt")).unwrap();
    assert!(!c.flags.use_boundary_stream);
    assert!(c.params.names().all(|n| !n.starts_with("boundary/")));
    assert!(c.params.names().any(|n| n.starts_with("fusion/")));
}

#[test]
fn resume_conflicts_and_numeric_failures_have_distinct_codes() {
    let t = tempfile::tempdir().unwrap();
    let (d, r) = (t.path().join("d"), t.path().join("r"));
    dataset(&d);
    assert_eq!(train(&d, &r, &["--max-steps", "1"]).0, 0);
    let ckpt = r.join("last.ckpt");
    let (c, err) = code(&["train", "--data", s(&d), "--out", s(&t.path().join("r2")), "--resume", s(&ckpt), "--input-size", "96"]);
    assert_eq!(c, 2);
    assert!(err.contains("input_size"), "{err}");

    let mut bad = Checkpoint::load(&ckpt).unwrap();
    bad.params.get_mut("fusion/classifier/bias").unwrap().data_mut()[0] = f64::NAN;
    let nan = t.path().join("nan.ckpt");
    bad.save(&nan).unwrap();
    let (c, err) = code(&["train", "--data", s(&d), "--out", s(&t.path().join("r3")), "--resume", s(&nan)]);
    assert_eq!(c, 3, "{err}");
    assert!(err.contains("step"), "{err}");
}

#[test]
fn output_root_relocates_relative_paths() {
    let t = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_tbnet"))
        .args(["generate", "--samples", "1", "--size", "16", "--out", "gen"])
        .env("TBNET_OUTPUT_ROOT", t.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(t.path().join("gen/train/images/00000.png").exists());
}

#[test]
fn unreadable_predict_input_exits_with_2() {
    let t = tempfile::tempdir().unwrap();
    let (d, r) = (t.path().join("d"), t.path().join("r"));
    dataset(&d);
    assert_eq!(train(&d, &r, &["--max-steps", "1"]).0, 0);
    let junk = t.path().join("junk.png");
    fs::write(&junk, "not an image").unwrap();
    let (c, _) = code(&["predict", "--checkpoint", s(&r.join("last.ckpt")), "--image", s(&junk), "--out", s(&t.path().join("p"))]);
    assert_eq!(c, 2);
}
