//! The `rego` binary: exit codes, config layering and the infer flows.

use std::path::Path;
use std::process::{Command, Output};

use rego::dataprep::toy;
use rego::imageio::ImageSample;

const SMALL: [&str; 10] = [
    "--set",
    "prepare.height=16",
    "--set",
    "prepare.width=32",
    "--set",
    "generator.height=16",
    "--set",
    "generator.width=32",
    "--set",
    "generator.base_channels=4",
];

fn rego(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rego"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn small(args: &[&str]) -> Output {
    let mut all: Vec<&str> = args.to_vec();
    all.extend_from_slice(&SMALL);
    all.extend_from_slice(&["--set", "generator.decoder_layers=2"]);
    rego(&all)
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Prepares a toy set and trains two iterations; returns (data dir, checkpoint).
fn trained(root: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let raw = root.join("raw");
    let data = root.join("data");
    let run = root.join("run");
    let o = rego(&["make-toy", "--out", s(&raw), "--count", "6", "--height", "16", "--width", "32"]);
    assert_eq!(code(&o), 0, "{o:?}");
    let o = small(&["prepare-data", "--images", s(&raw), "--out", s(&data), "--k", "2"]);
    assert_eq!(code(&o), 0, "{o:?}");
    let o = small(&["train", "--data", s(&data), "--out", s(&run), "--iterations", "2"]);
    assert_eq!(code(&o), 0, "{o:?}");
    (data, run.join("final.ckpt"))
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(code(&rego(&[])), 2);
    assert_eq!(code(&rego(&["train", "--bogus"])), 2);
    assert_eq!(code(&rego(&["infer", "--left", "x.png"])), 2);
    assert_eq!(code(&rego(&["fly"])), 2);
}

#[test]
fn help_lists_defaults() {
    let o = rego(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("style_weight = 0.5"), "{text}");
    assert!(text.contains("REGO__SECTION__KEY"));
}

#[test]
fn io_failures_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let o = rego(&["infer", "--checkpoint", s(&missing), "--left", "a.png", "--out", "b.png"]);
    assert_eq!(code(&o), 3);
    assert!(o.stdout.is_empty());
    assert!(!o.stderr.is_empty());
    let o = rego(&["prepare-data", "--images", s(&dir.path().join("nope")), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn config_and_shape_errors_exit_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let o = rego(&["--set", "train.itterations=3", "make-toy", "--out", s(dir.path())]);
    assert_eq!(code(&o), 4);
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[style]\nalpha = -1.0\n").unwrap();
    assert_eq!(code(&rego(&["--config", s(&cfg), "make-toy", "--out", s(dir.path())])), 4);
    let o = Command::new(env!("CARGO_BIN_EXE_rego"))
        .args(["make-toy", "--out", s(dir.path())])
        .env("REGO__TRAIN__BATCH_SIZE", "0")
        .output()
        .unwrap();
    assert_eq!(code(&o), 4);
}

#[test]
fn infer_flows() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path());
    let scene = ImageSample::load(&data.join("images").join("scene_000.png")).unwrap();
    let left = ImageSample::new("left", scene.left_half().unwrap()).unwrap();
    let left_png = dir.path().join("left.png");
    left.to_rgb().save(&left_png).unwrap();

    // random mode without an index: no sketch, no reference
    let out = dir.path().join("random.png");
    let o = rego(&["infer", "--checkpoint", s(&ckpt), "--left", s(&left_png), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{o:?}");
    assert!(stdout(&o).contains("reference_id_used: none"));
    let composite = image::open(&out).unwrap().to_rgb8();
    assert_eq!(composite.dimensions(), (32, 16));
    let right = image::open(dir.path().join("random_right.png")).unwrap().to_rgb8();
    assert_eq!(right.dimensions(), (16, 16));
    let submitted = left.to_rgb();
    for y in 0..16 {
        for x in 0..16 {
            assert_eq!(composite.get_pixel(x, y), submitted.get_pixel(x, y));
        }
    }
    let first = std::fs::read(&out).unwrap();
    assert_eq!(code(&rego(&["infer", "--checkpoint", s(&ckpt), "--left", s(&left_png), "--out", s(&out)])), 0);
    assert_eq!(std::fs::read(&out).unwrap(), first);

    // sketch plus retrieval through the index
    let sketch_png = data.join("sketches").join("scene_000.png");
    let sketch = image::open(&sketch_png).unwrap().to_luma8();
    let right_sketch = image::imageops::crop_imm(&sketch, 16, 0, 16, 16).to_image();
    let right_sketch_png = dir.path().join("sketch.png");
    right_sketch.save(&right_sketch_png).unwrap();
    let out2 = dir.path().join("guided.png");
    let o = rego(&[
        "infer",
        "--checkpoint",
        s(&ckpt),
        "--left",
        s(&left_png),
        "--sketch",
        s(&right_sketch_png),
        "--index",
        s(&data.join("index.json")),
        "--out",
        s(&out2),
    ]);
    assert_eq!(code(&o), 0, "{o:?}");
    let used = stdout(&o);
    assert!(used.contains("reference_id_used: scene_000"), "{used}");

    // an explicit reference image
    let reference = data.join("images").join("scene_003.png");
    let o = rego(&["infer", "--checkpoint", s(&ckpt), "--left", s(&left_png), "--reference", s(&reference), "--out", s(&out2)]);
    assert_eq!(code(&o), 0, "{o:?}");
    assert!(stdout(&o).contains("reference_id_used: scene_003"));

    // a left half of the wrong size is a shape/config failure
    let wrong = dir.path().join("wrong.png");
    toy::scenery(1, 16, 32).save(&wrong).unwrap();
    let o = rego(&["infer", "--checkpoint", s(&ckpt), "--left", s(&wrong), "--out", s(&out2)]);
    assert_eq!(code(&o), 4);
}

#[test]
fn eval_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path());
    let report = dir.path().join("report.json");
    let o = rego(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--references", s(&data), "--out", s(&report)]);
    assert_eq!(code(&o), 0, "{o:?}");
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(v["fid"].as_f64().unwrap() >= 0.0);
    assert!(v["is"].as_f64().unwrap() >= 1.0 - 1e-12);
    assert_eq!(v["n_samples"], 6);
}
