//! Runs the `intensim` binary end to end on tiny synthetic data.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
arch = unet
combo = D+L+I
frames = 8
split = 4,2,2
epochs = 1
batch_size = 2
base_width = 4
height = 32
width = 128
";

fn intensim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_intensim"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("spawn intensim")
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    dir
}

#[test]
fn unknown_key_exits_with_config_code() {
    let dir = workspace();
    let out = intensim(dir.path(), &["--config", "tiny.cfg", "--set", "epoch=3", "train"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_scan_exits_with_data_code() {
    let dir = workspace();
    let out = intensim(dir.path(), &["angles", "--scan", "nope.bin", "--out", "a.csv"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn divergent_training_exits_with_fault_code() {
    let dir = workspace();
    let out = intensim(dir.path(), &["--config", "tiny.cfg", "--set", "lr=1e39", "train", "--out", "run"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(dir.path().join("run/fault.txt").exists());
}

#[test]
fn synth_then_project_and_angles() {
    let dir = workspace();
    ok(intensim(dir.path(), &["--config", "tiny.cfg", "synth", "--out", "data", "--frames", "2"]));
    for f in ["000000.bin", "000000.label", "000000.angles.csv", "000001.bin", "frames.txt"] {
        assert!(dir.path().join("data").join(f).exists(), "{f}");
    }
    ok(intensim(
        dir.path(),
        &[
            "--config", "tiny.cfg", "project", "--scan", "data/000000.bin", "--labels",
            "data/000000.label", "--incidence", "--out", "p.lsi", "--depth-pgm", "d.pgm",
        ],
    ));
    let packed = intensim::formats::PackedPlanes::load(&dir.path().join("p.lsi")).unwrap();
    assert_eq!((packed.height, packed.width), (32, 128));
    assert!(packed.plane("incidence").is_some());
    assert!(packed.plane("label").is_some());
    assert!(std::fs::read(dir.path().join("d.pgm")).unwrap().starts_with(b"P5"));

    ok(intensim(dir.path(), &["angles", "--scan", "data/000000.bin", "--out", "a.csv"]));
    let csv = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
    let analytic = std::fs::read_to_string(dir.path().join("data/000000.angles.csv")).unwrap();
    assert_eq!(csv.lines().count(), analytic.lines().count());
}

#[test]
fn train_from_frame_list_and_evaluate() {
    let dir = workspace();
    ok(intensim(dir.path(), &["--config", "tiny.cfg", "synth", "--out", "data"]));
    let list = ["--config", "tiny.cfg", "--set", "frame_list=data/frames.txt"];
    let with = |rest: &[&str]| -> Vec<String> { list.iter().chain(rest).map(|s| s.to_string()).collect() };
    let run = |rest: &[&str]| {
        let args = with(rest);
        ok(intensim(dir.path(), &args.iter().map(String::as_str).collect::<Vec<_>>()))
    };
    run(&["train", "--out", "run"]);
    for f in ["best.ckpt", "final.ckpt", "metrics.csv", "config.txt"] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }
    run(&["eval", "--checkpoint", "run/best.ckpt", "--out", "eval.csv"]);
    let eval = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert!(eval.starts_with("frame,masked_mse\n"));
    assert_eq!(eval.lines().count(), 1 + 2 + 1);

    run(&["histogram", "--checkpoint", "run/best.ckpt", "--bins", "11", "--out", "h.csv"]);
    let hist = std::fs::read_to_string(dir.path().join("h.csv")).unwrap();
    assert_eq!(hist.lines().count(), 12);

    run(&["heatmap", "--checkpoint", "run/best.ckpt", "--out", "h.pgm"]);
    assert!(dir.path().join("h.lsi").exists());

    run(&["render", "--checkpoint", "run/best.ckpt", "--reference", "r.png", "--predicted", "p.png"]);
    assert!(dir.path().join("p.png").exists());

    let out = run(&["ablation", "--checkpoint", "run/best.ckpt", "--wide"]);
    let table = String::from_utf8(out.stdout).unwrap();
    let mut lines = table.lines();
    assert_eq!(
        lines.next().unwrap(),
        "architecture,dataset,D,D+I,D+L,D+L+I,D+RGB,D+RGB+I,D+RGB+L,D+RGB+L+I"
    );
    assert_eq!(lines.count(), 1);
}
