use std::path::Path;
use std::process::{Command, Output};

fn lumigs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lumigs"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn cli")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&lumigs(&[])), 1);
    assert_eq!(code(&lumigs(&["frobnicate"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert_eq!(code(&lumigs(&["synth", "--size", "12by12", "--out", s(&out)])), 1);
    assert_eq!(code(&lumigs(&["synth", "--preset", "sepia", "--out", s(&out)])), 1);
    assert_eq!(code(&lumigs(&["--help"])), 0);
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let out = dir.path().join("out");
    assert_eq!(code(&lumigs(&["train", "--data", s(&missing), "--out", s(&out)])), 2);
    assert_eq!(
        code(&lumigs(&["eval", "--pred", s(&missing), "--gt", s(&missing), "--out", s(&out.join("m.csv"))])),
        2
    );
    let ckpt = dir.path().join("bad.bin");
    std::fs::write(&ckpt, b"not a checkpoint").unwrap();
    assert_eq!(
        code(&lumigs(&["render", "--ckpt", s(&ckpt), "--cameras", s(&missing), "--out", s(&out)])),
        2
    );
}

#[test]
fn synth_train_render_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let renders = dir.path().join("renders");
    let metrics = dir.path().join("metrics.csv");

    let synth = lumigs(&[
        "synth", "--preset", "lowlight", "--views", "2", "--test-views", "1", "--size", "12x12", "--out", s(&data),
    ]);
    assert_eq!(code(&synth), 0, "{}", String::from_utf8_lossy(&synth.stderr));

    let train = lumigs(&[
        "train", "--data", s(&data), "--out", s(&run),
        "--set", "iterations=4", "--set", "init_gaussians=20", "--set", "checkpoint_interval=2",
    ]);
    assert_eq!(code(&train), 0, "{}", String::from_utf8_lossy(&train.stderr));
    assert!(run.join("checkpoint.bin").is_file());
    assert!(run.join("train_log.csv").is_file());
    assert!(run.join("config.txt").is_file());

    let bad_key = lumigs(&["train", "--data", s(&data), "--out", s(&run), "--set", "warp_speed=9"]);
    assert_eq!(code(&bad_key), 1);

    let render = lumigs(&[
        "render", "--ckpt", s(&run.join("checkpoint.bin")), "--cameras", s(&data.join("transforms_test.json")),
        "--out", s(&renders),
    ]);
    assert_eq!(code(&render), 0, "{}", String::from_utf8_lossy(&render.stderr));
    assert!(renders.join("r_000.png").is_file());

    let eval = lumigs(&["eval", "--pred", s(&renders), "--gt", s(&data.join("test")), "--out", s(&metrics)]);
    assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
    let csv = std::fs::read_to_string(&metrics).unwrap();
    assert!(csv.starts_with("view,psnr,ssim,reference\n"));
    assert_eq!(csv.lines().count(), 3);
}
