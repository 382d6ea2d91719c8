use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[data]
image_size = 16
frames = 6
video_len = 20
kinds = ["orbit", "pan"]
train_scenes = 2
clips_per_scene = 2
eval_scenes = 2

[model]
dim = 16
semantic_layers = 1
blocks = 1

[train]
steps = 3
batch = 2

[sample]
ddim_steps = 3
"#;

fn camctx(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_camctx")).args(args).output().expect("spawn camctx");
    assert!(
        out.status.success(),
        "camctx {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path.display().to_string()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn synth_writes_frames_poses_and_captions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("synth");
    camctx(&["synth", "--config", &cfg, "--out", &s(&out)]);
    assert!(out.join("config.toml").exists());
    assert!(out.join("codec.json").exists());
    let scenes: Vec<_> = std::fs::read_dir(out.join("train")).unwrap().collect();
    assert_eq!(scenes.len(), 2);
    let scene = scenes[0].as_ref().unwrap().path();
    assert!(scene.join("frame_000.ppm").exists());
    assert!(scene.join("frame_019.ppm").exists());
    let poses = std::fs::read_to_string(scene.join("poses.txt")).unwrap();
    assert_eq!(poses.lines().filter(|l| !l.starts_with('#')).count(), 20);
    assert!(!std::fs::read_to_string(scene.join("caption.txt")).unwrap().trim().is_empty());
}

#[test]
fn train_sample_eval_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = dir.path().join("run");
    camctx(&["train", "--config", &cfg, "--out", &s(&run)]);
    let ckpt = run.join("model.ckpt");
    assert!(ckpt.exists());
    let loss = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 3);

    let eval = dir.path().join("eval");
    let stdout = camctx(&["eval", "--out", &s(&eval), "--checkpoint", &s(&ckpt), "--ctx-strategy", "furthest"]).stdout;
    assert!(!stdout.is_empty());
    let metrics = std::fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert!(metrics.contains("furthest"));

    let sample = dir.path().join("sample");
    camctx(&["sample", "--out", &s(&sample), "--checkpoint", &s(&ckpt)]);
    assert!(sample.join("clips/clip_00/gen_05.ppm").exists());
    assert!(sample.join("clips/clip_00/gt_00.ppm").exists());

    let summary = dir.path().join("summary.csv");
    camctx(&["report", &s(&eval.join("metrics.csv")), "--late-from", "3", "--out", &s(&summary)]);
    assert_eq!(std::fs::read_to_string(summary).unwrap().lines().count(), 2);
}

#[test]
fn mask_viz_writes_one_image_per_frame_and_view() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("masks");
    camctx(&["mask-viz", "--config", &cfg, "--out", &s(&out), "--ctx-n", "2"]);
    let n = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".pgm"))
        .count();
    assert_eq!(n, 6 * 2);
}

#[test]
fn invalid_overrides_are_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_camctx"))
        .args(["run", "--ctx-n", "0"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
