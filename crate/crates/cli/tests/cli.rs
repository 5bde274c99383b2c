use std::path::Path;
use std::process::{Command, Output};

fn mde(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mde")).current_dir(dir).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn gen_data_is_deterministic_and_validates_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&mde(d, &["gen-data", "--n", "4", "--seed", "0", "--overlap", "0.5", "--out", "a"])), 0);
    assert_eq!(code(&mde(d, &["gen-data", "--n", "4", "--seed", "0", "--overlap", "0.5", "--out", "b"])), 0);
    for i in 0..4 {
        for ext in ["png", "json", "masks/shape_0.png"] {
            let f = format!("scene_{i:05}.{ext}");
            assert_eq!(std::fs::read(d.join("a").join(&f)).unwrap(), std::fs::read(d.join("b").join(&f)).unwrap());
        }
    }
    assert!(d.join("a/manifest.json").exists());
    assert_eq!(code(&mde(d, &["gen-data", "--n", "4", "--out", "a"])), 2);
    assert_eq!(code(&mde(d, &["gen-data", "--n", "4", "--out", "a", "--force"])), 0);
    assert_eq!(code(&mde(d, &["gen-data", "--overlap", "1.5", "--out", "c"])), 2);
    assert!(!d.join("c").exists());
}

#[test]
fn help_lists_flags_and_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = mde(dir.path(), &["edit", "--help"]);
    let text = String::from_utf8(o.stdout).unwrap();
    for flag in ["--lambda1", "--lambda2", "--delta", "--opt-window", "--steps", "[default: 1.25]", "[default: 20]"] {
        assert!(text.contains(flag), "missing {flag}");
    }
}

fn write_session(d: &Path, extra: &str) {
    assert_eq!(code(&mde(d, &["demo", "--out", "demo", "--steps", "4", "--force"])), 0);
    let mut session: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("demo/session.json")).unwrap()).unwrap();
    session["steps"] = 4.into();
    session["opt_window"] = 2.into();
    if !extra.is_empty() {
        session["edits"][0]["mask_path"] = extra.into();
    }
    std::fs::write(d.join("demo/run.json"), session.to_string()).unwrap();
}

#[test]
fn edit_writes_outputs_atomically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_session(d, "");
    let o = mde(d, &["edit", "--config", "demo/run.json", "--out", "out", "--lambda2", "0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["edited.png", "reconstruction.png", "losses.jsonl", "report.json", "manifest.json"] {
        assert!(d.join("out").join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["lambda2"], 0.0);
    assert_eq!(manifest["config"]["steps"], 4);
    let log = std::fs::read_to_string(d.join("out/losses.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["ccl"], 0.0);
    }

    write_session(d, "missing.png");
    let o = mde(d, &["edit", "--config", "demo/run.json", "--out", "broken"]);
    assert_eq!(code(&o), 3);
    let diag: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert!(diag["message"].is_string());
    assert!(!d.join("broken").exists());
}

#[test]
fn eval_scores_an_identical_pair() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&mde(d, &["demo", "--out", "demo", "--steps", "2"])), 0);
    let o = mde(
        d,
        &[
            "eval",
            "--original",
            "demo/original.png",
            "--edited",
            "demo/original.png",
            "--mask",
            "missing.png",
            "--out",
            "r.json",
        ],
    );
    assert_eq!(code(&o), 3);
    let o = mde(
        d,
        &[
            "eval",
            "--original",
            "demo/original.png",
            "--edited",
            "demo/original.png",
            "--mask",
            "demo/mask_0.png",
            "--mask",
            "demo/mask_1.png",
            "--out",
            "r.json",
            "--csv",
            "s.csv",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(r["bg_ssim"], 1.0);
    assert_eq!(r["bg_perceptual"]["value"], 0.0);
    let o = mde(
        d,
        &[
            "eval",
            "--original",
            "demo/original.png",
            "--edited",
            "demo/edited.png",
            "--mask",
            "demo/mask_0.png",
            "--mask",
            "demo/mask_1.png",
            "--id",
            "second",
            "--out",
            "r2.json",
            "--csv",
            "s.csv",
        ],
    );
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(d.join("s.csv")).unwrap();
    assert!(csv.starts_with("id,bg_ssim,bg_perceptual,alignment,success_rate"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn ablate_validates_its_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::create_dir(d.join("empty")).unwrap();
    assert_eq!(code(&mde(d, &["ablate", "--data", "empty"])), 2);
    assert_eq!(code(&mde(d, &["ablate", "--settings", "1,7"])), 2);
}

#[test]
fn train_toy_writes_a_loadable_checkpoint_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&mde(d, &["gen-data", "--n", "8", "--out", "data"])), 0);
    let small = ["--epochs", "1", "--batch-size", "4", "--held-out", "2"];
    let o = mde(d, &[&["train-toy", "--data", "data", "--out", "a.ckpt"][..], &small].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(d.join("a.log.jsonl")).unwrap().lines().count(), 2);
    assert!(d.join("a.manifest.json").exists());
    let o = mde(d, &[&["train-toy", "--data", "data", "--out", "b.ckpt", "--init", "a.ckpt"][..], &small].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = mde(
        d,
        &[
            "invert",
            "--checkpoint",
            "b.ckpt",
            "--image",
            "data/scene_00000.png",
            "--prompt",
            "a red circle",
            "--steps",
            "2",
            "--nti-iters",
            "0",
            "--out",
            "s.traj",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&mde(d, &["train-toy", "--data", "data", "--out", "c.ckpt", "--init", "missing.ckpt"])), 3);
}
