use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use capl_core::checkpoint::Checkpoint;
use capl_core::Role;
use sha2::{Digest, Sha256};

const SMALL: &str = r#"{
  "scene": {"height": 16, "width": 16, "train_scenes": 24, "support_per_class": 6, "test_scenes": 10},
  "train": {"steps": 6, "embed_dim": 6, "layers": 2, "batch_size": 4},
  "protocol": {"seeds": [123, 321], "episodes": 10}
}"#;

fn capl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capl"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = capl(args, cwd);
    assert!(
        out.status.success(),
        "capl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    capl(args, cwd).status.code().expect("exit code")
}

fn digest(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("cfg.json"), SMALL).unwrap();
        ok(&["synth", "--config", "cfg.json", "--out", "data"], dir.path());
        Self { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn train(&self, variant: &str, out: &str) {
        ok(
            &["train", "--config", "cfg.json", "--data", "data/fold0/manifest.json", "--variant", variant, "--out", out],
            self.path(),
        );
    }
}

fn tree_digest(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), digest(&p)));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_writes_every_fold_reproducibly() {
    let ws = Workspace::new();
    for i in 0..4 {
        assert!(ws.path().join(format!("data/fold{i}/manifest.json")).is_file());
    }
    ok(&["synth", "--config", "cfg.json", "--out", "again"], ws.path());
    assert_eq!(tree_digest(&ws.path().join("data")), tree_digest(&ws.path().join("again")));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), "{\n  \"train\": {\"steps\": }\n}").unwrap();
    let out = capl(&["synth", "--config", "bad.json", "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2") && err.contains("column"), "{err}");

    std::fs::write(dir.path().join("unknown.json"), r#"{"train": {"stepz": 1}}"#).unwrap();
    assert_eq!(code(&["synth", "--config", "unknown.json", "--out", "x"], dir.path()), 2);
    assert_eq!(code(&["synth", "--config", "missing.json", "--out", "x"], dir.path()), 3);
}

#[test]
fn train_register_predict_eval_round_trip() {
    let ws = Workspace::new();
    ws.train("baseline", "base.ckpt");
    ws.train("capl", "capl.ckpt");
    let base = Checkpoint::load(&ws.path().join("base.ckpt")).unwrap();
    let full = Checkpoint::load(&ws.path().join("capl.ckpt")).unwrap();
    assert!(base.gamma.is_none());
    assert!(full.gamma.is_some());
    assert_eq!(full.step, 6);
    let csv = std::fs::read_to_string(ws.path().join("capl.loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.starts_with("step,l_cls,l_update,loss,mean_gamma"));

    let before = digest(&ws.path().join("capl.ckpt"));
    let register = ["register", "--model", "capl.ckpt", "--data", "data/fold0/manifest.json", "--shots", "1", "--seed", "5"];
    ok(&[&register[..], &["--out", "reg1.ckpt"]].concat(), ws.path());
    ok(&[&register[..], &["--out", "reg2.ckpt"]].concat(), ws.path());
    assert_eq!(digest(&ws.path().join("reg1.ckpt")), digest(&ws.path().join("reg2.ckpt")));
    let reg = Checkpoint::load(&ws.path().join("reg1.ckpt")).unwrap();
    assert_eq!(reg.classifier.len(), full.classifier.len() + 2);
    assert_eq!(reg.classifier.ids_with_role(Role::Novel), vec![1, 2]);
    assert_eq!(digest(&ws.path().join("capl.ckpt")), before);

    ok(
        &["predict", "--model", "reg1.ckpt", "--image", "data/fold0/test/0000.ppm", "--out", "m.pgm", "--logits", "z.bin"],
        ws.path(),
    );
    let mask = capl_core::pnm::read_pgm(&ws.path().join("m.pgm")).unwrap();
    assert_eq!((mask.height(), mask.width()), (16, 16));
    let z = std::fs::read(ws.path().join("z.bin")).unwrap();
    let header: Vec<u32> = z[..12].chunks(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect();
    assert_eq!(header, vec![16, 16, 9]);
    assert_eq!(z.len(), 12 + 4 * 16 * 16 * 9);

    ok(&["eval", "--model", "capl.ckpt", "--data", "data/fold0/manifest.json", "--report", "base.json"], ws.path());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(ws.path().join("base.json")).unwrap()).unwrap();
    assert!(report["mean"]["novel"].is_null());
    assert!(report["mean"]["base"].is_number());

    let eval_k = ["eval", "--model", "capl.ckpt", "--data", "data/fold0/manifest.json", "--shots", "1"];
    ok(&[&eval_k[..], &["--report", "k1.json"]].concat(), ws.path());
    ok(&[&eval_k[..], &["--report", "k1b.json"]].concat(), ws.path());
    assert_eq!(digest(&ws.path().join("k1.json")), digest(&ws.path().join("k1b.json")));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(ws.path().join("k1.json")).unwrap()).unwrap();
    assert_eq!(report["seeds"], serde_json::json!([123, 321, 456, 654, 999]));
    assert!(report["mean"]["novel"].is_number());

    ok(
        &["eval", "--model", "capl.ckpt", "--data", "data/fold0/manifest.json", "--protocol", "fs", "--episodes", "5", "--report", "fs.json"],
        ws.path(),
    );
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(ws.path().join("fs.json")).unwrap()).unwrap();
    assert!(report["class_miou"].is_number());
    assert_eq!(report["episodes"], 5);
}

#[test]
fn stop_and_resume_matches_straight_training() {
    let ws = Workspace::new();
    ws.train("capl_tr", "straight.ckpt");
    let base = ["train", "--config", "cfg.json", "--data", "data/fold0/manifest.json", "--variant", "capl_tr"];
    ok(&[&base[..], &["--stop-at", "2", "--out", "half.ckpt"]].concat(), ws.path());
    assert_eq!(Checkpoint::load(&ws.path().join("half.ckpt")).unwrap().step, 2);
    ok(&[&base[..], &["--resume", "half.ckpt", "--out", "resumed.ckpt"]].concat(), ws.path());
    assert_eq!(digest(&ws.path().join("straight.ckpt")), digest(&ws.path().join("resumed.ckpt")));
    // a checkpoint of a different training kind cannot be resumed
    let wrong = ["train", "--config", "cfg.json", "--data", "data/fold0/manifest.json", "--variant", "capl"];
    assert_eq!(code(&[&wrong[..], &["--resume", "half.ckpt", "--out", "x.ckpt"]].concat(), ws.path()), 2);
}

#[test]
fn failure_classes_map_to_exit_codes() {
    let ws = Workspace::new();
    ws.train("baseline", "base.ckpt");
    let p = ws.path();
    assert_eq!(code(&["predict", "--model", "nope.ckpt", "--image", "data/fold0/test/0000.ppm", "--out", "m.pgm"], p), 3);
    std::fs::write(p.join("junk.ppm"), b"P3\n1 1\n255\n0 0 0\n").unwrap();
    assert_eq!(code(&["predict", "--model", "base.ckpt", "--image", "junk.ppm", "--out", "m.pgm"], p), 3);
    let mut bytes = std::fs::read(p.join("base.ckpt")).unwrap();
    bytes[40] ^= 0x10;
    std::fs::write(p.join("corrupt.ckpt"), bytes).unwrap();
    assert_eq!(code(&["predict", "--model", "corrupt.ckpt", "--image", "data/fold0/test/0000.ppm", "--out", "m.pgm"], p), 3);
    // more shots than the support pool holds
    assert_eq!(
        code(&["register", "--model", "base.ckpt", "--data", "data/fold0/manifest.json", "--shots", "500", "--out", "r.ckpt"], p),
        5
    );
    std::fs::write(p.join("hot.json"), r#"{"scene": {"height": 16, "width": 16}, "train": {"steps": 20, "lr": 1e200, "embed_dim": 6, "layers": 2, "batch_size": 4}}"#).unwrap();
    assert_eq!(
        code(&["train", "--config", "hot.json", "--data", "data/fold0/manifest.json", "--variant", "baseline", "--out", "h.ckpt"], p),
        4
    );
    assert!(!p.join("h.ckpt").exists());
}

#[test]
fn ablation_runs_and_reuses_its_cache() {
    let ws = Workspace::new();
    let args = [
        "ablate", "--config", "cfg.json", "--data", "data/fold2/manifest.json", "--variants", "baseline,capl_te",
        "--shots-list", "1", "--seeds", "123", "--cache", "cache",
    ];
    ok(&[&args[..], &["--out", "a.csv"]].concat(), ws.path());
    ok(&[&args[..], &["--out", "b.csv"]].concat(), ws.path());
    let a = std::fs::read_to_string(ws.path().join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read_to_string(ws.path().join("b.csv")).unwrap());
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], "variant,shots,seed,base,novel,total");
    assert_eq!(lines.len(), 1 + 2 * 2);
    assert!(lines[1].starts_with("baseline,1,123,"));
    assert!(lines[2].starts_with("baseline,1,mean,"));
    // capl_te borrows γ from a full model, so both kinds were cached
    assert_eq!(std::fs::read_dir(ws.path().join("cache")).unwrap().count(), 2);
}

#[test]
fn gradcheck_exit_code_tracks_the_result() {
    let dir = tempfile::tempdir().unwrap();
    let out = capl(&["gradcheck"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("dual_loss") && text.contains("all passed"));
    assert_eq!(code(&["gradcheck", "--corrupt", "l2_normalize"], dir.path()), 4);
    assert_eq!(code(&["gradcheck", "--corrupt", "dual_loss"], dir.path()), 4);
    assert_eq!(code(&["gradcheck", "--corrupt", "no_such_op"], dir.path()), 2);
}
