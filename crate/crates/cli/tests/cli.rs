use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
variant = "fesvibs"
rounds = 2
unify_period = 2
batch_size = 16
eval_every = 1

[optimizer]
lr = 0.001

[data]
train_samples = 90
test_samples = 40
clients = 3
"#;

fn fesvibs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fesvibs")).args(args).env("FESVIBS_LOG", "warn").output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn run_tiny(dir: &Path, extra: &str, out: &str) -> Output {
    let cfg = write_config(dir, "c.toml", &format!("{TINY}{extra}"));
    let out = dir.join(out);
    fesvibs(&["run", "--config", &cfg, "--out", out.to_str().unwrap()])
}

#[test]
fn zero_rounds_writes_initial_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &TINY.replace("rounds = 2", "rounds = 0"));
    let out = dir.path().join("r0");
    let o = fesvibs(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["schema_version"], 1);
    assert_eq!(summary["final"]["round"], 0);
    assert_eq!(summary["init"], summary["final"]);
    assert_eq!(std::fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 1);
}

#[test]
fn runs_are_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let o = run_tiny(dir.path(), "", name);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let csv = |n: &str| std::fs::read(dir.path().join(n).join("metrics.csv")).unwrap();
    assert_eq!(csv("a"), csv("b"));
    let text = String::from_utf8(csv("a")).unwrap();
    assert_eq!(text.lines().count(), 2 * 3 + 1);
    let ck = |n: &str| std::fs::read(dir.path().join(n).join("checkpoint.fsvc")).unwrap();
    assert_eq!(ck("a"), ck("b"));
}

#[test]
fn seed_override_changes_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(fesvibs(&["run", "--config", &cfg, "--out", a.to_str().unwrap()]).status.success());
    assert!(fesvibs(&["run", "--config", &cfg, "--seed-override", "9", "--out", b.to_str().unwrap(), "--emit-plots"]).status.success());
    assert_ne!(std::fs::read(a.join("metrics.csv")).unwrap(), std::fs::read(b.join("metrics.csv")).unwrap());
    assert!(b.join("learning_curve.svg").exists());
    assert!(!a.join("learning_curve.svg").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_tiny(dir.path(), "typo_key = 1\n", "x");
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("typo_key"));

    let cfg = write_config(dir.path(), "bad.toml", &TINY.replace("unify_period = 2", "unify_period = 0"));
    let o = fesvibs(&["run", "--config", &cfg, "--out", dir.path().join("y").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unify_period"));
    assert!(!dir.path().join("y").join("metrics.csv").exists());

    let o = fesvibs(&["run", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn generate_inspect_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("test.fsvb");
    let o = fesvibs(&["generate-data", "--out", data.to_str().unwrap(), "--samples", "40", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = fesvibs(&["inspect", data.to_str().unwrap()]);
    assert!(o.status.success());
    let info: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(info["kind"], "dataset");
    assert_eq!(info["samples"], 40);
    assert_eq!(info["class_counts"], serde_json::json!([10, 10, 10, 10]));

    assert!(run_tiny(dir.path(), "", "run").status.success());
    let ckpt = dir.path().join("run").join("checkpoint.fsvc");
    let o = fesvibs(&["inspect", ckpt.to_str().unwrap()]);
    let info: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(info["kind"], "checkpoint");
    assert_eq!(info["header"]["round"], 2);

    let o = fesvibs(&["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rep: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rep["per_client"].as_array().unwrap().len(), 3);
    let mean = rep["mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mean));

    // A dataset of the wrong image size is a configuration problem.
    let wrong = dir.path().join("wrong.fsvb");
    assert!(fesvibs(&["generate-data", "--out", wrong.to_str().unwrap(), "--samples", "8", "--image", "1,8,8"]).status.success());
    let o = fesvibs(&["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--data", wrong.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn corrupt_inputs_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not a file we know").unwrap();
    assert_eq!(fesvibs(&["inspect", junk.to_str().unwrap()]).status.code(), Some(3));
    assert!(run_tiny(dir.path(), "", "run").status.success());
    let ckpt = dir.path().join("run").join("checkpoint.fsvc");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    std::fs::write(&ckpt, bytes).unwrap();
    let o = fesvibs(&["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--data", junk.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = fesvibs::harness::ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(cfg.optimizer.lr, 1e-3, "{}", path.display());
        seen += 1;
    }
    assert!(seen >= 2);
}
