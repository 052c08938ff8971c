use std::path::Path;
use std::process::{Command, Output};

fn kdpl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdpl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("KDPL_DATA_ROOT")
        .env_remove("KDPL_CACHE_ROOT")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let text = format!(
        r#"
name = "cli"
method = "coop"
objective = "kdpl"
scenario = "cross_dataset"
source = "synth"
targets = ["synth_cross1"]
seeds = [1]
shots = 2
output_dir = {:?}
{extra}

[coop]
epochs = 2

[synthetic]
train_per_class = 4
val_per_class = 1
test_per_class = 3
distractors = 10
"#,
        dir.join("out").display().to_string()
    );
    let path = dir.join("cfg.toml");
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_eval_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = kdpl(&["train", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("out");
    for f in ["manifest.json", "results.csv", "summary.md", "comparison.svg", "run_stats.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(String::from_utf8_lossy(&o.stdout).contains("coop+kdpl"));

    let o = kdpl(&["eval", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        std::fs::read_to_string(out.join("eval_results.csv")).unwrap(),
        std::fs::read_to_string(out.join("results.csv")).unwrap()
    );

    let svg = dir.path().join("p.svg");
    let results = out.join("results.csv");
    let o = kdpl(&["plot", results.to_str().unwrap(), results.to_str().unwrap(), "-o", svg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(std::fs::read_to_string(&svg).unwrap().contains("data-value"));
}

#[test]
fn invalid_config_exits_2_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = kdpl(&["train", &cfg, "--set", "objective=ca_kdpl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("vocabulary"));
    assert!(!dir.path().join("out").exists());
    let o = kdpl(&["train", &cfg, "--set", "coop.epoch=3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn failed_seed_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    // a source without training images fails every seed at training time
    let cfg = write_config(dir.path(), "");
    let o = kdpl(&["train", &cfg, "--set", "synthetic.train_per_class=0"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn checkpoint_run_from_synth_export() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = kdpl(&["synth", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cfg = write_config(
        dir.path(),
        r#"student = "student.safetensors"
teacher = "teacher.safetensors"
vocabulary = "vocab.txt"
"#,
    );
    let root = data.to_str().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_kdpl"))
        .args(["cache", "warm", &cfg])
        .env("KDPL_DATA_ROOT", root)
        .env("KDPL_CACHE_ROOT", dir.path().join("cache"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = Command::new(env!("CARGO_BIN_EXE_kdpl"))
        .args(["train", &cfg, "--set", "objective=ca_kdpl", "--set", "top_k=20"])
        .env("KDPL_DATA_ROOT", root)
        .env("KDPL_CACHE_ROOT", dir.path().join("cache"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}
