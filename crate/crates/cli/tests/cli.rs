use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 11

[library]
n_classes = 3
samples_per_class = 6
n_bands = 64

[mixing]
models = ["LMM", "SM"]
n_endmembers = 2
n_combos = 3
n_weights = 4

[nhmc]
k_grid = [2, 3]
n_scales = 4

[nhmc.em]
max_iters = 15

[detector]
attenuation = [0.5, 1.0]
k_features = [1, 2, 4]

[baseline]
sunsal_lambdas = [0.0, 0.001]
clsunsal_lambdas = [0.001]
n_thresholds = 5
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_endmember"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn sorted_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn report_writes_every_table_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let a = run(tmp.path(), &["report", "--config", &cfg, "--out", "a"]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let stdout = String::from_utf8_lossy(&a.stdout);
    assert!(stdout.contains("NHMC-ED") && stdout.contains("SUnSAL"));

    let out = tmp.path().join("a");
    for name in ["summary.csv", "table_iii.csv", "table_iv.csv", "per_class.csv", "ns_bins.csv", "model_k2.json", "model_k3.json"] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("# config_hash="));
    // header comment, column row, then 6 methods x 2 models
    assert_eq!(summary.lines().count(), 14);
    let bins = fs::read_to_string(out.join("ns_bins.csv")).unwrap();
    assert_eq!(bins.lines().count(), 2 + 11);

    let b = run(tmp.path(), &["report", "--config", &cfg, "--out", "b"]);
    assert!(b.status.success());
    assert_eq!(sorted_files(&out), sorted_files(&tmp.path().join("b")));
}

#[test]
fn stages_run_separately_with_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let common = ["--config", cfg.as_str(), "--out", "o", "--k", "2", "--model", "SM"];
    for verb in ["simulate", "train", "detect", "evaluate"] {
        let mut args = vec![verb];
        args.extend(common);
        let o = run(tmp.path(), &args);
        assert!(o.status.success(), "{verb}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let out = tmp.path().join("o");
    assert!(out.join("model_k2.json").exists());
    assert!(!out.join("model_k3.json").exists());
    assert!(out.join("mixtures_SM.csv").exists());
    assert!(!out.join("mixtures_LMM.csv").exists());
    let decisions = fs::read_to_string(out.join("decisions_k2_SM.csv")).unwrap();
    let rows: Vec<&str> = decisions.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0].split(',').count(), 1 + 3 + 3 + 1);
    assert_eq!(rows.len(), 1 + 12);
}

#[test]
fn validation_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_config(tmp.path(), "[library]\nno_such_key = 3\n");
    assert_eq!(run(tmp.path(), &["simulate", "--config", &bad]).status.code(), Some(1));
    assert_eq!(run(tmp.path(), &["simulate", "--model", "XYZ"]).status.code(), Some(1));
    assert_eq!(run(tmp.path(), &["simulate", "--config", "missing.toml"]).status.code(), Some(1));
    assert_eq!(run(tmp.path(), &["frobnicate"]).status.code(), Some(1));
    let cfg = write_config(tmp.path(), SMALL);
    // training before simulation has no library to read
    assert_eq!(run(tmp.path(), &["train", "--config", &cfg, "--out", "empty"]).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let args = ["--config", cfg.as_str(), "--out", "o", "--k", "2", "--model", "LMM"];
    for verb in ["simulate", "train"] {
        let mut a = vec![verb];
        a.extend(args);
        assert!(run(tmp.path(), &a).status.success());
    }
    fs::write(tmp.path().join("o/model_k2.json"), "{ not json").unwrap();
    let mut a = vec!["detect"];
    a.extend(args);
    assert_eq!(run(tmp.path(), &a).status.code(), Some(2));
}

#[test]
fn help_exits_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["--help"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("simulate"));
}
