use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
method = "static"

[dataset]
count = 40

[base]
steps = 20
batch_size = 32

[siss]
steps = 4
batch_size = 8

[eval]
samples = 100
"#;

fn run(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_unlearn-forge"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn pipeline_runs_end_to_end() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), "tiny.toml", TINY);
    let runs = root.path().join("runs");
    let out = runs.join("static-7");
    let out_s = out.to_string_lossy().into_owned();
    for verb in ["train-base", "unlearn", "eval"] {
        let o = run(&[verb, "--config", &cfg, "--seed", "7", "--out", &out_s], &[("UNLEARN_FORGE_THREADS", "1")]);
        assert!(o.status.success(), "{verb}: {}", stderr(&o));
    }
    for f in ["base.uftc", "model.uftc", "steps.csv", "metrics.json", "samples.csv", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config"]["siss"]["lambda"], 0.5);
    assert_eq!(manifest["commands"].as_array().unwrap().len(), 3);

    let metrics = fs::read(out.join("metrics.json")).unwrap();
    let o = run(&["eval", "--out", &out_s], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(out.join("metrics.json")).unwrap(), metrics);

    let o = run(&["report", "--out", &runs.to_string_lossy()], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["report.csv", "report.json", "scatter_static.svg"] {
        assert!(runs.join(f).exists(), "{f}");
    }
}

#[test]
fn missing_base_exits_2() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), "tiny.toml", TINY);
    let out = root.path().join("empty");
    let o = run(&["unlearn", "--config", &cfg, "--out", &out.to_string_lossy()], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing prerequisite"), "{}", stderr(&o));
    let o = run(&["train-base", "--config", &root.path().join("nope.toml").to_string_lossy()], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_3_with_step() {
    let root = tempfile::tempdir().unwrap();
    let text = TINY.replace("batch_size = 32", "batch_size = 32\nlr = 1e300\ncosine_decay = false");
    let cfg = write_config(root.path(), "bad.toml", &text);
    let o = run(&["train-base", "--config", &cfg, "--out", &root.path().to_string_lossy()], &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("at step"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_1_with_line() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), "bad.toml", "[siss]\nlambda = 1.5\n");
    let o = run(&["unlearn", "--config", &cfg], &[]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("line 2") && err.contains("siss.lambda"), "{err}");

    let cfg = write_config(root.path(), "ok.toml", TINY);
    let o = run(&["train-base", "--config", &cfg], &[("UNLEARN_FORGE_THREADS", "0")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("UNLEARN_FORGE_THREADS"));
}
