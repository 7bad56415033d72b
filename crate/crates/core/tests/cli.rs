use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_boltzgen");

const PIPELINE: &str = r#"
seed = 4

[potential]
kind = "double_well"
domain = { lower = [-3.0, -3.0], upper = [3.0, 3.0] }

[langevin]
dt = 0.005
beta = 4.0
x0 = [-1.0, 0.0]
burn_in = 100
thin = 10
n_steps = 5100

[flow]
dim = 2
layers = 2
hidden = 8
output_init_scale = 1.0

[train]
n_epochs = 3
batch_size = 64

[sample]
n = 300

[eval]
n_sub = 100
floor_repeats = 2
transitions = { coord = 0, lo = -0.5, hi = 0.5 }
hist_domain = { lower = [-3.0, -3.0], upper = [3.0, 3.0] }
hist_bins = [8, 8]

[regularize]
nodes = 32
"#;

fn boltzgen(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn report(dir: &Path, command: &str) -> serde_json::Value {
    let text = fs::read_to_string(dir.join("out").join(format!("{command}.report.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn full_pipeline_writes_stamped_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("exp.toml"), PIPELINE).unwrap();
    let run = |args: &[&str]| {
        let out = boltzgen(dir, args);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };
    run(&["simulate", "-c", "exp.toml"]);
    run(&["simulate", "-c", "exp.toml", "--langevin.seed", "99", "--io.samples", "reference.csv"]);
    run(&["train", "-c", "exp.toml"]);
    run(&["sample", "-c", "exp.toml"]);
    let eval = run(&["eval", "-c", "exp.toml"]);
    assert!(String::from_utf8_lossy(&eval.stdout).contains("joint W2"));

    let out = dir.join("out");
    for f in ["langevin.csv", "reference.csv", "flow.json", "losses.csv", "flow_samples.csv", "eval_histogram.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let digest = report(dir, "train")["config_digest"].as_str().unwrap().to_string();
    assert_eq!(digest.len(), 64);
    assert!(fs::read_to_string(out.join("flow.json")).unwrap().contains(&digest));
    assert!(fs::read_to_string(out.join("losses.csv")).unwrap().contains(&digest));
    let resolved = fs::read_to_string(out.join("train.resolved.toml")).unwrap();
    assert!(resolved.contains("seed"));
    assert!(fs::read_to_string(out.join("flow_samples.csv")).unwrap().contains("config_digest"));

    let eval = report(dir, "eval");
    assert!(eval["result"]["w2"]["value"].as_f64().unwrap() > 0.0);
    assert!(eval["result"]["transitions_reference"].is_u64());
}

#[test]
fn reruns_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("exp.toml"), PIPELINE).unwrap();
    let mut seen = Vec::new();
    for _ in 0..2 {
        assert_eq!(code(&boltzgen(dir, &["simulate", "-c", "exp.toml"])), 0);
        seen.push(fs::read(dir.join("out/langevin.csv")).unwrap());
    }
    assert_eq!(seen[0], seen[1]);
    assert_eq!(code(&boltzgen(dir, &["simulate", "-c", "exp.toml", "--seed", "5"])), 0);
    assert_ne!(fs::read(dir.join("out/langevin.csv")).unwrap(), seen[0]);
}

#[test]
fn bad_configs_exit_with_status_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("exp.toml"), PIPELINE).unwrap();
    assert_eq!(code(&boltzgen(dir, &["train", "-c", "exp.toml", "--train.lerning_rate", "0.1"])), 1);
    assert_eq!(code(&boltzgen(dir, &["simulate", "-c", "missing.toml"])), 1);
    assert_eq!(code(&boltzgen(dir, &["moser-compare", "-c", "exp.toml"])), 1);
    assert_eq!(code(&boltzgen(dir, &["simulate", "-c", "exp.toml", "--langevin.dt", "-1.0"])), 1);
    assert_eq!(code(&boltzgen(dir, &["frobnicate"])), 1);
    assert!(!dir.join("out/moser-compare.resolved.toml").exists());
}

#[test]
fn numerical_failures_exit_with_status_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = r#"
[potential]
kind = "diatomic"
domain = { lower = [-3.0, -3.0], upper = [3.0, 3.0] }
charges = [0.5, -0.5]
lj_a = 1.0
lj_b = 1.0

[langevin]
dt = 0.001
beta = 1.0
x0 = [0.0, 0.0]
n_steps = 10
"#;
    fs::write(dir.join("exp.toml"), cfg).unwrap();
    let out = boltzgen(dir, &["simulate", "-c", "exp.toml"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn check_violations_exit_with_status_three() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("exp.toml"), PIPELINE).unwrap();
    assert_eq!(code(&boltzgen(dir, &["regularize-demo", "-c", "exp.toml", "--check"])), 0);
    let strict = boltzgen(dir, &["regularize-demo", "-c", "exp.toml", "--check", "--check.regularize_final_l1", "0.0"]);
    assert_eq!(code(&strict), 3);
    let without_flag = boltzgen(dir, &["regularize-demo", "-c", "exp.toml", "--check.regularize_final_l1", "0.0"]);
    assert_eq!(code(&without_flag), 0);
    assert!(!report(dir, "regularize-demo")["check_violations"].as_array().unwrap().is_empty());
}
