use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sphere-laplace"))
}

fn run(args: &[&str]) -> std::process::Output {
    bin().args(args).output().expect("binary runs")
}

/// A small, fast configuration for the pipeline commands.
fn write_small_config(dir: &Path) -> String {
    let mut cfg = serde_json::to_value(sphere_laplace::harness::RunConfig::default()).unwrap();
    cfg["data"]["per_class"] = 20.into();
    cfg["train"]["steps"] = 20.into();
    cfg["online"]["steps"] = 20.into();
    cfg["online"]["mining"] = serde_json::json!({"n_pos": 50, "n_neg": 50});
    cfg["train"]["mining"] = serde_json::json!({"n_pos": 50, "n_neg": 50});
    cfg["eval"]["n_samples"] = 10.into();
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn verify_on_defaults_exits_zero() {
    let out = run(&["verify"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn eval_without_checkpoint_is_a_usage_error() {
    let out = run(&["eval", "--train", "a.csv", "--test", "b.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_files_and_bad_configs_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = run(&["eval", "--checkpoint", missing.to_str().unwrap(), "--train", "a.csv", "--test", "b.csv"]);
    assert_eq!(out.status.code(), Some(1));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"format_version\": 1").unwrap();
    let out = run(&["gen-data", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

fn pipeline_report(dir: &Path, cfg: &str) -> (Value, Value) {
    let d = dir.to_str().unwrap();
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
    let ok = |args: &[&str]| {
        let out = run(args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    ok(&["gen-data", "--config", cfg, "--out", d]);
    ok(&["train-online", "--config", cfg, "--train", &p("train.csv"), "--out", &p("online.json")]);
    ok(&["train-map", "--config", cfg, "--train", &p("train.csv"), "--out", &p("map.json")]);
    ok(&["laplace-posthoc", "--config", cfg, "--train", &p("train.csv"), "--checkpoint", &p("map.json"), "--out", &p("posthoc.json")]);
    ok(&["embed", "--config", cfg, "--checkpoint", &p("online.json"), "--input", &p("test.csv"), "--out", &p("embed.json")]);
    ok(&["eval", "--config", cfg, "--checkpoint", &p("online.json"), "--train", &p("train.csv"), "--test", &p("test.csv"), "--out", &p("eval.json")]);
    ok(&["ood-eval", "--config", cfg, "--checkpoint", &p("posthoc.json"), "--test", &p("test.csv"), "--ood", &p("ood.csv"), "--out", &p("ood.json")]);
    let read = |name: &str| -> Value { serde_json::from_str(&std::fs::read_to_string(dir.join(name)).unwrap()).unwrap() };
    let embed = read("embed.json");
    assert_eq!(embed.as_array().unwrap().len(), 60);
    let mut eval = read("eval.json");
    let mut ood = read("ood.json");
    for r in [&mut eval, &mut ood] {
        assert!(r["report"]["timestamp"].is_u64());
        r["report"]["timestamp"] = Value::Null;
    }
    (eval, ood)
}

#[test]
fn pipeline_is_deterministic_modulo_timestamp() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg_a = write_small_config(a.path());
    let cfg_b = write_small_config(b.path());
    let first = pipeline_report(a.path(), &cfg_a);
    let second = pipeline_report(b.path(), &cfg_b);
    assert_eq!(first, second);
    let report = &first.0["report"];
    assert_eq!(report["seed"], 42);
    assert!(report["config_hash"].as_str().unwrap().len() == 64);
    assert!(report["software_version"].is_string());
    assert!(first.1["report"]["auroc"].is_f64());
    assert_eq!(
        std::fs::read(a.path().join("train.csv")).unwrap(),
        std::fs::read(b.path().join("train.csv")).unwrap()
    );
}

#[test]
fn seed_flag_changes_the_data() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(run(&["gen-data", "--out", a.path().to_str().unwrap()]).status.success());
    assert!(run(&["gen-data", "--seed", "7", "--out", b.path().to_str().unwrap()]).status.success());
    assert_ne!(
        std::fs::read(a.path().join("train.csv")).unwrap(),
        std::fs::read(b.path().join("train.csv")).unwrap()
    );
}
