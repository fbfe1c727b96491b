//! End-to-end tests of the cotforge binary: flag handling, config
//! precedence, manifest integrity, and the error contract (single-line JSON
//! events on stderr, exit code 1).

use cotforge::util::sha256_file;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cotforge"));
    // Isolate each test from ambient overrides.
    cmd.env_remove("COTFORGE_SEED");
    cmd.env_remove("COTFORGE_TOLERANCE");
    cmd
}

fn write_file(path: &Path, body: &str) {
    let mut file = std::fs::File::create(path).unwrap();
    write!(file, "{body}").unwrap();
}

fn mock_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    write_file(
        &path,
        concat!(
            "seed = 41\n\n",
            "[backends.solver]\nkind = \"stochastic\"\n",
            "[backends.solver.stochastic]\np_correct = 1.0\nseed = 11\n\n",
            "[backends.checker]\nkind = \"stochastic\"\n",
            "[backends.checker.stochastic]\np_correct = 1.0\nverify_tpr = 0.9\nverify_fpr = 0.1\nseed = 12\n",
        ),
    );
    path
}

fn stderr_events(output: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&output.stderr)
        .lines()
        .map(|line| {
            serde_json::from_str(line)
                .unwrap_or_else(|e| panic!("stderr line is not JSON ({e}): {line}"))
        })
        .collect()
}

fn event_of<'a>(events: &'a [serde_json::Value], kind: &str) -> &'a serde_json::Value {
    events
        .iter()
        .find(|e| e["event"] == kind)
        .unwrap_or_else(|| panic!("no {kind:?} event in {events:?}"))
}

#[test]
fn gen_toy_writes_corpus_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("q.jsonl");
    let output = bin()
        .args(["gen-toy", "--count", "7", "--describe", "--out"])
        .arg(&out)
        .args(["--seed", "5"])
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");

    let body = std::fs::read_to_string(&out).unwrap();
    assert_eq!(body.lines().count(), 7);
    assert!(body.contains("diagram_description"));

    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("q.jsonl.manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["command"], "gen-toy");
    assert_eq!(manifest["seed"], 5);
    assert_eq!(
        manifest["outputs"][out.display().to_string()],
        sha256_file(&out).unwrap()
    );
}

#[test]
fn missing_input_fails_with_json_error_event() {
    let dir = tempfile::tempdir().unwrap();
    let config = mock_config(dir.path());
    let output = bin()
        .arg("--config")
        .arg(&config)
        .args(["eval", "--questions", "/no/such/file.jsonl", "--reasoner", "solver", "--out"])
        .arg(dir.path().join("eval.json"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let events = stderr_events(&output);
    let error = event_of(&events, "error");
    let detail = error["detail"].as_str().unwrap();
    assert!(
        detail.contains("file not found: /no/such/file.jsonl"),
        "{detail}"
    );
}

#[test]
fn config_precedence_is_visible_in_the_config_event() {
    let dir = tempfile::tempdir().unwrap();
    let config = mock_config(dir.path());

    // File only.
    let output = bin()
        .arg("--config")
        .arg(&config)
        .args(["simulate", "--trials", "10"])
        .output()
        .unwrap();
    assert!(output.status.success());
    assert_eq!(event_of(&stderr_events(&output), "config")["seed"], 41);

    // Environment beats the file.
    let output = bin()
        .arg("--config")
        .arg(&config)
        .env("COTFORGE_SEED", "42")
        .args(["simulate", "--trials", "10"])
        .output()
        .unwrap();
    assert!(output.status.success());
    assert_eq!(event_of(&stderr_events(&output), "config")["seed"], 42);

    // Flag beats both.
    let output = bin()
        .arg("--config")
        .arg(&config)
        .env("COTFORGE_SEED", "42")
        .args(["--seed", "43", "simulate", "--trials", "10"])
        .output()
        .unwrap();
    assert!(output.status.success());
    assert_eq!(event_of(&stderr_events(&output), "config")["seed"], 43);
}

#[test]
fn unknown_backend_error_names_the_candidates() {
    let dir = tempfile::tempdir().unwrap();
    let config = mock_config(dir.path());
    let questions = dir.path().join("q.jsonl");
    let status = bin()
        .args(["gen-toy", "--count", "3", "--out"])
        .arg(&questions)
        .status()
        .unwrap();
    assert!(status.success());

    let output = bin()
        .arg("--config")
        .arg(&config)
        .args(["eval", "--questions"])
        .arg(&questions)
        .args(["--reasoner", "nonesuch", "--out"])
        .arg(dir.path().join("eval.json"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let events = stderr_events(&output);
    let detail = event_of(&events, "error")["detail"].as_str().unwrap().to_string();
    assert!(detail.contains("nonesuch"), "{detail}");
    assert!(detail.contains("checker") && detail.contains("solver"), "{detail}");
}

#[test]
fn simulate_output_is_seed_deterministic() {
    let run = |seed: &str| {
        let output = bin()
            .args(["--seed", seed, "simulate", "--p-correct", "0.6", "--trials", "5000"])
            .output()
            .unwrap();
        assert!(output.status.success());
        String::from_utf8(output.stdout).unwrap()
    };
    let first = run("9");
    assert_eq!(first, run("9"));
    assert_ne!(first, run("10"));
    let report: serde_json::Value = serde_json::from_str(first.trim()).unwrap();
    assert_eq!(report["trials"], 5000);
}

#[test]
fn assemble_pool_draws_the_requested_counts() {
    let dir = tempfile::tempdir().unwrap();
    let geometry = dir.path().join("geometry.jsonl");
    let tables = dir.path().join("tables.jsonl");
    let lines = |source: &str, count: usize| {
        (0..count)
            .map(|i| {
                format!(
                    r#"{{"id":"{source}-{i}","prompt":"find x {i}","answer":"{i}","source":"{source}"}}"#
                ) + "\n"
            })
            .collect::<String>()
    };
    write_file(&geometry, &lines("geometry3k", 6));
    write_file(&tables, &lines("tabmwp", 5));

    let out = dir.path().join("pool.jsonl");
    let output = bin()
        .args(["assemble-pool", "--input"])
        .arg(format!("geometry3k={}", geometry.display()))
        .arg("--input")
        .arg(format!("tabmwp={}", tables.display()))
        .args(["--take", "geometry3k=4", "--take", "tabmwp=2", "--out"])
        .arg(&out)
        .args(["--seed", "13"])
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");

    let body = std::fs::read_to_string(&out).unwrap();
    let sources: Vec<String> = body
        .lines()
        .map(|line| {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            v["source"].as_str().unwrap().to_string()
        })
        .collect();
    assert_eq!(sources.len(), 6);
    assert_eq!(sources.iter().filter(|s| *s == "geometry3k").count(), 4);
    assert_eq!(sources.iter().filter(|s| *s == "tabmwp").count(), 2);

    let events = stderr_events(&output);
    let done = event_of(&events, "done");
    assert_eq!(done["by_source"]["geometry3k"], 4);
    assert_eq!(done["by_source"]["tabmwp"], 2);
}

#[test]
fn eval_reports_accuracy_on_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let config = mock_config(dir.path());
    let questions = dir.path().join("q.jsonl");
    assert!(bin()
        .args(["gen-toy", "--count", "5", "--out"])
        .arg(&questions)
        .status()
        .unwrap()
        .success());

    let out = dir.path().join("eval.json");
    let output = bin()
        .arg("--config")
        .arg(&config)
        .args(["eval", "--questions"])
        .arg(&questions)
        .args(["--reasoner", "solver", "--strategy", "majority-vote", "--samples", "3", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");

    // The solver mock always answers correctly, so accuracy is exactly 1.
    let summary: serde_json::Value =
        serde_json::from_str(String::from_utf8(output.stdout).unwrap().trim()).unwrap();
    assert_eq!(summary["total"], 5);
    assert_eq!(summary["accuracy"], 1.0);

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["correct"], 5);
    assert_eq!(report["outcomes"].as_array().unwrap().len(), 5);
}
