use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tracelab_cli::simulate::ACTIONS_FILE;
use tracelab_core::config::parse_study_config;
use tracelab_core::progsnap2::{read_bundle, validate_bundle};
use tracelab_core::scenario::{ScenarioState, StepAction};

fn course_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/studies/refactoring-course")
}

fn tracelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tracelab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn simulate(out: &Path, sessions: &str, seed: &str) -> Output {
    let config = course_dir();
    tracelab(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--sessions",
        sessions,
        "--seed",
        seed,
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn validate_prints_plan_or_errors() {
    let ok = tracelab(&["validate", "--config", course_dir().to_str().unwrap()]);
    assert_eq!(ok.status.code(), Some(0));
    assert_eq!(stdout(&ok).lines().count(), 5);
    assert!(stdout(&ok).starts_with("0. consent"));

    let bad = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/configs/many-errors");
    let bad = tracelab(&["validate", "--config", bad.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(1));
    assert_eq!(stdout(&bad).lines().count(), 5);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(tracelab(&["validate"]).status.code(), Some(2));
    assert_eq!(tracelab(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(
        tracelab(&["stats", "--data", "a", "--journals", "b"]).status.code(),
        Some(2)
    );
}

#[test]
fn zero_sessions_make_an_empty_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sim");
    let o = simulate(&out, "0", "3");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 0);
}

#[test]
fn same_seed_same_tree() {
    let tmp = tempfile::tempdir().unwrap();
    let digest = |name: &str, seed: &str| {
        let o = simulate(&tmp.path().join(name), "3", seed);
        assert!(o.status.success());
        stdout(&o).lines().last().unwrap().to_owned()
    };
    let a = digest("a", "42");
    assert_eq!(a, digest("b", "42"));
    assert_ne!(a, digest("c", "43"));
}

#[test]
fn logged_actions_replay_through_the_scenario() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sim");
    assert!(simulate(&out, "4", "9").status.success());
    let config = parse_study_config(&course_dir()).unwrap();
    for entry in std::fs::read_dir(&out).unwrap() {
        let log = std::fs::read_to_string(entry.unwrap().path().join(ACTIONS_FILE)).unwrap();
        let mut state = ScenarioState::init(&config);
        let mut last_ts = i64::MIN;
        for line in log.lines() {
            let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
            let ts = v.as_object_mut().unwrap().remove("timestamp").unwrap().as_i64().unwrap();
            assert!(ts >= last_ts);
            last_ts = ts;
            let action: StepAction = serde_json::from_value(v).unwrap();
            state = state.advance(&action, &config, ts).unwrap();
        }
        assert!(state.finished);
    }
}

#[test]
fn convert_and_stats_read_journals() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    assert!(simulate(&sim, "2", "5").status.success());
    let bundle_dir = tmp.path().join("bundle");
    let config = course_dir();
    let o = tracelab(&[
        "convert",
        "--journals",
        sim.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        bundle_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let bundle = read_bundle(&bundle_dir).unwrap();
    assert!(validate_bundle(&bundle).is_empty());

    let o = tracelab(&["stats", "--journals", sim.to_str().unwrap(), "--json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["counts"]["participants"], 2);
}

#[test]
fn convert_without_source_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tracelab(&["convert", "--out", tmp.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
