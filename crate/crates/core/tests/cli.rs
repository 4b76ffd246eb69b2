use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use databright::cli::report::JSON_MARKER;
use databright::cli::{run_scenario, verify_report, CliError, RunReport, ScenarioError};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_databright"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(format!("{name}.scn"))
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn run_then_verify_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("e2e.rep");
    let out = bin()
        .args([
            "run",
            scenario("e2e").to_str().unwrap(),
            "--out",
            report.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("== proposals =="));
    assert!(text.contains(JSON_MARKER));

    let out = bin()
        .args(["verify", report.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}

#[test]
fn run_prints_to_stdout_without_out() {
    let out = bin()
        .args(["run", scenario("baseline").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let report = RunReport::parse(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(report.scenario, "baseline");
}

#[test]
fn seed_override_changes_the_run() {
    let text = std::fs::read_to_string(scenario("baseline")).unwrap();
    let a = run_scenario(&text, None).unwrap();
    let b = run_scenario(&text, Some(9)).unwrap();
    assert_eq!(b.seed, 9);
    assert_ne!(a.ledger.head_hash, b.ledger.head_hash);
    assert!(verify_report(&b).is_empty());
}

#[test]
fn tampered_reports_are_rejected() {
    let text = std::fs::read_to_string(scenario("e2e")).unwrap();
    let good = run_scenario(&text, None).unwrap();
    assert!(verify_report(&good).is_empty());

    let mut r = good.clone();
    *r.balances
        .get_mut("credit")
        .unwrap()
        .get_mut("ops")
        .unwrap() += 1;
    assert!(verify_report(&r).iter().any(|v| v.contains("balances")));

    let mut r = good.clone();
    r.jobs[0].settlement.treasury_remainder += 1;
    assert!(verify_report(&r)
        .iter()
        .any(|v| v.contains("settlement pays")));

    let mut r = good.clone();
    let w = r.jobs[0].run.plans[0].assignments[0].worker_id;
    r.jobs[0].exposure.insert(w, (0..6).collect());
    assert!(verify_report(&r).iter().any(|v| v.contains("cap")));

    let mut r = good.clone();
    let epoch = r.jobs[0]
        .run
        .epochs
        .iter_mut()
        .find(|e| e.results.iter().all(|d| d.digest.is_some()))
        .unwrap();
    epoch.results[0].digest = Some([0; 32]);
    assert!(verify_report(&r).iter().any(|v| v.contains("recomputed")));

    let mut r = good.clone();
    r.ledger.log.pop();
    assert!(!verify_report(&r).is_empty());

    let mut r = good;
    r.blacklist.clear();
    assert!(verify_report(&r)
        .iter()
        .any(|v| v.contains("missing from the blacklist")));
}

#[test]
fn verify_exits_nonzero_on_violations() {
    let text = std::fs::read_to_string(scenario("tmr")).unwrap();
    let mut r = run_scenario(&text, None).unwrap();
    r.jobs[0].settlement.refund += 5;
    let json = serde_json::to_string_pretty(&r).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.rep");
    std::fs::write(&path, format!("{JSON_MARKER}\n{json}")).unwrap();
    let out = bin()
        .args(["verify", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("violation:"));
}

#[test]
fn parse_errors_carry_their_location_and_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.scn");
    std::fs::write(
        &path,
        "[scenario]\nname = \"x\"\nseed = 1\ncolour = \"red\"\n",
    )
    .unwrap();
    let out = bin()
        .args(["run", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 4, column 1"), "{err}");

    match run_scenario("[scenario]\nname = \"x\"\nseed = \"one\"\n", None) {
        Err(CliError::Scenario(ScenarioError::Parse { line, .. })) => assert_eq!(line, 3),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn missing_file_exits_one() {
    let out = bin().args(["run", "/nonexistent/x.scn"]).output().unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn infeasible_schedule_is_a_protocol_error() {
    let text = std::fs::read_to_string(scenario("tmr"))
        .unwrap()
        .replace("count = 70", "count = 59");
    let err = run_scenario(&text, None).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("short.scn");
    std::fs::write(&path, text).unwrap();
    let out = bin()
        .args(["run", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}
