use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use databright_ffi::*;

fn last_error() -> String {
    let p = databright_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn scenario(name: &str) -> CString {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../core/scenarios/{name}.scn"));
    CString::new(std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn ledger_round_trip_through_the_abi() {
    unsafe {
        let l = databright_ledger_new(11);
        let (mut a, mut b) = ([0u8; 32], [0u8; 32]);
        assert_eq!(
            databright_ledger_create_account(l, a.as_mut_ptr()),
            DatabrightStatus::Ok
        );
        assert_eq!(
            databright_ledger_create_account(l, b.as_mut_ptr()),
            DatabrightStatus::Ok
        );
        let credit = CString::new("credit").unwrap();
        assert_eq!(
            databright_ledger_mint(l, credit.as_ptr(), a.as_ptr(), 10),
            DatabrightStatus::Ok
        );
        assert_eq!(
            databright_ledger_transfer(l, credit.as_ptr(), a.as_ptr(), b.as_ptr(), 11),
            DatabrightStatus::InsufficientBalance
        );
        assert!(last_error().contains("insufficient"));
        assert_eq!(
            databright_ledger_transfer(l, credit.as_ptr(), a.as_ptr(), b.as_ptr(), 4),
            DatabrightStatus::Ok
        );
        assert!(databright_last_error().is_null());
        let mut bal = 0;
        assert_eq!(
            databright_ledger_balance(l, credit.as_ptr(), b.as_ptr(), &mut bal),
            DatabrightStatus::Ok
        );
        assert_eq!(bal, 4);
        assert_eq!(databright_ledger_height(l), 2);

        let mut log = ptr::null_mut();
        assert_eq!(
            databright_ledger_export_log(l, &mut log),
            DatabrightStatus::Ok
        );
        let mut copy = ptr::null_mut();
        assert_eq!(
            databright_ledger_import_log(11, log, &mut copy),
            DatabrightStatus::Ok
        );
        let (mut h1, mut h2) = ([0u8; 32], [1u8; 32]);
        databright_ledger_head_hash(l, h1.as_mut_ptr());
        databright_ledger_head_hash(copy, h2.as_mut_ptr());
        assert_eq!(h1, h2);
        databright_string_free(log);
        databright_ledger_free(copy);
        databright_ledger_free(l);
    }
}

#[test]
fn bad_arguments_are_reported_not_crashed() {
    unsafe {
        let l = databright_ledger_new(1);
        let bogus = CString::new("gold").unwrap();
        let a = [0u8; 32];
        assert_eq!(
            databright_ledger_mint(l, bogus.as_ptr(), a.as_ptr(), 1),
            DatabrightStatus::InvalidArgument
        );
        let credit = CString::new("credit").unwrap();
        assert_eq!(
            databright_ledger_mint(l, credit.as_ptr(), a.as_ptr(), 1),
            DatabrightStatus::UnknownAccount
        );
        assert_eq!(
            databright_ledger_mint(ptr::null_mut(), credit.as_ptr(), a.as_ptr(), 1),
            DatabrightStatus::NullArgument
        );
        let bad_utf8 = [0xffu8, 0];
        assert_eq!(
            databright_ledger_mint(l, bad_utf8.as_ptr().cast(), a.as_ptr(), 1),
            DatabrightStatus::InvalidUtf8
        );
        databright_ledger_free(l);
        databright_ledger_free(ptr::null_mut());
        databright_string_free(ptr::null_mut());
    }
}

#[test]
fn scenario_runs_and_verifies() {
    unsafe {
        let text = scenario("e2e");
        let mut report = ptr::null_mut();
        assert_eq!(
            databright_run_scenario(text.as_ptr(), false, 0, &mut report),
            DatabrightStatus::Ok
        );
        assert_eq!(databright_report_verified_jobs(report), 1);
        let mut count = usize::MAX;
        assert_eq!(
            databright_report_verify(report, &mut count, ptr::null_mut()),
            DatabrightStatus::Ok
        );
        assert_eq!(count, 0);

        let mut rendered = ptr::null_mut();
        assert_eq!(
            databright_report_render(report, &mut rendered),
            DatabrightStatus::Ok
        );
        let mut parsed = ptr::null_mut();
        assert_eq!(
            databright_report_parse(rendered, &mut parsed),
            DatabrightStatus::Ok
        );
        let (mut h1, mut h2) = ([0u8; 32], [1u8; 32]);
        databright_report_head_hash(report, h1.as_mut_ptr());
        databright_report_head_hash(parsed, h2.as_mut_ptr());
        assert_eq!(h1, h2);
        databright_string_free(rendered);
        databright_report_free(parsed);
        databright_report_free(report);

        let short = CString::new(
            scenario("tmr")
                .to_str()
                .unwrap()
                .replace("count = 70", "count = 10"),
        )
        .unwrap();
        assert_eq!(
            databright_run_scenario(short.as_ptr(), true, 5, &mut report),
            DatabrightStatus::Protocol
        );
        let junk = CString::new("no marker here").unwrap();
        assert_eq!(
            databright_report_parse(junk.as_ptr(), &mut parsed),
            DatabrightStatus::MalformedReport
        );
    }
}

/// Directory holding the library artifacts for this profile.
fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let lib = artifact_dir().join("libdatabright_ffi.a");
    if !lib.exists() {
        eprintln!("skipping: {} not built", lib.display());
        return;
    }
    let Ok(cc) = which_cc() else {
        eprintln!("skipping: no C compiler");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(root.join("include"))
        .arg(root.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(
        out.status.success(),
        "smoke exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}

fn which_cc() -> Result<String, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc).arg("--version").output().is_ok() {
            return Ok(cc.to_string());
        }
    }
    Err(())
}
