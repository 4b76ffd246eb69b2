//! C ABI over the databright core.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `*_free` function. Every fallible call returns a
//! [`DatabrightStatus`]; on failure the message is kept per thread and can
//! be fetched with [`databright_last_error`]. Strings returned through out
//! parameters are heap allocated and must be released with
//! [`databright_string_free`]. Account ids cross the boundary as 32 raw
//! bytes.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use databright::cli::{self, CliError, RunReport};
use databright::ledger::{AccountId, Ledger, LedgerError, TokenClass};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatabrightStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    InsufficientBalance = 4,
    UnknownAccount = 5,
    Ledger = 6,
    Scenario = 7,
    Protocol = 8,
    MalformedReport = 9,
    Io = 10,
    Panic = 11,
}

/// A token ledger.
pub struct DatabrightLedger(Ledger);

/// The result of running a scenario, or a parsed report file.
pub struct DatabrightReport(RunReport);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(DatabrightStatus, String);

impl From<LedgerError> for Failure {
    fn from(e: LedgerError) -> Self {
        let status = match e {
            LedgerError::InsufficientBalance { .. } => DatabrightStatus::InsufficientBalance,
            LedgerError::UnknownAccount(_) => DatabrightStatus::UnknownAccount,
            _ => DatabrightStatus::Ledger,
        };
        Failure(status, e.to_string())
    }
}

impl From<CliError> for Failure {
    fn from(e: CliError) -> Self {
        let status = match e {
            CliError::Scenario(_) => DatabrightStatus::Scenario,
            CliError::Protocol(_) => DatabrightStatus::Protocol,
            CliError::Io(_) => DatabrightStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

/// Runs `f`, converting failures and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DatabrightStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DatabrightStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            DatabrightStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(DatabrightStatus::NullArgument, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        Failure(
            DatabrightStatus::InvalidUtf8,
            format!("{what} is not UTF-8"),
        )
    })
}

unsafe fn account_arg(p: *const u8, what: &str) -> Result<AccountId, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let mut id = [0u8; 32];
    id.copy_from_slice(std::slice::from_raw_parts(p, 32));
    Ok(AccountId(id))
}

unsafe fn class_arg(p: *const c_char) -> Result<TokenClass, Failure> {
    let s = str_arg(p, "class")?;
    s.parse().map_err(|_| {
        Failure(
            DatabrightStatus::InvalidArgument,
            format!("unknown token class {s:?}"),
        )
    })
}

unsafe fn handle<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .expect("nul bytes removed")
        .into_raw()
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn databright_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn databright_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn databright_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---- ledger ----

/// New empty ledger. Never null.
#[no_mangle]
pub extern "C" fn databright_ledger_new(seed: u64) -> *mut DatabrightLedger {
    Box::into_raw(Box::new(DatabrightLedger(Ledger::new(seed))))
}

/// # Safety
/// `ledger` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn databright_ledger_free(ledger: *mut DatabrightLedger) {
    if !ledger.is_null() {
        drop(Box::from_raw(ledger));
    }
}

/// Creates an account and writes its 32-byte id to `out_id`.
///
/// # Safety
/// `ledger` must be a live handle; `out_id` must point to 32 writable bytes.
#[no_mangle]
pub unsafe extern "C" fn databright_ledger_create_account(
    ledger: *mut DatabrightLedger,
    out_id: *mut u8,
) -> DatabrightStatus {
    guard(|| {
        let l = handle(ledger, "ledger")?;
        if out_id.is_null() {
            return Err(null("out_id"));
        }
        let id = l.0.create_account();
        ptr::copy_nonoverlapping(id.as_bytes().as_ptr(), out_id, 32);
        Ok(())
    })
}

/// Mints `amount` of `class` (`"curator"`, `"credit"` or `"share:N"`).
///
/// # Safety
/// `ledger` must be a live handle, `class` a NUL-terminated string and `to`
/// 32 readable bytes.
#[no_mangle]
pub unsafe extern "C" fn databright_ledger_mint(
    ledger: *mut DatabrightLedger,
    class: *const c_char,
    to: *const u8,
    amount: u64,
) -> DatabrightStatus {
    guard(|| {
        let l = handle(ledger, "ledger")?;
        let class = class_arg(class)?;
        let to = account_arg(to, "to")?;
        l.0.mint(class, to, amount)?;
        Ok(())
    })
}

/// # Safety
/// As for [`databright_ledger_mint`]; `from` and `to` are 32 bytes each.
#[no_mangle]
pub unsafe extern "C" fn databright_ledger_transfer(
    ledger: *mut DatabrightLedger,
    class: *const c_char,
    from: *const u8,
    to: *const u8,
    amount: u64,
) -> DatabrightStatus {
    guard(|| {
        let l = handle(ledger, "ledger")?;
        let class = class_arg(class)?;
        let from = account_arg(from, "from")?;
        let to = account_arg(to, "to")?;
        l.0.transfer(class, from, to, amount)?;
        Ok(())
    })
}

/// # Safety
/// `ledger` must be a live handle, `class` a NUL-terminated string,
/// `account` 32 readable bytes and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn databright_ledger_balance(
    ledger: *const DatabrightLedger,
    class: *const c_char,
    account: *const u8,
    out: *mut u64,
) -> DatabrightStatus {
    guard(|| {
        let l = handle(ledger.cast_mut(), "ledger")?;
        let class = class_arg(class)?;
        let account = account_arg(account, "account")?;
        write_out(out, l.0.balance(class, &account), "out")
    })
}

/// Number of committed transactions; 0 for a null handle.
///
/// # Safety
/// `ledger` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn databright_ledger_height(ledger: *const DatabrightLedger) -> u64 {
    ledger.as_ref().map_or(0, |l| l.0.height())
}

/// Writes the 32-byte head hash to `out`.
///
/// # Safety
/// `ledger` must be a live handle; `out` must point to 32 writable bytes.
#[no_mangle]
pub unsafe extern "C" fn databright_ledger_head_hash(
    ledger: *const DatabrightLedger,
    out: *mut u8,
) -> DatabrightStatus {
    guard(|| {
        let l = handle(ledger.cast_mut(), "ledger")?;
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(l.0.head_hash().as_ptr(), out, 32);
        Ok(())
    })
}

/// Exports the transaction log, one `height hex` line per transaction.
///
/// # Safety
/// `ledger` must be a live handle; `out` must be writable. Free the result
/// with [`databright_string_free`].
#[no_mangle]
pub unsafe extern "C" fn databright_ledger_export_log(
    ledger: *const DatabrightLedger,
    out: *mut *mut c_char,
) -> DatabrightStatus {
    guard(|| {
        let l = handle(ledger.cast_mut(), "ledger")?;
        write_out(out, c_string(l.0.export_log()), "out")
    })
}

/// Rebuilds a ledger by replaying an exported log.
///
/// # Safety
/// `log` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn databright_ledger_import_log(
    seed: u64,
    log: *const c_char,
    out: *mut *mut DatabrightLedger,
) -> DatabrightStatus {
    guard(|| {
        let text = str_arg(log, "log")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let ledger = Ledger::import_log(seed, text)?;
        out.write(Box::into_raw(Box::new(DatabrightLedger(ledger))));
        Ok(())
    })
}

// ---- scenarios and reports ----

/// Runs a scenario given as TOML text. `seed_override` replaces the
/// scenario seed when `use_seed_override` is true.
///
/// # Safety
/// `scenario` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn databright_run_scenario(
    scenario: *const c_char,
    use_seed_override: bool,
    seed_override: u64,
    out: *mut *mut DatabrightReport,
) -> DatabrightStatus {
    guard(|| {
        let text = str_arg(scenario, "scenario")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let report = cli::run_scenario(text, use_seed_override.then_some(seed_override))?;
        out.write(Box::into_raw(Box::new(DatabrightReport(report))));
        Ok(())
    })
}

/// Parses a rendered report.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn databright_report_parse(
    text: *const c_char,
    out: *mut *mut DatabrightReport,
) -> DatabrightStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let report =
            RunReport::parse(text).map_err(|e| Failure(DatabrightStatus::MalformedReport, e))?;
        out.write(Box::into_raw(Box::new(DatabrightReport(report))));
        Ok(())
    })
}

/// # Safety
/// `report` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn databright_report_free(report: *mut DatabrightReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Renders the report: summary tables, marker line, JSON.
///
/// # Safety
/// `report` must be a live handle; `out` must be writable. Free the result
/// with [`databright_string_free`].
#[no_mangle]
pub unsafe extern "C" fn databright_report_render(
    report: *const DatabrightReport,
    out: *mut *mut c_char,
) -> DatabrightStatus {
    guard(|| {
        let r = handle(report.cast_mut(), "report")?;
        write_out(out, c_string(r.0.render()), "out")
    })
}

/// Re-checks the report's invariants. Writes the number of violations to
/// `out_count` and, when `out_text` is non-null, the violations one per
/// line.
///
/// # Safety
/// `report` must be a live handle; `out_count` must be writable; `out_text`
/// must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn databright_report_verify(
    report: *const DatabrightReport,
    out_count: *mut usize,
    out_text: *mut *mut c_char,
) -> DatabrightStatus {
    guard(|| {
        let r = handle(report.cast_mut(), "report")?;
        let violations = cli::verify_report(&r.0);
        write_out(out_count, violations.len(), "out_count")?;
        if !out_text.is_null() {
            out_text.write(c_string(violations.join("\n")));
        }
        Ok(())
    })
}

/// Writes the 32-byte ledger head hash recorded in the report.
///
/// # Safety
/// `report` must be a live handle; `out` must point to 32 writable bytes.
#[no_mangle]
pub unsafe extern "C" fn databright_report_head_hash(
    report: *const DatabrightReport,
    out: *mut u8,
) -> DatabrightStatus {
    guard(|| {
        let r = handle(report.cast_mut(), "report")?;
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(r.0.ledger.head_hash.as_ptr(), out, 32);
        Ok(())
    })
}

/// Number of jobs in the report whose result was verified.
///
/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn databright_report_verified_jobs(report: *const DatabrightReport) -> usize {
    report
        .as_ref()
        .map_or(0, |r| r.0.jobs.iter().filter(|j| j.run.verified).count())
}
