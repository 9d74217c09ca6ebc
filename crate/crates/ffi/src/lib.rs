//! C ABI over the equilibrium solver: opaque handles, integer status codes,
//! JSON strings at the boundary. The generated header lands in
//! `include/badmarket.h`.
//!
//! Conventions: every function returns a `BmStatus`; output handles are
//! written through out-pointers and must be released with the matching
//! `*_free`; strings returned by `*_to_json` are released with
//! `bm_string_free`; `bm_last_error_message` describes the most recent
//! failure on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use badmarket::economy::validate_economy;
use badmarket::quota::{load_quota_scheme, solve_quota, verify_quota, QuotaCertificate};
use badmarket::solver::{
    solve_equilibrium, verify_equilibrium, EquilibriumCertificate, SolveError, SolverConfig,
};

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let cstring = CString::new(message).unwrap_or_else(|_| CString::new("invalid error").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(cstring));
}

/// Status codes returned by every API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BmStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    ValidationError = 4,
    NoConvergence = 5,
    VerificationFailed = 6,
    DomainError = 7,
    InternalError = 8,
}

/// Opaque economy handle.
pub struct BmEconomy(badmarket::economy::Economy);

/// Opaque equilibrium-certificate handle.
pub struct BmCertificate(EquilibriumCertificate);

/// Opaque quota-certificate handle.
pub struct BmQuotaCertificate(QuotaCertificate);

/// Solver configuration passed by value across the boundary.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BmSolverConfig {
    pub clearing_tol: f64,
    pub optimality_tol: f64,
    pub damping: f64,
    pub max_outer_iters: u64,
    pub max_inner_iters: u64,
    pub restarts: u64,
    pub seed: u64,
}

impl From<BmSolverConfig> for SolverConfig {
    fn from(c: BmSolverConfig) -> Self {
        Self {
            clearing_tol: c.clearing_tol,
            optimality_tol: c.optimality_tol,
            damping: c.damping,
            max_outer_iters: c.max_outer_iters as usize,
            max_inner_iters: c.max_inner_iters as usize,
            restarts: c.restarts as usize,
            seed: c.seed,
        }
    }
}

fn guard<F: FnOnce() -> BmStatus>(f: F) -> BmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic".into());
            BmStatus::InternalError
        }
    }
}

unsafe fn read_str<'a>(ptr: *const c_char) -> Result<&'a str, BmStatus> {
    if ptr.is_null() {
        set_error("null string argument".into());
        return Err(BmStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string is not valid UTF-8".into());
        BmStatus::InvalidUtf8
    })
}

fn give_string(text: String) -> *mut c_char {
    CString::new(text)
        .unwrap_or_else(|_| CString::new("").unwrap())
        .into_raw()
}

fn serde_json_string<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).unwrap_or_else(|_| "{}".into())
}

/// Message describing the most recent error on this thread, or null. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(std::ptr::null(), |s| s.as_ptr())
    })
}

/// Releases a string returned by any `*_to_json` call.
///
/// # Safety
/// `ptr` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn bm_string_free(ptr: *mut c_char) {
    if !ptr.is_null() {
        drop(CString::from_raw(ptr));
    }
}

// ---------------------------------------------------------------------------
// Economies

/// Parses an economy document.
///
/// # Safety
/// `json` must be a valid NUL-terminated string, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bm_economy_from_json(
    json: *const c_char,
    out: *mut *mut BmEconomy,
) -> BmStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer".into());
            return BmStatus::NullArgument;
        }
        let text = match read_str(json) {
            Ok(t) => t,
            Err(status) => return status,
        };
        match badmarket::io::load_economy(text) {
            Ok(econ) => {
                *out = Box::into_raw(Box::new(BmEconomy(econ)));
                BmStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                BmStatus::ParseError
            }
        }
    })
}

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bm_economy_build_hara(n: u64, out: *mut *mut BmEconomy) -> BmStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer".into());
            return BmStatus::NullArgument;
        }
        match badmarket::economy::build_hara_economy(n as usize) {
            Ok(econ) => {
                *out = Box::into_raw(Box::new(BmEconomy(econ)));
                BmStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                BmStatus::DomainError
            }
        }
    })
}

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bm_economy_build_garbage(n: u64, out: *mut *mut BmEconomy) -> BmStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer".into());
            return BmStatus::NullArgument;
        }
        match badmarket::economy::build_garbage_economy(n as usize) {
            Ok(econ) => {
                *out = Box::into_raw(Box::new(BmEconomy(econ)));
                BmStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                BmStatus::DomainError
            }
        }
    })
}

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bm_economy_build_one_agent(out: *mut *mut BmEconomy) -> BmStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer".into());
            return BmStatus::NullArgument;
        }
        *out = Box::into_raw(Box::new(BmEconomy(
            badmarket::economy::build_one_agent_economy(),
        )));
        BmStatus::Ok
    })
}

/// Serializes the economy document; release with `bm_string_free`.
///
/// # Safety
/// `econ` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn bm_economy_to_json(econ: *const BmEconomy) -> *mut c_char {
    if econ.is_null() {
        set_error("null economy handle".into());
        return std::ptr::null_mut();
    }
    give_string(badmarket::io::serialize_economy(&(*econ).0))
}

/// Runs the assumption validators; writes 1 into `out_passed` when no
/// error-severity finding exists.
///
/// # Safety
/// `econ` must be a live handle, `out_passed` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bm_economy_validate(
    econ: *const BmEconomy,
    out_passed: *mut i32,
) -> BmStatus {
    guard(|| {
        if econ.is_null() || out_passed.is_null() {
            set_error("null argument".into());
            return BmStatus::NullArgument;
        }
        let report = validate_economy(&(*econ).0);
        *out_passed = report.passed as i32;
        BmStatus::Ok
    })
}

/// Validation report as JSON; release with `bm_string_free`.
///
/// # Safety
/// `econ` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn bm_economy_validation_json(econ: *const BmEconomy) -> *mut c_char {
    if econ.is_null() {
        set_error("null economy handle".into());
        return std::ptr::null_mut();
    }
    let report = validate_economy(&(*econ).0);
    give_string(serde_json_string(&report))
}

/// # Safety
/// `econ` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn bm_economy_free(econ: *mut BmEconomy) {
    if !econ.is_null() {
        drop(Box::from_raw(econ));
    }
}

// ---------------------------------------------------------------------------
// Solving and verification

#[no_mangle]
pub extern "C" fn bm_solver_config_default() -> BmSolverConfig {
    let d = SolverConfig::default();
    BmSolverConfig {
        clearing_tol: d.clearing_tol,
        optimality_tol: d.optimality_tol,
        damping: d.damping,
        max_outer_iters: d.max_outer_iters as u64,
        max_inner_iters: d.max_inner_iters as u64,
        restarts: d.restarts as u64,
        seed: d.seed,
    }
}

/// Solves for a non-free-disposal equilibrium.
///
/// # Safety
/// `econ` must be a live handle, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bm_solve(
    econ: *const BmEconomy,
    config: BmSolverConfig,
    out: *mut *mut BmCertificate,
) -> BmStatus {
    guard(|| {
        if econ.is_null() || out.is_null() {
            set_error("null argument".into());
            return BmStatus::NullArgument;
        }
        match solve_equilibrium(&(*econ).0, &config.into()) {
            Ok(cert) => {
                *out = Box::into_raw(Box::new(BmCertificate(cert)));
                BmStatus::Ok
            }
            Err(SolveError::NoConvergence { best_residual, .. }) => {
                set_error(format!("no convergence: best residual {best_residual:.3e}"));
                BmStatus::NoConvergence
            }
            Err(SolveError::InvalidEconomy(report)) => {
                set_error(serde_json_string(&report));
                BmStatus::ValidationError
            }
            Err(e) => {
                set_error(e.to_string());
                BmStatus::DomainError
            }
        }
    })
}

/// Verifies a certificate; writes 1 into `out_passed` when every condition
/// holds at tolerance `tol`.
///
/// # Safety
/// `econ` and `cert` must be live handles, `out_passed` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bm_verify(
    econ: *const BmEconomy,
    cert: *const BmCertificate,
    tol: f64,
    out_passed: *mut i32,
) -> BmStatus {
    guard(|| {
        if econ.is_null() || cert.is_null() || out_passed.is_null() {
            set_error("null argument".into());
            return BmStatus::NullArgument;
        }
        let report = verify_equilibrium(&(*econ).0, &(*cert).0, tol);
        *out_passed = report.passed as i32;
        if report.passed {
            BmStatus::Ok
        } else {
            set_error(serde_json_string(&report));
            BmStatus::VerificationFailed
        }
    })
}

/// Verification report as JSON; release with `bm_string_free`.
///
/// # Safety
/// `econ` and `cert` must be live handles from this library.
#[no_mangle]
pub unsafe extern "C" fn bm_verify_report_json(
    econ: *const BmEconomy,
    cert: *const BmCertificate,
    tol: f64,
) -> *mut c_char {
    if econ.is_null() || cert.is_null() {
        set_error("null argument".into());
        return std::ptr::null_mut();
    }
    let report = verify_equilibrium(&(*econ).0, &(*cert).0, tol);
    give_string(serde_json_string(&report))
}

/// # Safety
/// `cert` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn bm_certificate_to_json(cert: *const BmCertificate) -> *mut c_char {
    if cert.is_null() {
        set_error("null certificate handle".into());
        return std::ptr::null_mut();
    }
    give_string((*cert).0.to_json())
}

/// # Safety
/// `json` must be a valid NUL-terminated string, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bm_certificate_from_json(
    json: *const c_char,
    out: *mut *mut BmCertificate,
) -> BmStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer".into());
            return BmStatus::NullArgument;
        }
        let text = match read_str(json) {
            Ok(t) => t,
            Err(status) => return status,
        };
        match EquilibriumCertificate::from_json(text) {
            Ok(cert) => {
                *out = Box::into_raw(Box::new(BmCertificate(cert)));
                BmStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                BmStatus::ParseError
            }
        }
    })
}

/// Number of commodities in the certificate price.
///
/// # Safety
/// `cert` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn bm_certificate_price_len(cert: *const BmCertificate) -> usize {
    if cert.is_null() {
        return 0;
    }
    (*cert).0.price.as_slice().len()
}

/// Copies the certificate price into a caller buffer of length `len`.
///
/// # Safety
/// `cert` must be a live handle, `buffer` valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn bm_certificate_price(
    cert: *const BmCertificate,
    buffer: *mut f64,
    len: usize,
) -> BmStatus {
    guard(|| {
        if cert.is_null() || buffer.is_null() {
            set_error("null argument".into());
            return BmStatus::NullArgument;
        }
        let price = (*cert).0.price.as_slice();
        if len != price.len() {
            set_error(format!(
                "buffer holds {len} values, price has {}",
                price.len()
            ));
            return BmStatus::DomainError;
        }
        std::ptr::copy_nonoverlapping(price.as_ptr(), buffer, len);
        BmStatus::Ok
    })
}

/// # Safety
/// `cert` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn bm_certificate_free(cert: *mut BmCertificate) {
    if !cert.is_null() {
        drop(Box::from_raw(cert));
    }
}

// ---------------------------------------------------------------------------
// Quotas

/// Solves under an emission-quota scheme given as a quota document.
///
/// # Safety
/// `econ` must be a live handle, `quota_json` a valid string, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn bm_solve_quota(
    econ: *const BmEconomy,
    quota_json: *const c_char,
    config: BmSolverConfig,
    out: *mut *mut BmQuotaCertificate,
) -> BmStatus {
    guard(|| {
        if econ.is_null() || out.is_null() {
            set_error("null argument".into());
            return BmStatus::NullArgument;
        }
        let text = match read_str(quota_json) {
            Ok(t) => t,
            Err(status) => return status,
        };
        let economy = &(*econ).0;
        let scheme = match load_quota_scheme(text, economy.firms.len()) {
            Ok(s) => s,
            Err(e) => {
                set_error(e.to_string());
                return BmStatus::ParseError;
            }
        };
        match solve_quota(economy, &scheme, &config.into()) {
            Ok(cert) => {
                *out = Box::into_raw(Box::new(BmQuotaCertificate(cert)));
                BmStatus::Ok
            }
            Err(SolveError::NoConvergence { best_residual, .. }) => {
                set_error(format!("no convergence: best residual {best_residual:.3e}"));
                BmStatus::NoConvergence
            }
            Err(SolveError::InvalidEconomy(report)) => {
                set_error(serde_json_string(&report));
                BmStatus::ValidationError
            }
            Err(e) => {
                set_error(e.to_string());
                BmStatus::DomainError
            }
        }
    })
}

/// Verifies a quota certificate against its scheme.
///
/// # Safety
/// `econ` and `cert` must be live handles, other pointers valid.
#[no_mangle]
pub unsafe extern "C" fn bm_verify_quota(
    econ: *const BmEconomy,
    quota_json: *const c_char,
    cert: *const BmQuotaCertificate,
    tol: f64,
    out_passed: *mut i32,
) -> BmStatus {
    guard(|| {
        if econ.is_null() || cert.is_null() || out_passed.is_null() {
            set_error("null argument".into());
            return BmStatus::NullArgument;
        }
        let text = match read_str(quota_json) {
            Ok(t) => t,
            Err(status) => return status,
        };
        let economy = &(*econ).0;
        let scheme = match load_quota_scheme(text, economy.firms.len()) {
            Ok(s) => s,
            Err(e) => {
                set_error(e.to_string());
                return BmStatus::ParseError;
            }
        };
        let report = verify_quota(economy, &scheme, &(*cert).0, tol);
        *out_passed = report.passed as i32;
        if report.passed {
            BmStatus::Ok
        } else {
            set_error(serde_json_string(&report));
            BmStatus::VerificationFailed
        }
    })
}

/// # Safety
/// `cert` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn bm_quota_certificate_to_json(
    cert: *const BmQuotaCertificate,
) -> *mut c_char {
    if cert.is_null() {
        set_error("null certificate handle".into());
        return std::ptr::null_mut();
    }
    give_string((*cert).0.to_json())
}

/// # Safety
/// `cert` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn bm_quota_certificate_free(cert: *mut BmQuotaCertificate) {
    if !cert.is_null() {
        drop(Box::from_raw(cert));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_one_agent_through_the_c_abi() {
        unsafe {
            let mut econ: *mut BmEconomy = std::ptr::null_mut();
            assert_eq!(bm_economy_build_one_agent(&mut econ), BmStatus::Ok);
            let mut passed = 0i32;
            assert_eq!(bm_economy_validate(econ, &mut passed), BmStatus::Ok);
            assert_eq!(passed, 1);

            let mut cert: *mut BmCertificate = std::ptr::null_mut();
            let cfg = bm_solver_config_default();
            assert_eq!(bm_solve(econ, cfg, &mut cert), BmStatus::Ok);

            assert_eq!(bm_certificate_price_len(cert), 2);
            let mut price = [0.0f64; 2];
            assert_eq!(
                bm_certificate_price(cert, price.as_mut_ptr(), 2),
                BmStatus::Ok
            );
            assert!((price[0] + 0.5).abs() < 1e-10);
            assert!((price[1] - 0.5).abs() < 1e-10);

            let mut ok = 0i32;
            assert_eq!(bm_verify(econ, cert, 1e-9, &mut ok), BmStatus::Ok);
            assert_eq!(ok, 1);

            // JSON round trip through the boundary.
            let json = bm_certificate_to_json(cert);
            assert!(!json.is_null());
            let mut back: *mut BmCertificate = std::ptr::null_mut();
            assert_eq!(bm_certificate_from_json(json, &mut back), BmStatus::Ok);
            bm_string_free(json);
            bm_certificate_free(back);
            bm_certificate_free(cert);
            bm_economy_free(econ);
        }
    }

    #[test]
    fn parse_errors_set_a_message() {
        unsafe {
            let bad = CString::new("{broken").unwrap();
            let mut econ: *mut BmEconomy = std::ptr::null_mut();
            assert_eq!(
                bm_economy_from_json(bad.as_ptr(), &mut econ),
                BmStatus::ParseError
            );
            let msg = bm_last_error_message();
            assert!(!msg.is_null());
            assert!(!CStr::from_ptr(msg).to_str().unwrap().is_empty());
        }
    }

    #[test]
    fn quota_flow_through_the_c_abi() {
        unsafe {
            // One-agent economy with a government firm via JSON.
            let econ_doc = {
                let mut econ = badmarket::economy::build_one_agent_economy();
                econ.firms
                    .push(badmarket::firms::Technology::zero_firm(2));
                econ.consumers[0].shares = vec![1.0];
                econ.commodities.regulated_count = 1;
                badmarket::io::serialize_economy(&econ)
            };
            let econ_json = CString::new(econ_doc).unwrap();
            let mut econ: *mut BmEconomy = std::ptr::null_mut();
            assert_eq!(
                bm_economy_from_json(econ_json.as_ptr(), &mut econ),
                BmStatus::Ok
            );
            let quota = CString::new(r#"{"regulated_count": 1, "quotas": {"0": [-0.5]}}"#).unwrap();
            let mut cert: *mut BmQuotaCertificate = std::ptr::null_mut();
            let cfg = bm_solver_config_default();
            assert_eq!(
                bm_solve_quota(econ, quota.as_ptr(), cfg, &mut cert),
                BmStatus::Ok
            );
            let mut ok = 0i32;
            assert_eq!(
                bm_verify_quota(econ, quota.as_ptr(), cert, 1e-8, &mut ok),
                BmStatus::Ok
            );
            assert_eq!(ok, 1);
            bm_quota_certificate_free(cert);
            bm_economy_free(econ);
        }
    }

    #[test]
    fn null_arguments_are_rejected() {
        unsafe {
            let mut econ: *mut BmEconomy = std::ptr::null_mut();
            assert_eq!(
                bm_economy_from_json(std::ptr::null(), &mut econ),
                BmStatus::NullArgument
            );
            assert_eq!(
                bm_economy_build_hara(3, std::ptr::null_mut()),
                BmStatus::NullArgument
            );
            let mut passed = 0i32;
            assert_eq!(
                bm_economy_validate(std::ptr::null(), &mut passed),
                BmStatus::NullArgument
            );
        }
    }
}
