//! C ABI for the discrete flow matching engine.
//!
//! Conventions:
//! - Every fallible call returns a [`DfmStatus`]; `DFM_STATUS_OK` is 0.
//! - Engines are opaque handles created from a TOML config (file or string)
//!   and must be released with [`dfm_engine_free`].
//! - Strings returned through `char**` are owned by the library and must be
//!   released with [`dfm_string_free`].
//! - On any non-OK status, [`dfm_last_error`] retrieves a thread-local
//!   message describing the failure.

use dfm_core::config::ExperimentConfig;
use dfm_core::experiment;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DfmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    ConfigError = 3,
    RuntimeError = 4,
    BufferTooSmall = 5,
}

/// Opaque engine handle: a loaded experiment configuration.
pub struct DfmEngine {
    config: ExperimentConfig,
}

/// Copy the last error message for this thread into `buf` (NUL-terminated,
/// truncated to `cap`). Returns the full message length in bytes, excluding
/// the terminator. Safe to call with `buf == NULL` or `cap == 0` to query
/// the required size.
///
/// # Safety
/// `buf`, when non-NULL, must point to at least `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn dfm_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dfm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, DfmStatus> {
    if ptr.is_null() {
        set_last_error("NULL string argument");
        return Err(DfmStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_last_error("argument is not valid UTF-8");
        DfmStatus::InvalidUtf8
    })
}

fn engine_from_config(config: ExperimentConfig, out: *mut *mut DfmEngine) -> DfmStatus {
    let handle = Box::new(DfmEngine { config });
    unsafe {
        *out = Box::into_raw(handle);
    }
    DfmStatus::Ok
}

/// Create an engine from a TOML config file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dfm_engine_new(
    path: *const c_char,
    out: *mut *mut DfmEngine,
) -> DfmStatus {
    if out.is_null() {
        set_last_error("NULL output pointer");
        return DfmStatus::NullPointer;
    }
    let path = match cstr_arg(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match ExperimentConfig::load(std::path::Path::new(path)) {
        Ok(config) => engine_from_config(config, out),
        Err(e) => {
            set_last_error(&e.to_string());
            DfmStatus::ConfigError
        }
    }
}

/// Create an engine from TOML text.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dfm_engine_from_toml(
    text: *const c_char,
    out: *mut *mut DfmEngine,
) -> DfmStatus {
    if out.is_null() {
        set_last_error("NULL output pointer");
        return DfmStatus::NullPointer;
    }
    let text = match cstr_arg(text) {
        Ok(t) => t,
        Err(s) => return s,
    };
    match ExperimentConfig::from_toml_str(text) {
        Ok(config) => engine_from_config(config, out),
        Err(e) => {
            set_last_error(&e.to_string());
            DfmStatus::ConfigError
        }
    }
}

/// Release an engine. NULL is a no-op.
///
/// # Safety
/// `engine` must be a pointer previously returned by an engine constructor
/// and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dfm_engine_free(engine: *mut DfmEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Run the engine's configured pipeline; on success `*out_json` receives a
/// newly allocated JSON metric report (release with [`dfm_string_free`]).
///
/// # Safety
/// `engine` must be a live engine handle; `out_json` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dfm_engine_run(
    engine: *const DfmEngine,
    out_json: *mut *mut c_char,
) -> DfmStatus {
    if engine.is_null() || out_json.is_null() {
        set_last_error("NULL engine or output pointer");
        return DfmStatus::NullPointer;
    }
    let engine = &*engine;
    match experiment::run_experiment(&engine.config) {
        Ok(output) => {
            let json = output.report.to_json().replace('\0', " ");
            match CString::new(json) {
                Ok(c) => {
                    *out_json = c.into_raw();
                    DfmStatus::Ok
                }
                Err(_) => {
                    set_last_error("report contained interior NUL");
                    DfmStatus::RuntimeError
                }
            }
        }
        Err(e) => {
            set_last_error(&e.to_string());
            DfmStatus::RuntimeError
        }
    }
}

/// One seeded oracle generation under the engine's config. Writes up to
/// `capacity` token ids into `out_tokens` and the true sequence length into
/// `out_len`; fails with `BufferTooSmall` (after setting `*out_len`) when the
/// buffer cannot hold the sequence.
///
/// # Safety
/// `out_tokens` must point to `capacity` writable u32 slots; `out_len` must
/// be valid.
#[no_mangle]
pub unsafe extern "C" fn dfm_engine_generate(
    engine: *const DfmEngine,
    seed: u64,
    out_tokens: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> DfmStatus {
    if engine.is_null() || out_len.is_null() {
        set_last_error("NULL engine or output pointer");
        return DfmStatus::NullPointer;
    }
    let engine = &*engine;
    match experiment::sample_once(&engine.config, seed, None) {
        Ok((sequence, _)) => {
            let tokens = sequence.tokens();
            *out_len = tokens.len();
            if tokens.len() > capacity {
                set_last_error("token buffer too small");
                return DfmStatus::BufferTooSmall;
            }
            if out_tokens.is_null() {
                set_last_error("NULL token buffer");
                return DfmStatus::NullPointer;
            }
            for (i, &t) in tokens.iter().enumerate() {
                *out_tokens.add(i) = t as u32;
            }
            DfmStatus::Ok
        }
        Err(e) => {
            set_last_error(&e.to_string());
            DfmStatus::RuntimeError
        }
    }
}

/// Total variation distance between two length-`len` distributions.
///
/// # Safety
/// `p` and `q` must point to `len` readable doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dfm_tv_distance(
    p: *const f64,
    q: *const f64,
    len: usize,
    out: *mut f64,
) -> DfmStatus {
    if p.is_null() || q.is_null() || out.is_null() {
        set_last_error("NULL argument");
        return DfmStatus::NullPointer;
    }
    let ps = std::slice::from_raw_parts(p, len);
    let qs = std::slice::from_raw_parts(q, len);
    match dfm_core::metrics::tv_distance(ps, qs) {
        Ok(v) => {
            *out = v;
            DfmStatus::Ok
        }
        Err(e) => {
            set_last_error(&e.to_string());
            DfmStatus::RuntimeError
        }
    }
}

/// Release a string allocated by this library. NULL is a no-op.
///
/// # Safety
/// `s` must originate from a `dfm_*` call that allocates strings.
#[no_mangle]
pub unsafe extern "C" fn dfm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
