//! C ABI over `cfl-core`.
//!
//! Every entry point returns a [`CflStatus`]; outputs go through pointer
//! arguments. On failure the message is kept per thread and can be read with
//! [`cfl_last_error_message`]. Strings handed out by this library must be
//! released with [`cfl_string_free`], simulations with [`cfl_sim_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cfl_core::analysis;
use cfl_core::config::ExperimentConfig;
use cfl_core::crypto::{self, AeKey, Envelope, EnvelopeSealer, Nonce, StampedPayload, Timestamp, KEY_BYTES};
use cfl_core::experiment::{build_simulation, prepare, ExperimentError};
use cfl_core::simnet::{RoundReport, Simulation};
use cfl_core::topology::ClientId;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CflStatus {
    Ok = 0,
    NullPointer = 1,
    /// Unparseable or invalid configuration, or malformed input text.
    Config = 2,
    /// No leader or route can serve some cluster.
    Infeasible = 3,
    /// Arguments outside the mathematical domain of the call.
    Domain = 4,
    /// Authentication failure or an unsupported key.
    Crypto = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
    /// Any other simulation error.
    Internal = 7,
}

/// Opaque simulation handle.
pub struct CflSimulation {
    sim: Simulation,
    last: Option<RoundReport>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: CflStatus, msg: impl Into<String>) -> CflStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> CflStatus) -> CflStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(CflStatus::Panic, format!("panic: {msg}"))
        }
    }
}

fn experiment_status(e: &ExperimentError) -> CflStatus {
    if e.is_infeasible() {
        return CflStatus::Infeasible;
    }
    match e.exit_code() {
        2 => CflStatus::Config,
        _ => CflStatus::Internal,
    }
}

unsafe fn read_str<'a>(s: *const c_char) -> Result<&'a str, CflStatus> {
    if s.is_null() {
        return Err(fail(CflStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| fail(CflStatus::Config, "string argument is not UTF-8"))
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> CflStatus {
    match CString::new(s) {
        Ok(c) => {
            *out = c.into_raw();
            CflStatus::Ok
        }
        Err(_) => fail(CflStatus::Internal, "output contains a NUL byte"),
    }
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn cfl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cfl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds scenario, data and keys from an experiment config in JSON.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cfl_sim_new_from_json(json: *const c_char, out: *mut *mut CflSimulation) -> CflStatus {
    guard(|| {
        if out.is_null() {
            return fail(CflStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let text = match read_str(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let cfg = match ExperimentConfig::from_json(text) {
            Ok(c) => c,
            Err(e) => return fail(CflStatus::Config, e.to_string()),
        };
        let built = prepare(&cfg).and_then(|p| build_simulation(&cfg, &p));
        match built {
            Ok(sim) => {
                *out = Box::into_raw(Box::new(CflSimulation { sim, last: None }));
                CflStatus::Ok
            }
            Err(e) => fail(experiment_status(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `sim` must be NULL or a handle from [`cfl_sim_new_from_json`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cfl_sim_free(sim: *mut CflSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Runs one round of local training and masked aggregation.
///
/// # Safety
/// `sim` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cfl_sim_run_round(sim: *mut CflSimulation) -> CflStatus {
    guard(|| {
        let Some(h) = sim.as_mut() else {
            return fail(CflStatus::NullPointer, "sim is null");
        };
        match h.sim.run_round() {
            Ok(r) => {
                h.last = Some(r);
                CflStatus::Ok
            }
            Err(e) => {
                let e = ExperimentError::from(e);
                fail(experiment_status(&e), e.to_string())
            }
        }
    })
}

/// Rounds completed so far.
///
/// # Safety
/// `sim` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cfl_sim_round(sim: *const CflSimulation, out: *mut u64) -> CflStatus {
    guard(|| match (sim.as_ref(), out.is_null()) {
        (Some(h), false) => {
            *out = h.sim.round();
            CflStatus::Ok
        }
        _ => fail(CflStatus::NullPointer, "null argument"),
    })
}

/// Copies the global model into `buf`. `len` receives the dimension; when
/// `capacity` is too small nothing is copied and `Domain` is returned.
///
/// # Safety
/// `buf` must hold `capacity` doubles (may be NULL when `capacity` is 0).
#[no_mangle]
pub unsafe extern "C" fn cfl_sim_global_model(
    sim: *const CflSimulation,
    buf: *mut f64,
    capacity: usize,
    len: *mut usize,
) -> CflStatus {
    guard(|| {
        let (Some(h), false) = (sim.as_ref(), len.is_null()) else {
            return fail(CflStatus::NullPointer, "null argument");
        };
        let w = &h.sim.global().values;
        *len = w.len();
        if capacity < w.len() {
            return fail(CflStatus::Domain, format!("model has {} entries, buffer {capacity}", w.len()));
        }
        if buf.is_null() {
            return fail(CflStatus::NullPointer, "buf is null");
        }
        ptr::copy_nonoverlapping(w.as_ptr(), buf, w.len());
        CflStatus::Ok
    })
}

/// JSON of the most recent round report. Free with [`cfl_string_free`].
///
/// # Safety
/// `sim` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cfl_report_json(sim: *const CflSimulation, out: *mut *mut c_char) -> CflStatus {
    guard(|| {
        let (Some(h), false) = (sim.as_ref(), out.is_null()) else {
            return fail(CflStatus::NullPointer, "null argument");
        };
        let Some(r) = &h.last else {
            return fail(CflStatus::Domain, "no round has run yet");
        };
        match serde_json::to_string(r) {
            Ok(s) => write_string(out, s),
            Err(e) => fail(CflStatus::Internal, e.to_string()),
        }
    })
}

/// Key-ring size for a cluster of `n` at connectivity target `p_c`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cfl_ring_size(n: usize, p_c: f64, out: *mut usize) -> CflStatus {
    guard(|| {
        if out.is_null() {
            return fail(CflStatus::NullPointer, "out is null");
        }
        match analysis::ring_size(n, p_c) {
            Ok(m) => {
                *out = m;
                CflStatus::Ok
            }
            Err(e) => fail(CflStatus::Domain, e.to_string()),
        }
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cfl_edge_probability(n: usize, p_c: f64, out: *mut f64) -> CflStatus {
    guard(|| {
        if out.is_null() {
            return fail(CflStatus::NullPointer, "out is null");
        }
        match analysis::edge_probability(n, p_c) {
            Ok(r) => {
                *out = r;
                CflStatus::Ok
            }
            Err(e) => fail(CflStatus::Domain, e.to_string()),
        }
    })
}

/// Derives a 16-byte AE key from `seed`.
///
/// # Safety
/// `key_out` must hold 16 bytes.
#[no_mangle]
pub unsafe extern "C" fn cfl_ae_keygen(kappa_bits: u32, seed: u64, key_out: *mut u8) -> CflStatus {
    guard(|| {
        if key_out.is_null() {
            return fail(CflStatus::NullPointer, "key_out is null");
        }
        match crypto::ae_gen(kappa_bits, seed) {
            Ok(k) => {
                ptr::copy_nonoverlapping(k.0.as_ptr(), key_out, KEY_BYTES);
                CflStatus::Ok
            }
            Err(e) => fail(CflStatus::Crypto, e.to_string()),
        }
    })
}

unsafe fn read_key(key: *const u8) -> AeKey {
    let mut k = [0u8; KEY_BYTES];
    ptr::copy_nonoverlapping(key, k.as_mut_ptr(), KEY_BYTES);
    AeKey(k)
}

/// Seals `msg` for the link `(a, b)` and returns the envelope as JSON.
/// Nonce uniqueness across calls is the caller's responsibility.
///
/// # Safety
/// `key` must hold 16 bytes, `msg` `msg_len` bytes (NULL allowed when 0).
#[no_mangle]
pub unsafe extern "C" fn cfl_ae_seal(
    key: *const u8,
    msg: *const u8,
    msg_len: usize,
    round: u64,
    step: u32,
    counter: u32,
    a: u32,
    b: u32,
    envelope_json: *mut *mut c_char,
) -> CflStatus {
    guard(|| {
        if key.is_null() || envelope_json.is_null() || (msg.is_null() && msg_len > 0) {
            return fail(CflStatus::NullPointer, "null argument");
        }
        let payload = if msg_len == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(msg, msg_len).to_vec()
        };
        let stamped = StampedPayload {
            payload,
            timestamp: Timestamp { round, step, wall_ms: 0 },
        };
        let env = EnvelopeSealer::new().encrypt(
            &stamped,
            &read_key(key),
            Nonce::from_parts(round, step, counter),
            (ClientId(a), ClientId(b)),
        );
        match env.map(|e| serde_json::to_string(&e)) {
            Ok(Ok(s)) => write_string(envelope_json, s),
            Ok(Err(e)) => fail(CflStatus::Internal, e.to_string()),
            Err(e) => fail(CflStatus::Crypto, e.to_string()),
        }
    })
}

/// Opens an envelope from [`cfl_ae_seal`]. `msg_len` receives the payload
/// length; if `capacity` is smaller nothing is copied and `Domain` is
/// returned. Any tampering yields `Crypto`.
///
/// # Safety
/// `key` must hold 16 bytes, `buf` `capacity` bytes (NULL allowed when 0).
#[no_mangle]
pub unsafe extern "C" fn cfl_ae_open(
    key: *const u8,
    envelope_json: *const c_char,
    buf: *mut u8,
    capacity: usize,
    msg_len: *mut usize,
) -> CflStatus {
    guard(|| {
        if key.is_null() || msg_len.is_null() {
            return fail(CflStatus::NullPointer, "null argument");
        }
        let text = match read_str(envelope_json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let env: Envelope = match serde_json::from_str(text) {
            Ok(e) => e,
            Err(e) => return fail(CflStatus::Config, format!("envelope: {e}")),
        };
        let opened = match crypto::ae_decrypt(&env, &read_key(key)) {
            Ok(p) => p,
            Err(e) => return fail(CflStatus::Crypto, e.to_string()),
        };
        let n = opened.payload.len();
        *msg_len = n;
        if capacity < n {
            return fail(CflStatus::Domain, format!("payload has {n} bytes, buffer {capacity}"));
        }
        if n > 0 {
            if buf.is_null() {
                return fail(CflStatus::NullPointer, "buf is null");
            }
            ptr::copy_nonoverlapping(opened.payload.as_ptr(), buf, n);
        }
        CflStatus::Ok
    })
}
