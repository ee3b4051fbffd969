//! C interface: load a checkpoint, stream events in, read OD forecasts out.
//!
//! Every function returns a [`CmodStatus`]. On failure a message is kept per thread and
//! can be read with [`cmod_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use cmod::model::{clamp_predictions, MemoryBank};
use cmod::training::load_checkpoint;
use cmod::{Error, EventBatch, Matrix, Model, TransactionEvent};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmodStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    BadCheckpoint = 4,
    TimeRegression = 5,
    NotReady = 6,
    BufferTooSmall = 7,
    Internal = 8,
}

/// Opaque engine handle.
pub struct CmodEngine {
    model: Model,
    bank: MemoryBank,
    pending: Vec<TransactionEvent>,
    prediction: Option<Matrix>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn fail(status: CmodStatus, msg: impl Into<String>) -> CmodStatus {
    set_error(msg.into());
    status
}

fn from_error(e: Error) -> CmodStatus {
    let status = match &e {
        Error::Io { .. } => CmodStatus::Io,
        Error::BadMagic
        | Error::VersionMismatch { .. }
        | Error::ChecksumMismatch
        | Error::ShapeMismatch { .. }
        | Error::Json(_) => CmodStatus::BadCheckpoint,
        Error::TimeRegression { .. } => CmodStatus::TimeRegression,
        Error::NonFinite { .. } => CmodStatus::Internal,
        _ => CmodStatus::InvalidArgument,
    };
    fail(status, format!("{}: {e}", e.class()))
}

fn guard(f: impl FnOnce() -> CmodStatus) -> CmodStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => {
            if status == CmodStatus::Ok {
                LAST_ERROR.with(|e| *e.borrow_mut() = None);
            }
            status
        }
        Err(_) => fail(CmodStatus::Internal, "internal panic"),
    }
}

unsafe fn engine_mut<'a>(engine: *mut CmodEngine) -> Result<&'a mut CmodEngine, CmodStatus> {
    engine.as_mut().ok_or_else(|| fail(CmodStatus::NullPointer, "engine handle is null"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cmod_version() -> *const c_char {
    static VERSION: &[u8] = concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes();
    VERSION.as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated, always
/// NUL-terminated when `len > 0`). Returns the full message length including the NUL,
/// or 0 when there is no message.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn cmod_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match &*e.borrow() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes_with_nul();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len);
                std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
                *buf.add(n - 1) = 0;
            }
            bytes.len()
        }
    })
}

/// Loads a checkpoint and starts an engine whose memories begin at time `t0`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cmod_engine_open(path: *const c_char, t0: f64, out: *mut *mut CmodEngine) -> CmodStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(CmodStatus::NullPointer, "path and out must not be null");
        }
        if !t0.is_finite() {
            return fail(CmodStatus::InvalidArgument, "t0 must be finite");
        }
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            return fail(CmodStatus::InvalidArgument, "path is not UTF-8");
        };
        let model = match load_checkpoint(Path::new(path)).and_then(|c| c.into_model()) {
            Ok(m) => m,
            Err(e) => return from_error(e),
        };
        let bank = model.fresh_bank(t0);
        *out = Box::into_raw(Box::new(CmodEngine { model, bank, pending: Vec::new(), prediction: None }));
        CmodStatus::Ok
    })
}

/// Releases an engine. Null is ignored.
///
/// # Safety
/// `engine` must be null or a handle from [`cmod_engine_open`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cmod_engine_free(engine: *mut CmodEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Number of nodes the engine's model was trained on.
///
/// # Safety
/// `engine` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cmod_engine_node_count(engine: *const CmodEngine, out: *mut usize) -> CmodStatus {
    guard(|| match (engine.as_ref(), out.is_null()) {
        (Some(e), false) => {
            *out = e.model.dims.n;
            CmodStatus::Ok
        }
        _ => fail(CmodStatus::NullPointer, "engine and out must not be null"),
    })
}

/// Time of the last memory update.
///
/// # Safety
/// `engine` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cmod_engine_last_update(engine: *const CmodEngine, out: *mut f64) -> CmodStatus {
    guard(|| match (engine.as_ref(), out.is_null()) {
        (Some(e), false) => {
            *out = e.bank.last_update;
            CmodStatus::Ok
        }
        _ => fail(CmodStatus::NullPointer, "engine and out must not be null"),
    })
}

/// Queues one trip. Timestamps must not decrease and must not precede the last update.
///
/// # Safety
/// `engine` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cmod_engine_push_event(
    engine: *mut CmodEngine,
    origin: usize,
    destination: usize,
    timestamp: f64,
) -> CmodStatus {
    guard(|| {
        let e = match engine_mut(engine) {
            Ok(e) => e,
            Err(s) => return s,
        };
        let n = e.model.dims.n;
        if origin >= n || destination >= n {
            return fail(CmodStatus::InvalidArgument, format!("node index out of range for {n} nodes"));
        }
        if !timestamp.is_finite() {
            return fail(CmodStatus::InvalidArgument, "timestamp must be finite");
        }
        let floor = e.pending.last().map_or(e.bank.last_update, |p| p.timestamp);
        if timestamp < floor {
            return fail(CmodStatus::TimeRegression, format!("timestamp {timestamp} precedes {floor}"));
        }
        e.pending.push(TransactionEvent::new(origin, destination, timestamp));
        CmodStatus::Ok
    })
}

/// Updates the memories with every queued event before `window_end` and computes the
/// forecast for `[window_end, window_end + tau)`. Later events stay queued.
///
/// # Safety
/// `engine` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cmod_engine_advance(engine: *mut CmodEngine, window_end: f64) -> CmodStatus {
    guard(|| {
        let e = match engine_mut(engine) {
            Ok(e) => e,
            Err(s) => return s,
        };
        if !window_end.is_finite() {
            return fail(CmodStatus::InvalidArgument, "window_end must be finite");
        }
        let split = e.pending.partition_point(|p| p.timestamp < window_end);
        let rest = e.pending.split_off(split);
        let events = std::mem::replace(&mut e.pending, rest);
        let batch = EventBatch { events, window_start: e.bank.last_update, window_end };
        match e.model.forward(&e.bank, &batch) {
            Ok(fwd) => {
                e.bank = fwd.bank;
                e.prediction = Some(fwd.raw);
                CmodStatus::Ok
            }
            Err(err) => {
                let mut events = batch.events;
                events.append(&mut e.pending);
                e.pending = events;
                from_error(err)
            }
        }
    })
}

/// Writes the latest forecast (row-major `N×N`, negatives clamped to zero) into `out`.
///
/// # Safety
/// `engine` must be a live handle; `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn cmod_engine_predict(engine: *const CmodEngine, out: *mut f64, len: usize) -> CmodStatus {
    guard(|| {
        let Some(e) = engine.as_ref() else {
            return fail(CmodStatus::NullPointer, "engine handle is null");
        };
        let Some(raw) = &e.prediction else {
            return fail(CmodStatus::NotReady, "no forecast yet; call cmod_engine_advance first");
        };
        let od = clamp_predictions(raw);
        let values = od.values().as_slice();
        if out.is_null() {
            return fail(CmodStatus::NullPointer, "output buffer is null");
        }
        if len < values.len() {
            return fail(CmodStatus::BufferTooSmall, format!("need {} values, buffer holds {len}", values.len()));
        }
        std::ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
        CmodStatus::Ok
    })
}

/// Drops queued events and the forecast and restarts the memories at `t0`.
///
/// # Safety
/// `engine` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cmod_engine_reset(engine: *mut CmodEngine, t0: f64) -> CmodStatus {
    guard(|| {
        let e = match engine_mut(engine) {
            Ok(e) => e,
            Err(s) => return s,
        };
        if !t0.is_finite() {
            return fail(CmodStatus::InvalidArgument, "t0 must be finite");
        }
        e.bank = e.model.fresh_bank(t0);
        e.pending.clear();
        e.prediction = None;
        CmodStatus::Ok
    })
}
