//! C ABI over the tubempc library.
//!
//! Objects are opaque heap handles created by `*_new` functions and released
//! by the matching `*_free`. Every fallible call returns a [`TubempcStatus`];
//! on failure the message is kept per thread and read back with
//! [`tubempc_last_error_message`]. Panics never cross the boundary.

use nalgebra::DVector;
use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use tubempc::design::{design, CaseId, ControllerKind, DesignBundle, DesignError};
use tubempc::mpc::{Controller, MpcError};
use tubempc::sim::{run_bundle, DisturbanceMode};

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TubempcStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    /// A design certificate failed; the message names it.
    Certification = 3,
    /// The controller found no feasible plan.
    Infeasible = 4,
    /// Any other library error.
    Failed = 5,
    /// The output buffer is too small; the required size was reported.
    BufferTooSmall = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TubempcCase {
    Case1 = 1,
    Case2 = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TubempcControllerKind {
    Tmpc = 0,
    ParentChild = 1,
    Deterministic = 2,
    TmpcExtended = 3,
}

/// Summary of a closed-loop run. Absent steps are -1.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TubempcSummary {
    pub final_cost: f64,
    pub switch_step: i64,
    pub infeasible_step: i64,
    pub mean_t_child_us: f64,
    pub mean_t_parent_us: f64,
    pub steps_run: u64,
}

/// Opaque design bundle.
pub struct TubempcDesign {
    bundle: DesignBundle,
}

/// Opaque controller; owns its own copy of the design data.
pub struct TubempcController {
    inner: Box<dyn Controller + Send>,
    n: usize,
    m: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: TubempcStatus, msg: impl Into<String>) -> TubempcStatus {
    set_error(msg);
    status
}

fn design_status(e: &DesignError) -> TubempcStatus {
    match e {
        DesignError::Certificate { .. } => TubempcStatus::Certification,
        DesignError::Mpc(MpcError::Infeasible { .. }) => TubempcStatus::Infeasible,
        _ => TubempcStatus::Failed,
    }
}

fn guard(f: impl FnOnce() -> TubempcStatus) -> TubempcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(TubempcStatus::Panic, "internal panic"),
    }
}

fn kind_of(kind: TubempcControllerKind) -> ControllerKind {
    match kind {
        TubempcControllerKind::Tmpc => ControllerKind::Tmpc,
        TubempcControllerKind::ParentChild => ControllerKind::Pc,
        TubempcControllerKind::Deterministic => ControllerKind::Det,
        TubempcControllerKind::TmpcExtended => ControllerKind::TmpcExt,
    }
}

fn certified(bundle: DesignBundle, out: *mut *mut TubempcDesign) -> TubempcStatus {
    let failed: Vec<String> = bundle.failed_certificates().iter().map(|c| c.name.clone()).collect();
    if !failed.is_empty() {
        return fail(TubempcStatus::Certification, format!("certificate failed: {}", failed.join(", ")));
    }
    // SAFETY: callers checked `out` for null.
    unsafe { *out = Box::into_raw(Box::new(TubempcDesign { bundle })) };
    TubempcStatus::Ok
}

/// Copy the last error message of this thread into `buf` as a
/// NUL-terminated string. Returns the message length without the NUL;
/// nothing is written when `buf` is null or `len` is too small.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn tubempc_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > bytes.len() {
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), bytes.len());
            *buf.add(bytes.len()) = 0;
        }
        bytes.len()
    })
}

/// Design and certify a preset case.
///
/// # Safety
/// `out` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn tubempc_design_new(case: TubempcCase, out: *mut *mut TubempcDesign) -> TubempcStatus {
    guard(|| {
        if out.is_null() {
            return fail(TubempcStatus::NullArgument, "out is null");
        }
        let id = match case {
            TubempcCase::Case1 => CaseId::Case1,
            TubempcCase::Case2 => CaseId::Case2,
        };
        match design(id, &Default::default()) {
            Ok(b) => certified(b, out),
            Err(e) => fail(design_status(&e), e.to_string()),
        }
    })
}

/// Load a design bundle from JSON and recompute its certificates.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tubempc_design_from_json(json: *const c_char, out: *mut *mut TubempcDesign) -> TubempcStatus {
    guard(|| {
        if json.is_null() || out.is_null() {
            return fail(TubempcStatus::NullArgument, "json or out is null");
        }
        let text = match CStr::from_ptr(json).to_str() {
            Ok(t) => t,
            Err(e) => return fail(TubempcStatus::InvalidArgument, e.to_string()),
        };
        let mut b: DesignBundle = match serde_json::from_str(text) {
            Ok(b) => b,
            Err(e) => return fail(TubempcStatus::InvalidArgument, e.to_string()),
        };
        if let Err(e) = b.validate() {
            return fail(TubempcStatus::InvalidArgument, e.to_string());
        }
        match b.certify() {
            Ok(c) => b.certificates = c,
            Err(e) => return fail(design_status(&e), e.to_string()),
        }
        certified(b, out)
    })
}

/// Serialize a design to JSON. `written` receives the length without the
/// NUL terminator; when `len` is too small nothing is copied and
/// `BufferTooSmall` is returned.
///
/// # Safety
/// `design` must come from this library; `buf` must be null or valid for
/// `len` bytes; `written` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tubempc_design_to_json(design: *const TubempcDesign, buf: *mut c_char, len: usize, written: *mut usize) -> TubempcStatus {
    guard(|| {
        if design.is_null() || written.is_null() {
            return fail(TubempcStatus::NullArgument, "design or written is null");
        }
        let text = match serde_json::to_string(&(*design).bundle) {
            Ok(t) => t,
            Err(e) => return fail(TubempcStatus::Failed, e.to_string()),
        };
        *written = text.len();
        if buf.is_null() || len <= text.len() {
            return fail(TubempcStatus::BufferTooSmall, format!("need {} bytes", text.len() + 1));
        }
        std::ptr::copy_nonoverlapping(text.as_ptr(), buf.cast::<u8>(), text.len());
        *buf.add(text.len()) = 0;
        TubempcStatus::Ok
    })
}

/// State and input dimensions of a design.
///
/// # Safety
/// `design` must come from this library; `n` and `m` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tubempc_design_dims(design: *const TubempcDesign, n: *mut usize, m: *mut usize) -> TubempcStatus {
    if design.is_null() || n.is_null() || m.is_null() {
        return fail(TubempcStatus::NullArgument, "null argument");
    }
    let sys = &(*design).bundle.system;
    *n = sys.n();
    *m = sys.m();
    TubempcStatus::Ok
}

/// # Safety
/// `design` must be null or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn tubempc_design_free(design: *mut TubempcDesign) {
    if !design.is_null() {
        drop(Box::from_raw(design));
    }
}

/// Build a controller of `kind` from a design. The design may be freed
/// afterwards.
///
/// # Safety
/// `design` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tubempc_controller_new(design: *const TubempcDesign, kind: TubempcControllerKind, out: *mut *mut TubempcController) -> TubempcStatus {
    guard(|| {
        if design.is_null() || out.is_null() {
            return fail(TubempcStatus::NullArgument, "design or out is null");
        }
        let b = &(*design).bundle;
        match b.controller(kind_of(kind)) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(TubempcController { inner, n: b.system.n(), m: b.system.m() }));
                TubempcStatus::Ok
            }
            Err(e) => fail(TubempcStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// One control step: reads `n` states from `x`, writes `m` inputs to `u`.
///
/// # Safety
/// `controller` must come from this library; `x` valid for `n` reads and
/// `u` for `m` writes.
#[no_mangle]
pub unsafe extern "C" fn tubempc_controller_step(controller: *mut TubempcController, x: *const f64, n: usize, u: *mut f64, m: usize) -> TubempcStatus {
    guard(|| {
        if controller.is_null() || x.is_null() || u.is_null() {
            return fail(TubempcStatus::NullArgument, "null argument");
        }
        let c = &mut *controller;
        if n != c.n || m != c.m {
            return fail(TubempcStatus::InvalidArgument, format!("expected n = {}, m = {}", c.n, c.m));
        }
        let xv = DVector::from_column_slice(std::slice::from_raw_parts(x, n));
        if xv.iter().any(|v| !v.is_finite()) {
            return fail(TubempcStatus::InvalidArgument, "state is not finite");
        }
        match c.inner.step(&xv) {
            Ok(o) => {
                std::slice::from_raw_parts_mut(u, m).copy_from_slice(o.u.as_slice());
                TubempcStatus::Ok
            }
            Err(e @ MpcError::Infeasible { .. }) => fail(TubempcStatus::Infeasible, e.to_string()),
            Err(e) => fail(TubempcStatus::Failed, e.to_string()),
        }
    })
}

/// Forget all plans so the next step starts from scratch.
///
/// # Safety
/// `controller` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn tubempc_controller_reset(controller: *mut TubempcController) -> TubempcStatus {
    if controller.is_null() {
        return fail(TubempcStatus::NullArgument, "controller is null");
    }
    (*controller).inner.reset();
    TubempcStatus::Ok
}

/// # Safety
/// `controller` must be null or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn tubempc_controller_free(controller: *mut TubempcController) {
    if !controller.is_null() {
        drop(Box::from_raw(controller));
    }
}

/// Seeded closed-loop run with uniform disturbances from the design's start
/// state. Controller infeasibility is reported in the summary, not as an
/// error.
///
/// # Safety
/// `design` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tubempc_run(design: *const TubempcDesign, kind: TubempcControllerKind, steps: usize, seed: u64, out: *mut TubempcSummary) -> TubempcStatus {
    guard(|| {
        if design.is_null() || out.is_null() {
            return fail(TubempcStatus::NullArgument, "design or out is null");
        }
        match run_bundle(&(*design).bundle, kind_of(kind), steps, seed, DisturbanceMode::UniformBox) {
            Ok(log) => {
                let s = log.summary();
                let step = |k: Option<usize>| k.map_or(-1, |k| k as i64);
                *out = TubempcSummary {
                    final_cost: s.final_cost,
                    switch_step: step(s.switch_step),
                    infeasible_step: step(s.infeasible_step),
                    mean_t_child_us: s.mean_t_child_us,
                    mean_t_parent_us: s.mean_t_parent_us,
                    steps_run: log.records.len() as u64,
                };
                TubempcStatus::Ok
            }
            Err(e) => fail(TubempcStatus::Failed, e.to_string()),
        }
    })
}

/// Plant update `A x + g(x) + B u + w` of the design's system.
///
/// # Safety
/// `design` must come from this library; `x`, `w` and `x_next` valid for
/// `n` values and `u` for `m`.
#[no_mangle]
pub unsafe extern "C" fn tubempc_plant_step(design: *const TubempcDesign, x: *const f64, u: *const f64, w: *const f64, x_next: *mut f64) -> TubempcStatus {
    guard(|| {
        if design.is_null() || x.is_null() || u.is_null() || w.is_null() || x_next.is_null() {
            return fail(TubempcStatus::NullArgument, "null argument");
        }
        let sys = &(*design).bundle.system;
        let (n, m) = (sys.n(), sys.m());
        let xs = DVector::from_column_slice(std::slice::from_raw_parts(x, n));
        let us = DVector::from_column_slice(std::slice::from_raw_parts(u, m));
        let ws = DVector::from_column_slice(std::slice::from_raw_parts(w, n));
        match sys.plant_step(&xs, &us, &ws) {
            Ok(next) => {
                std::slice::from_raw_parts_mut(x_next, n).copy_from_slice(next.as_slice());
                TubempcStatus::Ok
            }
            Err(v) => fail(TubempcStatus::InvalidArgument, format!("input leaves U by {v:e}")),
        }
    })
}
