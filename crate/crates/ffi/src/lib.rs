//! C ABI over a trained estimator bundle and the relaxed ML detector.
//!
//! Every function returns a [`MixadcStatus`]; on failure the thread-local
//! message from [`mixadc_last_error_message`] says why. Arrays are dense,
//! row-major `double` buffers whose lengths the caller passes explicitly.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mixadc::airlink::{Observation, SelectionMasks};
use mixadc::detector::{detect_nml, Problem};
use mixadc::modulation::Constellation;
use mixadc::trainer::{load_deployment, Deployment};
use mixadc::Error;
use ndarray::{Array3, ArrayView1, ArrayView2};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixadcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    CorruptBundle = 4,
    VersionMismatch = 5,
    Shape = 6,
    Panic = 7,
    Internal = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MixadcConstellation {
    #[default]
    Qpsk = 0,
    Qam16 = 1,
}

/// Problem sizes of a loaded estimator.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MixadcDims {
    /// Receive antennas.
    pub m: usize,
    /// Users.
    pub k: usize,
    /// Pilot length.
    pub np: usize,
    /// Antennas with full-resolution converters.
    pub m_a: usize,
}

/// Opaque handle to a deployed estimator.
pub struct MixadcEstimator {
    dep: Deployment,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn status_of(e: &Error) -> MixadcStatus {
    match e {
        Error::Io { .. } | Error::MissingBundle(_) => MixadcStatus::Io,
        Error::CorruptBundle(_) | Error::Serde(_) => MixadcStatus::CorruptBundle,
        Error::VersionMismatch { .. } => MixadcStatus::VersionMismatch,
        Error::Shape(_) => MixadcStatus::Shape,
        Error::Config(_) | Error::Domain(_) => MixadcStatus::InvalidArgument,
        _ => MixadcStatus::Internal,
    }
}

struct Fail(MixadcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MixadcStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MixadcStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            MixadcStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(MixadcStatus::NullPointer, format!("{what} is null"))
}

fn check_len(what: &str, got: usize, want: usize) -> Result<(), Fail> {
    if got != want {
        return Err(Fail(
            MixadcStatus::Shape,
            format!("{what} has {got} entries, expected {want}"),
        ));
    }
    Ok(())
}

unsafe fn estimator<'a>(p: *const MixadcEstimator) -> Result<&'a MixadcEstimator, Fail> {
    p.as_ref().ok_or_else(|| null("estimator"))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn mixadc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a bundle written by `mixadc train`. On success `*out` owns a handle
/// that must be released with [`mixadc_estimator_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mixadc_estimator_load(
    path: *const c_char,
    out: *mut *mut MixadcEstimator,
) -> MixadcStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(MixadcStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let dep = load_deployment(Path::new(path))?;
        *out = Box::into_raw(Box::new(MixadcEstimator { dep }));
        Ok(())
    })
}

/// Releases a handle from [`mixadc_estimator_load`]; null is ignored.
///
/// # Safety
/// `est` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mixadc_estimator_free(est: *mut MixadcEstimator) {
    if !est.is_null() {
        drop(Box::from_raw(est));
    }
}

/// # Safety
/// `est` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mixadc_estimator_dims(
    est: *const MixadcEstimator,
    out: *mut MixadcDims,
) -> MixadcStatus {
    guard(|| {
        let e = estimator(est)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = &e.dep.cfg;
        *out = MixadcDims {
            m: c.m,
            k: c.k,
            np: c.np,
            m_a: e.dep.masks.m_a(),
        };
        Ok(())
    })
}

/// Copies the power-normalized real pilot, `2K × Np` row-major.
///
/// # Safety
/// `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mixadc_estimator_pilot(
    est: *const MixadcEstimator,
    out: *mut f64,
    len: usize,
) -> MixadcStatus {
    guard(|| {
        let e = estimator(est)?;
        let p = &e.dep.pilot;
        check_len("pilot buffer", len, p.len())?;
        let dst = slice_mut(out, len, "out")?;
        for (d, v) in dst.iter_mut().zip(p.iter()) {
            *d = *v;
        }
        Ok(())
    })
}

/// Writes 1 for antennas with full-resolution converters and 0 for one-bit
/// antennas, `M` entries.
///
/// # Safety
/// `flags` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mixadc_estimator_selection(
    est: *const MixadcEstimator,
    flags: *mut u8,
    len: usize,
) -> MixadcStatus {
    guard(|| {
        let e = estimator(est)?;
        let m = e.dep.masks.m();
        check_len("selection buffer", len, m)?;
        if flags.is_null() {
            return Err(null("flags"));
        }
        let dst = std::slice::from_raw_parts_mut(flags, len);
        dst.fill(0);
        for &i in &e.dep.masks.set_a {
            dst[i] = 1;
        }
        Ok(())
    })
}

/// Channel estimates from `n` unquantized received pilot blocks
/// `Z̃ ∈ R^{2M×Np}` (row-major, `n·2M·Np` doubles). The estimator applies its
/// own allocation: full-resolution rows pass through, the others are reduced
/// to their signs. `out` receives `n·2M·K` doubles: per sample, the first `K`
/// columns of the real-stacked channel.
///
/// # Safety
/// `z` must point to `z_len` readable and `out` to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mixadc_estimator_estimate(
    est: *const MixadcEstimator,
    z: *const f64,
    z_len: usize,
    n: usize,
    out: *mut f64,
    out_len: usize,
) -> MixadcStatus {
    guard(|| {
        let e = estimator(est)?;
        let c = &e.dep.cfg;
        let rows = 2 * c.m;
        if n == 0 {
            return Err(Fail(MixadcStatus::InvalidArgument, "n must be positive".into()));
        }
        check_len("z", z_len, n * rows * c.np)?;
        check_len("out", out_len, n * rows * c.k)?;
        let zs = slice(z, z_len, "z")?;
        let z = Array3::from_shape_vec((n, rows, c.np), zs.to_vec())
            .map_err(|e| Fail(MixadcStatus::Shape, e.to_string()))?;
        let obs = Observation::new(z, &e.dep.masks, 0.0);
        let h = e.dep.estimate(&obs.ya, &obs.yb)?;
        let dst = slice_mut(out, out_len, "out")?;
        for (d, v) in dst.iter_mut().zip(h.iter()) {
            *d = *v;
        }
        Ok(())
    })
}

/// Relaxed maximum-likelihood detection of one payload vector.
///
/// `h` is the real-stacked channel `H̃ ∈ R^{2M×2K}` (row-major), `y` the
/// received `2M` vector (signs on one-bit rows), `full` the per-antenna
/// full-resolution flags (`M` bytes). Writes `K` constellation labels
/// (Gray-mapped, most significant bit on the in-phase axis).
///
/// # Safety
/// All pointers must reference buffers of the stated lengths.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn mixadc_detect_nml(
    h: *const f64,
    m: usize,
    k: usize,
    y: *const f64,
    full: *const u8,
    sigma2: f64,
    rho: f64,
    constellation: MixadcConstellation,
    labels: *mut u32,
) -> MixadcStatus {
    guard(|| {
        if m == 0 || k == 0 {
            return Err(Fail(MixadcStatus::InvalidArgument, "m and k must be positive".into()));
        }
        let hs = slice(h, 4 * m * k, "h")?;
        let ys = slice(y, 2 * m, "y")?;
        if full.is_null() {
            return Err(null("full"));
        }
        if labels.is_null() {
            return Err(null("labels"));
        }
        let flags: Vec<bool> = std::slice::from_raw_parts(full, m).iter().map(|&f| f != 0).collect();
        let masks = SelectionMasks::from_flags(&flags);
        let hv = ArrayView2::from_shape((2 * m, 2 * k), hs)
            .map_err(|e| Fail(MixadcStatus::Shape, e.to_string()))?;
        let p = Problem {
            h: hv,
            y: ArrayView1::from(ys),
            masks: &masks,
            sigma2,
            rho,
        };
        let c = match constellation {
            MixadcConstellation::Qpsk => Constellation::Qpsk,
            MixadcConstellation::Qam16 => Constellation::Qam16,
        };
        let det = detect_nml(&p, c)?;
        let out = std::slice::from_raw_parts_mut(labels, k);
        for (o, &l) in out.iter_mut().zip(&det.labels) {
            *o = l as u32;
        }
        Ok(())
    })
}
