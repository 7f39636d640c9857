//! C interface to `smr`.
//!
//! Matrices and recovery results are opaque handles owned by the caller and
//! released with the matching `*_free`. Every fallible call returns an
//! `SmrStatus`; the message of the last failure on the calling thread is
//! available through `smr_last_error`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::{DMatrix, DVector};
use smr::approximator::{whiten_and_recover, ApproximatorConfig, RecoveryResult};
use smr::manifest::resolve_basis;
use smr::matcore::DenseSymmetric;
use smr::oracles::{MeasurementOracle, QueryLedger};
use smr::recovery::{lap_pinv_solve, mmatrix_inv_solve, perturbed_laplacian_solve, PathConfig};
use smr::SmrError;

/// Status codes. Values are stable.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmrStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad dimensions, parameters out of range or malformed input.
    InvalidArgument = 2,
    /// A certificate or solve failed, or the right-hand side is inconsistent.
    AlgorithmFailure = 3,
    /// Caller buffer is too small; the required length is reported.
    BufferTooSmall = 4,
    Panic = 5,
}

/// Solver family for `smr_solve`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmrSolveMode {
    /// A with an unknown Laplacian L, gamma·A ⪯ L ⪯ A.
    Perturbed = 0,
    /// A is the inverse of a symmetric M-matrix.
    MInverse = 1,
    /// A is the pseudoinverse of a Laplacian.
    LaplacianPinv = 2,
}

/// Opaque symmetric matrix.
pub struct SmrMatrix {
    inner: DenseSymmetric,
}

/// Opaque recovery result.
pub struct SmrRecovery {
    inner: RecoveryResult,
}

/// Certificate of a recovery: lo·B ⪯ X ⪯ B holds when `holds` is nonzero.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SmrCertificate {
    pub lo: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub holds: i32,
    pub iterations: usize,
}

/// Relative asymmetry accepted by `smr_matrix_new`.
const SYMMETRY_TOL: f64 = 1e-12;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &SmrError) -> SmrStatus {
    if e.exit_code() == 1 {
        SmrStatus::InvalidArgument
    } else {
        SmrStatus::AlgorithmFailure
    }
}

fn guard<F: FnOnce() -> Result<(), (SmrStatus, String)>>(f: F) -> SmrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SmrStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SmrStatus::Panic
        }
    }
}

fn lib_err(e: SmrError) -> (SmrStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(name: &str) -> (SmrStatus, String) {
    (SmrStatus::NullPointer, format!("{name} is null"))
}

/// Message of the last failure on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn smr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn smr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a matrix from n·n row-major entries. The input must be symmetric
/// up to a relative 1e-12.
///
/// # Safety
/// `data` must point to n·n readable doubles and `out` to a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn smr_matrix_new(n: usize, data: *const f64, out: *mut *mut SmrMatrix) -> SmrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if data.is_null() {
            return Err(null("data"));
        }
        if n == 0 {
            return Err((SmrStatus::InvalidArgument, "n must be positive".into()));
        }
        let len = n.checked_mul(n).ok_or((SmrStatus::InvalidArgument, "n too large".into()))?;
        let entries = std::slice::from_raw_parts(data, len);
        let scale = entries.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..n {
            for j in (i + 1)..n {
                if (entries[i * n + j] - entries[j * n + i]).abs() > SYMMETRY_TOL * scale {
                    return Err((SmrStatus::InvalidArgument, format!("matrix is not symmetric at ({i}, {j})")));
                }
            }
        }
        let inner = DenseSymmetric::new(DMatrix::from_row_slice(n, n, entries)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(SmrMatrix { inner }));
        Ok(())
    })
}

/// Dimension of a matrix, 0 for null.
///
/// # Safety
/// `m` must be null or a live handle from `smr_matrix_new`.
#[no_mangle]
pub unsafe extern "C" fn smr_matrix_dim(m: *const SmrMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.inner.n())
}

/// # Safety
/// `m` must be null or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn smr_matrix_free(m: *mut SmrMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Recovers nonnegative weights w over a basis family with
/// (1 − 15·eps)·gamma·B ⪯ Σ w_i·M_i ⪯ B, where B is the given matrix. `basis`
/// names a family ("diag", "edges", "sdd", "edges-ones") or a manifest path.
///
/// # Safety
/// `b` must be a live handle, `basis` a NUL-terminated string and `out` a
/// writable pointer.
#[no_mangle]
pub unsafe extern "C" fn smr_recover(
    b: *const SmrMatrix,
    basis: *const c_char,
    eps: f64,
    gamma: f64,
    seed: u64,
    out: *mut *mut SmrRecovery,
) -> SmrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let b = b.as_ref().ok_or_else(|| null("b"))?;
        if basis.is_null() {
            return Err(null("basis"));
        }
        let name = CStr::from_ptr(basis)
            .to_str()
            .map_err(|_| (SmrStatus::InvalidArgument, "basis is not UTF-8".into()))?;
        let set = resolve_basis(name, b.inner.n()).map_err(lib_err)?;
        let cfg = ApproximatorConfig { seed, ..ApproximatorConfig::new(eps, gamma) };
        cfg.validate().map_err(lib_err)?;
        let oracle = MeasurementOracle::from_dense(&b.inner, QueryLedger::new()).map_err(lib_err)?;
        let inner = whiten_and_recover(&set, &oracle, &cfg).map_err(lib_err)?;
        if !inner.certificate.holds {
            return Err((SmrStatus::AlgorithmFailure, "output certificate failed".into()));
        }
        *out = Box::into_raw(Box::new(SmrRecovery { inner }));
        Ok(())
    })
}

/// Number of basis weights, 0 for null.
///
/// # Safety
/// `r` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn smr_recovery_len(r: *const SmrRecovery) -> usize {
    r.as_ref().map_or(0, |r| r.inner.d)
}

/// Copies all weights into `buf`. `*len` holds the buffer capacity on entry
/// and the number of weights on return.
///
/// # Safety
/// `r` must be a live handle, `len` writable and `buf` writable for `*len`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn smr_recovery_weights(r: *const SmrRecovery, buf: *mut f64, len: *mut usize) -> SmrStatus {
    guard(|| {
        let r = r.as_ref().ok_or_else(|| null("r"))?;
        let len = len.as_mut().ok_or_else(|| null("len"))?;
        let cap = *len;
        *len = r.inner.d;
        if cap < r.inner.d {
            return Err((SmrStatus::BufferTooSmall, format!("need {} weights, buffer holds {cap}", r.inner.d)));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        let w = r.inner.weight_vector();
        std::slice::from_raw_parts_mut(buf, r.inner.d).copy_from_slice(w.as_slice());
        Ok(())
    })
}

/// # Safety
/// `r` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn smr_recovery_certificate(r: *const SmrRecovery, out: *mut SmrCertificate) -> SmrStatus {
    guard(|| {
        let r = r.as_ref().ok_or_else(|| null("r"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = &r.inner.certificate;
        *out = SmrCertificate {
            lo: c.lo,
            lambda_min: c.lambda_min,
            lambda_max: c.lambda_max,
            holds: c.holds as i32,
            iterations: r.inner.iterations,
        };
        Ok(())
    })
}

/// # Safety
/// `r` must be null or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn smr_recovery_free(r: *mut SmrRecovery) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Solves a·x = b with the chosen solver. `gamma` is used by the perturbed
/// mode only. Writes n doubles to `x` and the relative residual to
/// `residual` (may be null).
///
/// # Safety
/// `a` must be a live handle, `b` readable and `x` writable for `len`
/// doubles, with `len` equal to the matrix dimension.
#[no_mangle]
pub unsafe extern "C" fn smr_solve(
    a: *const SmrMatrix,
    mode: SmrSolveMode,
    gamma: f64,
    eps: f64,
    b: *const f64,
    x: *mut f64,
    len: usize,
    residual: *mut f64,
) -> SmrStatus {
    guard(|| {
        let a = a.as_ref().ok_or_else(|| null("a"))?;
        if b.is_null() {
            return Err(null("b"));
        }
        if x.is_null() {
            return Err(null("x"));
        }
        let n = a.inner.n();
        if len != n {
            return Err(lib_err(SmrError::DimensionMismatch { expected: n, got: len }));
        }
        let rhs = DVector::from_column_slice(std::slice::from_raw_parts(b, n));
        let gamma = if mode == SmrSolveMode::Perturbed { gamma } else { 1.0 };
        let cfg = PathConfig::new(eps, gamma);
        ApproximatorConfig::new(eps, gamma).validate().map_err(lib_err)?;
        let (sol, res) = match mode {
            SmrSolveMode::Perturbed => {
                let r = perturbed_laplacian_solve(&a.inner, gamma, &rhs, &cfg).map_err(lib_err)?;
                (r.x, r.residual)
            }
            SmrSolveMode::MInverse => {
                let r = mmatrix_inv_solve(&a.inner, &rhs, &cfg).map_err(lib_err)?;
                (r.x, r.residual)
            }
            SmrSolveMode::LaplacianPinv => {
                let r = lap_pinv_solve(&a.inner, &rhs, &cfg).map_err(lib_err)?;
                (r.x, r.residual)
            }
        };
        std::slice::from_raw_parts_mut(x, n).copy_from_slice(sol.as_slice());
        if let Some(out) = residual.as_mut() {
            *out = res;
        }
        Ok(())
    })
}
