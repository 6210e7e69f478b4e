//! C ABI over `rmt_equiv`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_compute`
//! style functions and released with the matching `*_free`. Every function
//! returns an [`RmtStatus`]; on failure the message is kept per thread and can
//! be read with [`rmt_last_error`]. Matrices are written column-major.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::cell::RefCell;
use std::ffi::{c_char, c_void, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rmt_equiv::cplx_diag::SolveOptions;
use rmt_equiv::linalg::C64;
use rmt_equiv::model::{load_model, model_from_json, sample, validate_model, DataModel};
use rmt_equiv::quadrature::GaussHermite;
use rmt_equiv::regression::{predict_stats, zeta, Nonlinearity, PredictOptions, PredictedStats};
use rmt_equiv::resolvent::{density_options, spectral_density, DeterministicEquivalent, Evaluator};
use rmt_equiv::{Error, ErrorKind};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RmtStatus {
    Ok = 0,
    /// Bad model, argument or config.
    InvalidInput = 1,
    /// Non-convergence, domain escape, singular system and the like.
    Numerical = 2,
    Io = 3,
    NullPointer = 4,
    /// Output buffer shorter than required.
    BufferTooSmall = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

/// Model handle.
pub struct RmtModel {
    inner: DataModel,
}

/// Deterministic-equivalent handle.
pub struct RmtEquivalent {
    inner: DeterministicEquivalent,
}

/// Regression-prediction handle.
pub struct RmtPrediction {
    inner: PredictedStats,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmtValidation {
    pub top_eigenvalue: f64,
    pub margin_limit: f64,
    pub min_trace: f64,
    pub margin_ok: bool,
    pub trace_ok: bool,
}

/// Scalar callback for [`rmt_gauss_expect`].
pub type RmtScalarFn = Option<unsafe extern "C" fn(x: f64, ctx: *mut c_void) -> f64>;

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn from_error(e: &Error) -> RmtStatus {
    set_error(e.to_string());
    match e.kind() {
        ErrorKind::Input => RmtStatus::InvalidInput,
        ErrorKind::Numerical => RmtStatus::Numerical,
        ErrorKind::Io => RmtStatus::Io,
    }
}

/// Failure short of a library error.
struct Fail(RmtStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = from_error(&e);
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(RmtStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(RmtStatus::InvalidInput, msg.into())
}

fn guard<F: FnOnce() -> Result<(), Fail>>(body: F) -> RmtStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error("");
            RmtStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            RmtStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, need: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    if len < need {
        return Err(Fail(
            RmtStatus::BufferTooSmall,
            format!("`{what}` holds {len} values, {need} required"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{what}` is not valid UTF-8")))
}

unsafe fn write_out<T>(p: *mut T, v: T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(v);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rmt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full length in bytes
/// including the NUL.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn rmt_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let k = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, k);
            *buf.add(k) = 0;
        }
        bytes.len() + 1
    })
}

/// Parses a JSON model document.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rmt_model_from_json(json: *const c_char, out: *mut *mut RmtModel) -> RmtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = c_str(json, "json")?;
        let model = model_from_json(text)?;
        *out = Box::into_raw(Box::new(RmtModel { inner: model }));
        Ok(())
    })
}

/// Loads a JSON model file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rmt_model_load(path: *const c_char, out: *mut *mut RmtModel) -> RmtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = c_str(path, "path")?;
        let model = load_model(Path::new(path))?;
        *out = Box::into_raw(Box::new(RmtModel { inner: model }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn rmt_model_free(model: *mut RmtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rmt_model_dims(model: *const RmtModel, p: *mut usize, n: *mut usize) -> RmtStatus {
    guard(|| {
        let m = &deref(model, "model")?.inner;
        write_out(p, m.p(), "p")?;
        write_out(n, m.n(), "n")
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rmt_model_validate(model: *const RmtModel, out: *mut RmtValidation) -> RmtStatus {
    guard(|| {
        let r = validate_model(&deref(model, "model")?.inner);
        write_out(
            out,
            RmtValidation {
                top_eigenvalue: r.top_eigenvalue,
                margin_limit: r.margin_limit,
                min_trace: r.min_trace,
                margin_ok: r.margin_ok,
                trace_ok: r.trace_ok,
            },
            "out",
        )
    })
}

/// Draws the `p × n` sample for `seed` into `out` (column-major, `len ≥ p·n`).
///
/// # Safety
/// `out` must be valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rmt_model_sample(model: *const RmtModel, seed: u64, out: *mut f64, len: usize) -> RmtStatus {
    guard(|| {
        let m = &deref(model, "model")?.inner;
        let dst = out_slice(out, len, m.p() * m.n(), "out")?;
        dst.copy_from_slice(sample(m, seed).data.as_slice());
        Ok(())
    })
}

/// Solves for `Λ^z` and builds the deterministic equivalent. `tol ≤ 0`
/// selects the default tolerance.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rmt_equivalent_compute(
    model: *const RmtModel,
    z_re: f64,
    z_im: f64,
    tol: f64,
    out: *mut *mut RmtEquivalent,
) -> RmtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let m = &deref(model, "model")?.inner;
        let mut opts = SolveOptions::default();
        if tol > 0.0 {
            opts.tol = tol;
        }
        let eq = Evaluator::new(m).deterministic_equivalent(C64::new(z_re, z_im), &opts)?;
        *out = Box::into_raw(Box::new(RmtEquivalent { inner: eq }));
        Ok(())
    })
}

/// # Safety
/// `eq` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn rmt_equivalent_free(eq: *mut RmtEquivalent) {
    if !eq.is_null() {
        drop(Box::from_raw(eq));
    }
}

/// Stieltjes value `m(z) = −(1/p) tr Q̃`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rmt_equivalent_stieltjes(eq: *const RmtEquivalent, re: *mut f64, im: *mut f64) -> RmtStatus {
    guard(|| {
        let m = deref(eq, "eq")?.inner.stieltjes;
        write_out(re, m.re, "re")?;
        write_out(im, m.im, "im")
    })
}

/// Iterations and final residual of the fixed-point solve.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rmt_equivalent_diagnostics(
    eq: *const RmtEquivalent,
    iterations: *mut usize,
    residual: *mut f64,
) -> RmtStatus {
    guard(|| {
        let d = &deref(eq, "eq")?.inner.diagnostics;
        write_out(iterations, d.iterations, "iterations")?;
        write_out(residual, d.final_residual, "residual")
    })
}

/// Copies the `n` entries of `Λ^z` into `re`/`im`.
///
/// # Safety
/// `re` and `im` must be valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rmt_equivalent_lambda(
    eq: *const RmtEquivalent,
    re: *mut f64,
    im: *mut f64,
    len: usize,
) -> RmtStatus {
    guard(|| {
        let l = deref(eq, "eq")?.inner.lambda.entries();
        let r = out_slice(re, len, l.len(), "re")?;
        let i = out_slice(im, len, l.len(), "im")?;
        for (k, v) in l.iter().enumerate() {
            r[k] = v.re;
            i[k] = v.im;
        }
        Ok(())
    })
}

/// Copies `Q̃^z` (`p × p`, column-major) into `re`/`im`.
///
/// # Safety
/// `re` and `im` must be valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rmt_equivalent_tilde_q(
    eq: *const RmtEquivalent,
    re: *mut f64,
    im: *mut f64,
    len: usize,
) -> RmtStatus {
    guard(|| {
        let q = &deref(eq, "eq")?.inner.tilde_q;
        let r = out_slice(re, len, q.len(), "re")?;
        let i = out_slice(im, len, q.len(), "im")?;
        for (k, v) in q.as_slice().iter().enumerate() {
            r[k] = v.re;
            i[k] = v.im;
        }
        Ok(())
    })
}

/// Density `Im m(x + iη)/π` at each grid point.
///
/// # Safety
/// `grid` and `out` must be valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rmt_spectral_density(
    model: *const RmtModel,
    grid: *const f64,
    len: usize,
    eta: f64,
    out: *mut f64,
) -> RmtStatus {
    guard(|| {
        let m = &deref(model, "model")?.inner;
        if grid.is_null() {
            return Err(null("grid"));
        }
        let xs = std::slice::from_raw_parts(grid, len);
        let dst = out_slice(out, len, len, "out")?;
        for (k, (_, d)) in spectral_density(m, xs, eta, &density_options())?.into_iter().enumerate() {
            dst[k] = d;
        }
        Ok(())
    })
}

/// `ζ` solving `z = v + Δ·f(z)` for the logistic map `f(t) = 1/(λ(1 + eᵗ))`,
/// with `ζ'`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rmt_zeta_logistic(
    v: f64,
    delta: f64,
    lambda: f64,
    z: *mut f64,
    dz: *mut f64,
) -> RmtStatus {
    guard(|| {
        if !(lambda > 0.0) {
            return Err(invalid(format!("lambda must be positive, got {lambda}")));
        }
        let (zv, d) = zeta(v, delta, &Nonlinearity::logistic(lambda))?;
        write_out(z, zv, "z")?;
        write_out(dz, d, "dz")
    })
}

/// `E[f(mu + √var·ξ)]`, `ξ ~ N(0, 1)`, with an `nodes`-point Gauss–Hermite
/// rule. `var = 0` evaluates `f(mu)`.
///
/// # Safety
/// `f` is called with `ctx` from the calling thread; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rmt_gauss_expect(
    f: RmtScalarFn,
    ctx: *mut c_void,
    mu: f64,
    var: f64,
    nodes: usize,
    out: *mut f64,
) -> RmtStatus {
    guard(|| {
        let f = f.ok_or_else(|| null("f"))?;
        if !(var >= 0.0) || !var.is_finite() || !mu.is_finite() {
            return Err(invalid(format!("need finite mu and var >= 0, got mu = {mu}, var = {var}")));
        }
        let rule = GaussHermite::new(nodes)?;
        let v = rule.expect(|x| f(x, ctx), mu, var);
        write_out(out, v, "out")
    })
}

/// Predicted statistics of the regression fixed point with logistic loss.
/// `tol ≤ 0` and `nodes = 0` select the defaults.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rmt_predict_logistic(
    model: *const RmtModel,
    lambda: f64,
    tol: f64,
    nodes: usize,
    out: *mut *mut RmtPrediction,
) -> RmtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if !(lambda > 0.0) {
            return Err(invalid(format!("lambda must be positive, got {lambda}")));
        }
        let m = &deref(model, "model")?.inner;
        let mut opts = PredictOptions::default();
        if tol > 0.0 {
            opts.tol = tol;
        }
        if nodes > 0 {
            opts.nodes = nodes;
        }
        let stats = predict_stats(m, &Nonlinearity::logistic(lambda), &opts)?;
        *out = Box::into_raw(Box::new(RmtPrediction { inner: stats }));
        Ok(())
    })
}

/// # Safety
/// `pred` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn rmt_prediction_free(pred: *mut RmtPrediction) {
    if !pred.is_null() {
        drop(Box::from_raw(pred));
    }
}

/// Dimension `p` and number of data `n`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rmt_prediction_dims(pred: *const RmtPrediction, p: *mut usize, n: *mut usize) -> RmtStatus {
    guard(|| {
        let s = &deref(pred, "pred")?.inner;
        write_out(p, s.m_y.len(), "p")?;
        write_out(n, s.mu.len(), "n")
    })
}

/// Copies `m_Y` (length `p`).
///
/// # Safety
/// `out` must be valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rmt_prediction_mean(pred: *const RmtPrediction, out: *mut f64, len: usize) -> RmtStatus {
    guard(|| {
        let s = &deref(pred, "pred")?.inner;
        out_slice(out, len, s.m_y.len(), "out")?.copy_from_slice(s.m_y.as_slice());
        Ok(())
    })
}

/// Copies `C_Y` (`p × p`, column-major).
///
/// # Safety
/// `out` must be valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rmt_prediction_cov(pred: *const RmtPrediction, out: *mut f64, len: usize) -> RmtStatus {
    guard(|| {
        let s = &deref(pred, "pred")?.inner;
        out_slice(out, len, s.c_y.len(), "out")?.copy_from_slice(s.c_y.as_slice());
        Ok(())
    })
}

/// Copies the per-datum `μ_i`, `ν_i` and `Δ_i` (length `n` each).
///
/// # Safety
/// Each output must be valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rmt_prediction_data(
    pred: *const RmtPrediction,
    mu: *mut f64,
    nu: *mut f64,
    delta: *mut f64,
    len: usize,
) -> RmtStatus {
    guard(|| {
        let s = &deref(pred, "pred")?.inner;
        let g = s.mu.len();
        out_slice(mu, len, g, "mu")?.copy_from_slice(&s.mu);
        out_slice(nu, len, g, "nu")?.copy_from_slice(&s.nu);
        out_slice(delta, len, g, "delta")?.copy_from_slice(&s.delta);
        Ok(())
    })
}
