use std::ffi::{c_char, c_void, CStr, CString};
use std::ptr;

use rmt_equiv_ffi::*;

const MP: &str = r#"{"p": 25, "n": 100, "epsilon": 0.25, "shared_law": {"variance": 0.25}}"#;

fn model(json: &str) -> *mut RmtModel {
    let text = CString::new(json).unwrap();
    let mut m = ptr::null_mut();
    let s = unsafe { rmt_model_from_json(text.as_ptr(), &mut m) };
    assert_eq!(s, RmtStatus::Ok);
    assert!(!m.is_null());
    m
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    unsafe { rmt_last_error(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(rmt_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn model_round_trip() {
    let m = model(MP);
    let (mut p, mut n) = (0usize, 0usize);
    assert_eq!(unsafe { rmt_model_dims(m, &mut p, &mut n) }, RmtStatus::Ok);
    assert_eq!((p, n), (25, 100));

    let mut v = RmtValidation {
        top_eigenvalue: 0.0,
        margin_limit: 0.0,
        min_trace: 0.0,
        margin_ok: false,
        trace_ok: false,
    };
    assert_eq!(unsafe { rmt_model_validate(m, &mut v) }, RmtStatus::Ok);
    assert!((v.top_eigenvalue - 0.25).abs() < 1e-12 && v.margin_ok && v.trace_ok);

    let mut buf = vec![0.0; p * n];
    assert_eq!(unsafe { rmt_model_sample(m, 3, buf.as_mut_ptr(), buf.len()) }, RmtStatus::Ok);
    let mut again = vec![0.0; p * n];
    unsafe { rmt_model_sample(m, 3, again.as_mut_ptr(), again.len()) };
    assert_eq!(buf, again);
    assert_eq!(
        unsafe { rmt_model_sample(m, 3, buf.as_mut_ptr(), 10) },
        RmtStatus::BufferTooSmall
    );
    unsafe { rmt_model_free(m) };
}

#[test]
fn bad_model_reports_field() {
    let text = CString::new(r#"{"p": 2, "n": 4, "epsilon": 0.9, "shared_law": {"variance": 0.1}}"#).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { rmt_model_from_json(text.as_ptr(), &mut m) }, RmtStatus::InvalidInput);
    assert!(m.is_null());
    assert!(last_error().contains("epsilon"));
    assert_eq!(unsafe { rmt_model_dims(ptr::null(), ptr::null_mut(), ptr::null_mut()) }, RmtStatus::NullPointer);
}

#[test]
fn equivalent_matches_closed_form() {
    let m = model(MP);
    let mut eq = ptr::null_mut();
    assert_eq!(unsafe { rmt_equivalent_compute(m, -1.0, 0.0, 0.0, &mut eq) }, RmtStatus::Ok);
    let (mut re, mut im) = (0.0, 0.0);
    unsafe { rmt_equivalent_stieltjes(eq, &mut re, &mut im) };
    // c σ² z m² − (σ²(1−c) − z) m + 1 = 0 at z = −1, c = σ² = 1/4: positive root.
    let (a, b): (f64, f64) = (-0.0625, -(0.1875 + 1.0));
    let want = (-b - (b * b - 4.0 * a).sqrt()) / (2.0 * a);
    assert!((re - want).abs() < 1e-9 && im == 0.0, "{re} vs {want}");

    let mut lre = vec![0.0; 100];
    let mut lim = vec![0.0; 100];
    assert_eq!(unsafe { rmt_equivalent_lambda(eq, lre.as_mut_ptr(), lim.as_mut_ptr(), 100) }, RmtStatus::Ok);
    assert!(lre.iter().all(|v| (v - lre[0]).abs() < 1e-15));

    let mut qre = vec![0.0; 625];
    let mut qim = vec![0.0; 625];
    assert_eq!(unsafe { rmt_equivalent_tilde_q(eq, qre.as_mut_ptr(), qim.as_mut_ptr(), 625) }, RmtStatus::Ok);
    let trace: f64 = (0..25).map(|k| qre[k * 26]).sum();
    assert!((-trace / 25.0 - re).abs() < 1e-12);

    let (mut it, mut res) = (0usize, 0.0);
    unsafe { rmt_equivalent_diagnostics(eq, &mut it, &mut res) };
    assert!(it > 0 && res <= 1e-10);
    unsafe {
        rmt_equivalent_free(eq);
        rmt_model_free(m);
    }
}

#[test]
fn density_on_grid() {
    let m = model(MP);
    let grid: Vec<f64> = (0..50).map(|k| 0.01 * k as f64).collect();
    let mut out = vec![0.0; 50];
    assert_eq!(
        unsafe { rmt_spectral_density(m, grid.as_ptr(), 50, 1e-2, out.as_mut_ptr()) },
        RmtStatus::Ok
    );
    assert!(out.iter().all(|d| *d >= 0.0));
    let mass: f64 = out.iter().sum::<f64>() * 0.01;
    assert!(mass > 0.8 && mass < 1.05, "{mass}");
    unsafe { rmt_model_free(m) };
}

#[test]
fn zeta_solves_its_equation() {
    let (mut z, mut dz) = (0.0, 0.0);
    assert_eq!(unsafe { rmt_zeta_logistic(0.0, 0.5, 1.0, &mut z, &mut dz) }, RmtStatus::Ok);
    assert!((z - 0.5 / (1.0 + z.exp())).abs() < 1e-12);
    let s = 1.0 / (1.0 + z.exp());
    assert!((dz - 1.0 / (1.0 + 0.5 * s * (1.0 - s))).abs() < 1e-12);
    assert_eq!(unsafe { rmt_zeta_logistic(0.0, 0.5, -1.0, &mut z, &mut dz) }, RmtStatus::InvalidInput);
}

unsafe extern "C" fn square_plus(x: f64, ctx: *mut c_void) -> f64 {
    x * x + *(ctx as *const f64)
}

#[test]
fn gauss_expect_through_callback() {
    let mut shift = 2.0f64;
    let mut out = 0.0;
    let s = unsafe { rmt_gauss_expect(Some(square_plus), (&mut shift as *mut f64).cast(), 1.0, 3.0, 16, &mut out) };
    assert_eq!(s, RmtStatus::Ok);
    // E[(1 + √3 ξ)²] + 2 = 1 + 3 + 2
    assert!((out - 6.0).abs() < 1e-12);
    assert_eq!(
        unsafe { rmt_gauss_expect(None, ptr::null_mut(), 0.0, 1.0, 16, &mut out) },
        RmtStatus::NullPointer
    );
    assert_eq!(
        unsafe { rmt_gauss_expect(Some(square_plus), (&mut shift as *mut f64).cast(), 0.0, 1.0, 1, &mut out) },
        RmtStatus::InvalidInput
    );
}

#[test]
fn prediction_accessors() {
    let m = model(
        r#"{"p": 4, "n": 8, "epsilon": 0.25, "relaxed": true,
            "shared_law": {"mean": [1.0, 0.0, 0.0, 0.0], "variance": 1.0}}"#,
    );
    let mut pr = ptr::null_mut();
    assert_eq!(unsafe { rmt_predict_logistic(m, 5.0, 0.0, 0, &mut pr) }, RmtStatus::Ok);
    let (mut p, mut n) = (0usize, 0usize);
    unsafe { rmt_prediction_dims(pr, &mut p, &mut n) };
    assert_eq!((p, n), (4, 8));
    let mut mean = vec![0.0; 4];
    let mut cov = vec![0.0; 16];
    assert_eq!(unsafe { rmt_prediction_mean(pr, mean.as_mut_ptr(), 4) }, RmtStatus::Ok);
    assert_eq!(unsafe { rmt_prediction_cov(pr, cov.as_mut_ptr(), 16) }, RmtStatus::Ok);
    assert!(mean[0] > 0.0);
    for i in 0..4 {
        for j in 0..4 {
            assert!((cov[i * 4 + j] - cov[j * 4 + i]).abs() < 1e-14);
        }
    }
    let (mut mu, mut nu, mut delta) = (vec![0.0; 8], vec![0.0; 8], vec![0.0; 8]);
    assert_eq!(
        unsafe { rmt_prediction_data(pr, mu.as_mut_ptr(), nu.as_mut_ptr(), delta.as_mut_ptr(), 8) },
        RmtStatus::Ok
    );
    // Shared law: every datum has μ_i = m_1ᵀ m_Y = m_Y[0] and the same ν_i.
    assert!(mu.iter().all(|v| (v - mean[0]).abs() < 1e-14));
    assert!(nu.iter().all(|v| *v > 0.0 && (v - nu[0]).abs() < 1e-14));
    // Δ_i = tr(C + m mᵀ)/n = 5/8
    assert!(delta.iter().all(|v| (v - 0.625).abs() < 1e-12));
    unsafe {
        rmt_prediction_free(pr);
        rmt_model_free(m);
    }
}
