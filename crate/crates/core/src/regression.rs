//! Fixed-point estimators `Y = (1/n) X f(XᵀY)`, their leave-one-out
//! variants, and a deterministic predictor for the mean and covariance of
//! `Y` under Gaussian columns.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CompensatedSum};
use crate::model::{sample, ColumnLaw, DataModel, Generator, SampleMatrix};
use crate::quadrature::GaussHermite;
use crate::resolvent::resolvent_weighted_real;
use crate::rng::{derive_seed, stream_rng};

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A scalar map with its first two derivatives and declared bounds on them.
#[derive(Clone)]
pub struct Nonlinearity {
    name: String,
    f: ScalarFn,
    df: ScalarFn,
    d2f: ScalarFn,
    sup_deriv: f64,
    sup_deriv2: f64,
}

impl fmt::Debug for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Nonlinearity")
            .field("name", &self.name)
            .field("sup_deriv", &self.sup_deriv)
            .field("sup_deriv2", &self.sup_deriv2)
            .finish()
    }
}

/// Outcome of [`Nonlinearity::audit`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditReport {
    pub max_deriv: f64,
    pub max_deriv2: f64,
    /// Worst `|fd − f'| / (|f'| + sup_deriv)` over the grid.
    pub max_fd_error: f64,
}

impl Nonlinearity {
    pub fn new(name: impl Into<String>, f: ScalarFn, df: ScalarFn, d2f: ScalarFn, sup_deriv: f64, sup_deriv2: f64) -> Self {
        Self {
            name: name.into(),
            f,
            df,
            d2f,
            sup_deriv,
            sup_deriv2,
        }
    }

    /// `f(t) = (1/λ)/(1 + eᵗ)`: the regularized logistic loss derivative.
    pub fn logistic(lambda: f64) -> Self {
        let inv = 1.0 / lambda;
        // s = 1/(1 + eᵗ) underflows cleanly to 0 for large t.
        let s = |t: f64| 1.0 / (1.0 + t.exp());
        Self::new(
            format!("logistic(lambda={lambda})"),
            Arc::new(move |t| inv * s(t)),
            Arc::new(move |t| {
                let v = s(t);
                -inv * v * (1.0 - v)
            }),
            Arc::new(move |t| {
                let v = s(t);
                inv * v * (1.0 - v) * (1.0 - 2.0 * v)
            }),
            0.25 * inv,
            inv / (6.0 * 3f64.sqrt()),
        )
    }

    pub fn constant(c: f64) -> Self {
        Self::new(
            format!("constant({c})"),
            Arc::new(move |_| c),
            Arc::new(|_| 0.0),
            Arc::new(|_| 0.0),
            0.0,
            0.0,
        )
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn identity() -> Self {
        Self::new("identity", Arc::new(|t| t), Arc::new(|_| 1.0), Arc::new(|_| 0.0), 1.0, 0.0)
    }

    /// `f(t) = a·tanh(t)`.
    pub fn tanh(a: f64) -> Self {
        Self::new(
            format!("tanh(scale={a})"),
            Arc::new(move |t| a * t.tanh()),
            Arc::new(move |t| {
                let c = t.cosh();
                if c.is_finite() {
                    a / (c * c)
                } else {
                    0.0
                }
            }),
            Arc::new(move |t| {
                let c = t.cosh();
                if c.is_finite() {
                    -2.0 * a * t.tanh() / (c * c)
                } else {
                    0.0
                }
            }),
            a.abs(),
            a.abs() * 4.0 / (3.0 * 3f64.sqrt()),
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn eval(&self, t: f64) -> f64 {
        (self.f)(t)
    }

    pub fn deriv(&self, t: f64) -> f64 {
        (self.df)(t)
    }

    pub fn deriv2(&self, t: f64) -> f64 {
        (self.d2f)(t)
    }

    pub fn sup_deriv(&self) -> f64 {
        self.sup_deriv
    }

    pub fn sup_deriv2(&self) -> f64 {
        self.sup_deriv2
    }

    /// Checks the declared bounds and the derivative against central
    /// differences on 10⁴ points of `[−50, 50]`.
    pub fn audit(&self) -> Result<AuditReport> {
        let points = 10_000;
        let h = 1e-5;
        let mut rep = AuditReport {
            max_deriv: 0.0,
            max_deriv2: 0.0,
            max_fd_error: 0.0,
        };
        for k in 0..points {
            let t = -50.0 + 100.0 * k as f64 / (points - 1) as f64;
            let d = self.deriv(t);
            let d2 = self.deriv2(t);
            rep.max_deriv = rep.max_deriv.max(d.abs());
            rep.max_deriv2 = rep.max_deriv2.max(d2.abs());
            let fd = (self.eval(t + h) - self.eval(t - h)) / (2.0 * h);
            let scale = d.abs() + self.sup_deriv;
            if scale > 0.0 {
                rep.max_fd_error = rep.max_fd_error.max((fd - d).abs() / scale);
            } else if fd.abs() > 1e-9 {
                rep.max_fd_error = f64::INFINITY;
            }
        }
        if rep.max_deriv > self.sup_deriv + 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "{}: |f'| reaches {} above declared {}",
                self.name, rep.max_deriv, self.sup_deriv
            )));
        }
        if rep.max_deriv2 > self.sup_deriv2 + 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "{}: |f''| reaches {} above declared {}",
                self.name, rep.max_deriv2, self.sup_deriv2
            )));
        }
        if rep.max_fd_error > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "{}: derivative disagrees with finite differences ({:e})",
                self.name, rep.max_fd_error
            )));
        }
        Ok(rep)
    }
}

/// Logistic model: every column `N(m, C)` (labels absorbed into the sign of
/// the data) and `f(t) = (1/λ)/(1 + eᵗ)`.
///
/// The spectral margin of the model is not enforced; the solver checks
/// contraction per draw instead.
pub fn logistic_model(m: DVector<f64>, c: DMatrix<f64>, n: usize, lambda: f64) -> Result<(DataModel, Nonlinearity)> {
    if !(lambda > 0.0) {
        return Err(Error::invalid("lambda", format!("must be positive, got {lambda}")));
    }
    let law = ColumnLaw::new(m, c)?;
    let model = DataModel::new_relaxed(vec![(law, n)], Generator::Gaussian, 0.25)?;
    Ok((model, Nonlinearity::logistic(lambda)))
}

/// A converged fixed point of `Y ↦ (1/n) X f(XᵀY)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSolution {
    pub y: DVector<f64>,
    /// `‖Y − (1/n) X f(XᵀY)‖` at the returned `y`.
    pub residual: f64,
    /// Number of map evaluations.
    pub iterations: usize,
    /// `sup|f'| · ‖XXᵀ‖/n`.
    pub contraction_bound: f64,
}

/// Largest admissible contraction bound.
pub const MAX_CONTRACTION: f64 = 1.0 - 1e-3;

/// `sup|f'| · λ_max(XXᵀ/n)`.
pub fn contraction_bound(x: &DMatrix<f64>, f: &Nonlinearity) -> f64 {
    if f.sup_deriv() == 0.0 {
        return 0.0;
    }
    f.sup_deriv() * linalg::top_eigenvalue(&linalg::gram_over_n(x))
}

fn picard_map(x: &DMatrix<f64>, xt: &DMatrix<f64>, f: &Nonlinearity, y: &DVector<f64>) -> DVector<f64> {
    let mut s = xt * y;
    s.apply(|v| *v = f.eval(*v));
    let mut out = x * s;
    out /= x.ncols() as f64;
    out
}

/// Picard iteration from 0 with a precomputed contraction bound.
pub fn solve_y_with_bound(x: &DMatrix<f64>, f: &Nonlinearity, tol: f64, bound: f64) -> Result<RegressionSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tol must be positive, got {tol}")));
    }
    if !(bound <= MAX_CONTRACTION) {
        return Err(Error::ContractionViolated {
            bound,
            limit: MAX_CONTRACTION,
        });
    }
    let xt = x.transpose();
    let mut y = DVector::zeros(x.nrows());
    let mut next = picard_map(x, &xt, f, &y);
    let r0 = (&next - &y).norm();
    let budget = if bound > 0.0 && r0 > tol {
        ((tol / r0).ln() / bound.ln()).ceil() as usize + 50
    } else {
        50
    };
    let mut evals = 1;
    loop {
        let residual = (&next - &y).norm();
        if !residual.is_finite() {
            return Err(Error::NonConvergence {
                iterations: evals,
                residual,
            });
        }
        if residual <= tol {
            return Ok(RegressionSolution {
                y,
                residual,
                iterations: evals,
                contraction_bound: bound,
            });
        }
        if evals >= budget {
            return Err(Error::NonConvergence {
                iterations: evals,
                residual,
            });
        }
        y = next;
        next = picard_map(x, &xt, f, &y);
        evals += 1;
    }
}

/// Solves `Y = (1/n) X f(XᵀY)` by Picard iteration from 0.
pub fn solve_y(x: &SampleMatrix, f: &Nonlinearity, tol: f64) -> Result<RegressionSolution> {
    solve_y_with_bound(&x.data, f, tol, contraction_bound(&x.data, f))
}

fn without_column(x: &DMatrix<f64>, i: usize) -> Result<DMatrix<f64>> {
    if i >= x.ncols() {
        return Err(Error::InvalidArgument(format!("column {i} out of range (n = {})", x.ncols())));
    }
    let mut out = x.clone();
    out.column_mut(i).fill(0.0);
    Ok(out)
}

/// `Y_{−i}`: the same fixed point with column `i` zeroed (the `1/n` factor is kept).
pub fn solve_y_loo(x: &SampleMatrix, i: usize, f: &Nonlinearity, tol: f64) -> Result<RegressionSolution> {
    let xi = without_column(&x.data, i)?;
    solve_y_with_bound(&xi, f, tol, contraction_bound(&xi, f))
}

/// `Q_{−i} = (I − (1/n) Σ_{j≠i} f'(x_jᵀY_{−i}) x_j x_jᵀ)⁻¹`.
pub fn q_minus_i(x: &SampleMatrix, y_loo: &DVector<f64>, i: usize, f: &Nonlinearity) -> Result<DMatrix<f64>> {
    q_minus_i_dense(&x.data, y_loo, i, f)
}

fn q_minus_i_dense(x: &DMatrix<f64>, y_loo: &DVector<f64>, i: usize, f: &Nonlinearity) -> Result<DMatrix<f64>> {
    if i >= x.ncols() {
        return Err(Error::InvalidArgument(format!("column {i} out of range (n = {})", x.ncols())));
    }
    let s = x.transpose() * y_loo;
    let gamma: Vec<f64> = s
        .iter()
        .enumerate()
        .map(|(j, v)| if j == i { 0.0 } else { f.deriv(*v) })
        .collect();
    resolvent_weighted_real(x, &gamma, 1.0)
}

fn w_vector(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    i: usize,
    f: &Nonlinearity,
    tol: f64,
    bound: f64,
) -> Result<DVector<f64>> {
    let xi = without_column(x, i)?;
    let loo = solve_y_with_bound(&xi, f, tol, bound)?;
    let q = q_minus_i_dense(x, &loo.y, i, f)?;
    let col = x.column(i);
    let n = x.ncols() as f64;
    let coef = f.eval(col.dot(y)) / n;
    Ok(y - &loo.y - (q * col) * coef)
}

/// `‖W_i‖` with `W_i = Y − Y_{−i} − (1/n) f(x_iᵀY) Q_{−i} x_i`.
pub fn w_residual(x: &SampleMatrix, i: usize, f: &Nonlinearity, tol: f64) -> Result<f64> {
    let full = solve_y(x, f, tol)?;
    let xi = without_column(&x.data, i)?;
    let bound = contraction_bound(&xi, f);
    Ok(w_vector(&x.data, &full.y, i, f, tol, bound)?.norm())
}

/// `mean_i ‖W_i‖` for one draw, over the columns `0, stride, 2·stride, …`.
///
/// Removing a column can only shrink `XXᵀ`, so the full-matrix contraction
/// bound is reused for every leave-one-out solve.
pub fn mean_w_residual(x: &SampleMatrix, f: &Nonlinearity, tol: f64, stride: usize) -> Result<f64> {
    let bound = contraction_bound(&x.data, f);
    let full = solve_y_with_bound(&x.data, f, tol, bound)?;
    let mut acc = CompensatedSum::default();
    let mut count = 0;
    for i in (0..x.n()).step_by(stride.max(1)) {
        acc.add(w_vector(&x.data, &full.y, i, f, tol, bound)?.norm());
        count += 1;
    }
    Ok(acc.value() / count as f64)
}

/// `ζ` solving `z = v + Δ·f(z)` with its first two derivatives in `v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Zeta {
    pub z: f64,
    pub d1: f64,
    pub d2: f64,
}

/// Solves `z = v + Δ·f(z)` (Newton, Picard fallback) and returns
/// `ζ' = 1/(1 − Δf'(ζ))` and `ζ'' = Δ f''(ζ) ζ'³`.
pub fn zeta_full(v: f64, delta: f64, f: &Nonlinearity) -> Result<Zeta> {
    let k = delta.abs() * f.sup_deriv();
    if !(k <= 1.0 - 1e-6) {
        return Err(Error::ContractionViolated {
            bound: k,
            limit: 1.0 - 1e-6,
        });
    }
    if !v.is_finite() || !delta.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite input v = {v}, delta = {delta}")));
    }
    let g = |z: f64| z - v - delta * f.eval(z);
    let mut z = v + delta * f.eval(v);
    let mut solved = false;
    for _ in 0..60 {
        let r = g(z);
        if r.abs() <= 1e-14 * (1.0 + v.abs()) {
            solved = true;
            break;
        }
        let step = r / (1.0 - delta * f.deriv(z));
        z -= step;
        if !z.is_finite() {
            break;
        }
    }
    if !solved || !z.is_finite() {
        z = v;
        let mut last = f64::INFINITY;
        for _ in 0..100_000 {
            let next = v + delta * f.eval(z);
            last = (next - z).abs();
            z = next;
            if last <= 1e-15 * (1.0 + v.abs()) {
                break;
            }
        }
        if g(z).abs() > 1e-12 {
            return Err(Error::NonConvergence {
                iterations: 100_000,
                residual: last,
            });
        }
    }
    let d1 = 1.0 / (1.0 - delta * f.deriv(z));
    let d2 = delta * f.deriv2(z) * d1 * d1 * d1;
    Ok(Zeta { z, d1, d2 })
}

/// `(ζ(v), ζ'(v))`.
pub fn zeta(v: f64, delta: f64, f: &Nonlinearity) -> Result<(f64, f64)> {
    let r = zeta_full(v, delta, f)?;
    Ok((r.z, r.d1))
}

/// Monte-Carlo versus quadrature for one Stein identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SteinSide {
    pub lhs_mc: f64,
    pub rhs_quadrature: f64,
    pub mc_stderr: f64,
}

impl SteinSide {
    /// `|lhs − rhs|` in units of the Monte-Carlo standard error.
    pub fn z_score(&self) -> f64 {
        let d = (self.lhs_mc - self.rhs_quadrature).abs();
        if self.mc_stderr > 0.0 {
            d / self.mc_stderr
        } else if d == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SteinReport {
    /// `E[f(wᵀx) uᵀx] = E f·uᵀμ + E f'·uᵀCw`.
    pub linear: SteinSide,
    /// `E[f(wᵀx) xᵀAx] = E f·tr(A(μμᵀ + C)) + E f'·wᵀC(A + Aᵀ)μ + E f''·wᵀCACw`.
    pub quadratic: SteinSide,
}

/// Checks both Gaussian integration-by-parts identities for `x ~ N(μ, C)`.
#[allow(clippy::too_many_arguments)]
pub fn stein_check(
    mu: &DVector<f64>,
    c: &DMatrix<f64>,
    w: &DVector<f64>,
    u: &DVector<f64>,
    a: &DMatrix<f64>,
    f: &Nonlinearity,
    trials: usize,
    seed: u64,
) -> Result<SteinReport> {
    let p = mu.len();
    if c.shape() != (p, p) || a.shape() != (p, p) || w.len() != p || u.len() != p {
        return Err(Error::InvalidArgument("dimension mismatch in stein_check".into()));
    }
    if trials < 2 {
        return Err(Error::InvalidArgument("need at least 2 trials".into()));
    }
    let law = ColumnLaw::new(mu.clone(), c.clone())?;
    let root = law.cov_root().clone();

    // Quadrature side.
    let rule = GaussHermite::new(64)?;
    let m = w.dot(mu);
    let cw = c * w;
    let var = w.dot(&cw).max(0.0);
    let ef = rule.expect(|t| f.eval(t), m, var);
    let ed = rule.expect(|t| f.deriv(t), m, var);
    let ed2 = rule.expect(|t| f.deriv2(t), m, var);
    let rhs_lin = ef * u.dot(mu) + ed * u.dot(&cw);
    let sym = a + a.transpose();
    let rhs_quad = ef * (a * law.second_moment()).trace() + ed * cw.dot(&(&sym * mu)) + ed2 * cw.dot(&(a * &cw));

    // Monte-Carlo side, in fixed chunks so the result is thread-count independent.
    let chunk = 10_000usize;
    let chunks = trials.div_ceil(chunk);
    let parts: Vec<[CompensatedSum; 4]> = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(derive_seed(seed, k as u64), 0);
            let mut acc = [CompensatedSum::default(); 4];
            let count = chunk.min(trials - k * chunk);
            let mut g = DVector::zeros(p);
            for _ in 0..count {
                for v in g.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                let x = mu + &root * &g;
                let fx = f.eval(w.dot(&x));
                let l = fx * u.dot(&x);
                let q = fx * x.dot(&(a * &x));
                acc[0].add(l);
                acc[1].add(l * l);
                acc[2].add(q);
                acc[3].add(q * q);
            }
            acc
        })
        .collect();
    let mut tot = [CompensatedSum::default(); 4];
    for part in &parts {
        for (t, v) in tot.iter_mut().zip(part) {
            t.add(v.value());
        }
    }
    let nt = trials as f64;
    let side = |s: f64, s2: f64, rhs: f64| {
        let mean = s / nt;
        let var = ((s2 - nt * mean * mean) / (nt - 1.0)).max(0.0);
        SteinSide {
            lhs_mc: mean,
            rhs_quadrature: rhs,
            mc_stderr: (var / nt).sqrt(),
        }
    };
    Ok(SteinReport {
        linear: side(tot[0].value(), tot[1].value(), rhs_lin),
        quadratic: side(tot[2].value(), tot[3].value(), rhs_quad),
    })
}

/// Second-moment rule used by [`predict_stats`] for `C_Y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceRule {
    /// `C_Y = (1/n) R K Rᵀ`, `R = (I − (1/n)Σ d_iΣ_i)⁻¹`, `K = (1/n)Σ Cov(ξ_i x_i)`.
    #[default]
    Response,
    /// `C_Y = (1/n) Θ(Σ̃)` with `Θ(B) = B + C̃ Θ(B) C̃` and `Σ̃ = (1/n)Σ s_iΣ_i`.
    Theta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PredictOptions {
    pub tol: f64,
    pub max_outer: usize,
    pub nodes: usize,
    pub rule: CovarianceRule,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_outer: 200,
            nodes: 64,
            rule: CovarianceRule::Response,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct PredictDiagnostics {
    pub outer_iterations: usize,
    /// Sup-norm change of `(μ, ν, m_Y)` per outer step.
    pub change_history: Vec<f64>,
    /// `‖(1/n)Σ d_iΣ_i‖` per outer step.
    pub spectral_norms: Vec<f64>,
}

/// Predicted per-datum and global statistics of `Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedStats {
    /// `μ_i = m_iᵀ m_Y`.
    pub mu: Vec<f64>,
    /// Predicted variance of `x_iᵀY_{−i}`: `tr(Σ_i C_Y) + m_Yᵀ C_i m_Y`.
    pub nu: Vec<f64>,
    pub m_y: DVector<f64>,
    pub c_y: DMatrix<f64>,
    /// `Δ_i = tr(Σ_i)/n`.
    pub delta: Vec<f64>,
    pub diagnostics: PredictDiagnostics,
}

/// Solves `Θ = B + C̃ Θ C̃` by Picard iteration.
pub fn theta(b: &DMatrix<f64>, ct: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<DMatrix<f64>> {
    let norm = linalg::sym_spectral_norm(ct);
    if norm >= 1.0 {
        return Err(Error::SpectralCheck {
            step: "theta".into(),
            norm,
        });
    }
    let mut th = b.clone();
    let ctt = ct.transpose();
    for it in 0..max_iter {
        let next = b + ct * &th * &ctt;
        let change = (&next - &th).norm();
        th = next;
        if change <= tol * (1.0 + th.norm()) {
            let residual = (&th - b - ct * &th * &ctt).norm();
            if residual <= 10.0 * tol * (1.0 + th.norm()) {
                return Ok(th);
            }
        }
        if !change.is_finite() {
            return Err(Error::NonConvergence {
                iterations: it,
                residual: change,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual: (&th - b - ct * &th * &ctt).norm(),
    })
}

/// Gaussian moments of `ξ = f∘ζ` needed by one outer step.
#[derive(Debug, Clone, Copy)]
struct XiMoments {
    e: f64,
    d: f64,
    s: f64,
    t: f64,
    r: f64,
}

fn xi_moments(rule: &GaussHermite, mu: f64, var: f64, delta: f64, f: &Nonlinearity) -> Result<XiMoments> {
    let mut acc = [0.0; 5];
    let mut point = |v: f64, w: f64| -> Result<()> {
        let zt = zeta_full(v, delta, f)?;
        let xi = f.eval(zt.z);
        let fp = f.deriv(zt.z);
        let dxi = fp * zt.d1;
        let ddxi = f.deriv2(zt.z) * zt.d1 * zt.d1 + fp * zt.d2;
        acc[0] += w * xi;
        acc[1] += w * dxi;
        acc[2] += w * xi * xi;
        acc[3] += w * 2.0 * xi * dxi;
        acc[4] += w * 2.0 * (xi * ddxi + dxi * dxi);
        Ok(())
    };
    if var <= 0.0 {
        point(mu, 1.0)?;
    } else {
        let s = var.sqrt();
        for (x, w) in rule.nodes().iter().zip(rule.weights()) {
            point(mu + s * x, *w)?;
        }
    }
    Ok(XiMoments {
        e: acc[0],
        d: acc[1],
        s: acc[2],
        t: acc[3],
        r: acc[4],
    })
}

/// Deterministic prediction of the mean and covariance of `Y` for Gaussian
/// columns.
///
/// Each outer step takes `(μ_i, ν_i)`, evaluates Gaussian moments of
/// `ξ_i = f∘ζ_i` by quadrature, forms `m_Y = (I − C̃)⁻¹ m̃` and `C_Y` by the
/// selected [`CovarianceRule`], and updates `μ_i = m_iᵀm_Y`,
/// `ν_i = tr(Σ_i C_Y) + m_Yᵀ C_i m_Y`. Columns sharing a law share all
/// per-datum quantities, so the work is per group.
pub fn predict_stats(model: &DataModel, f: &Nonlinearity, opts: &PredictOptions) -> Result<PredictedStats> {
    if !(opts.tol > 0.0) || opts.max_outer == 0 {
        return Err(Error::InvalidArgument("tol must be positive and max_outer at least 1".into()));
    }
    let rule = GaussHermite::new(opts.nodes)?;
    let p = model.p();
    let n = model.n() as f64;
    let groups = model.groups();
    let weights: Vec<f64> = groups.iter().map(|(_, c)| *c as f64 / n).collect();
    let deltas: Vec<f64> = groups.iter().map(|(l, _)| l.trace_second_moment() / n).collect();
    for d in &deltas {
        let k = d * f.sup_deriv();
        if k >= 1.0 {
            return Err(Error::ContractionViolated { bound: k, limit: 1.0 });
        }
    }

    let ng = groups.len();
    let mut mu = vec![0.0; ng];
    let mut nu = vec![0.0; ng];
    let mut m_y = DVector::zeros(p);
    let mut c_y = DMatrix::zeros(p, p);
    let mut diag = PredictDiagnostics::default();
    let identity = DMatrix::<f64>::identity(p, p);

    let mut converged = false;
    for step in 1..=opts.max_outer {
        let moments = (0..ng)
            .map(|g| xi_moments(&rule, mu[g], nu[g], deltas[g], f))
            .collect::<Result<Vec<_>>>()?;

        let mut m_tilde = DVector::zeros(p);
        let mut c_tilde = DMatrix::zeros(p, p);
        let mut weighted_sigma = DMatrix::zeros(p, p);
        for ((law, _), (w, mo)) in groups.iter().zip(weights.iter().zip(&moments)) {
            m_tilde += law.mean() * (w * mo.e);
            c_tilde += law.cov() * (w * mo.d);
            weighted_sigma += law.second_moment() * (w * mo.d);
        }
        linalg::symmetrize(&mut c_tilde);
        linalg::symmetrize(&mut weighted_sigma);
        let norm = linalg::sym_spectral_norm(&weighted_sigma);
        diag.spectral_norms.push(norm);
        if norm >= 1.0 {
            return Err(Error::SpectralCheck {
                step: format!("outer step {step}"),
                norm,
            });
        }

        let new_m_y = linalg::inverse_r(&(&identity - &c_tilde))? * &m_tilde;
        let mut new_c_y = match opts.rule {
            CovarianceRule::Response => {
                let r = linalg::inverse_r(&(&identity - &weighted_sigma))?;
                let mut k = DMatrix::zeros(p, p);
                for ((law, _), (w, mo)) in groups.iter().zip(weights.iter().zip(&moments)) {
                    let cm = law.cov() * &new_m_y;
                    let mi = law.mean();
                    let v = mi * mo.e + &cm * mo.d;
                    let cross = &cm * mi.transpose();
                    k += (law.second_moment() * mo.s
                        + (&cross + cross.transpose()) * mo.t
                        + &cm * cm.transpose() * mo.r
                        - &v * v.transpose())
                        * *w;
                }
                &r * k * r.transpose() / n
            }
            CovarianceRule::Theta => {
                let mut sigma_tilde = DMatrix::zeros(p, p);
                for ((law, _), (w, mo)) in groups.iter().zip(weights.iter().zip(&moments)) {
                    sigma_tilde += law.second_moment() * (w * mo.s);
                }
                theta(&sigma_tilde, &c_tilde, 1e-14, 100_000)? / n
            }
        };
        linalg::symmetrize(&mut new_c_y);

        let mut change = (&new_m_y - &m_y).amax();
        for (g, (law, _)) in groups.iter().enumerate() {
            let new_mu = law.mean().dot(&new_m_y);
            let new_nu = ((law.second_moment() * &new_c_y).trace() + new_m_y.dot(&(law.cov() * &new_m_y))).max(0.0);
            change = change.max((new_mu - mu[g]).abs()).max((new_nu - nu[g]).abs());
            mu[g] = new_mu;
            nu[g] = new_nu;
        }
        m_y = new_m_y;
        c_y = new_c_y;
        diag.change_history.push(change);
        diag.outer_iterations = step;
        if !change.is_finite() {
            return Err(Error::NonConvergence {
                iterations: step,
                residual: change,
            });
        }
        if change <= opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            iterations: opts.max_outer,
            residual: diag.change_history.last().copied().unwrap_or(f64::INFINITY),
        });
    }

    let min_eig = if p > 0 {
        c_y.clone().symmetric_eigenvalues().min()
    } else {
        0.0
    };
    if min_eig < -1e-10 {
        return Err(Error::Consistency(format!("predicted covariance has eigenvalue {min_eig:e}")));
    }

    let expand = |v: &[f64]| -> Vec<f64> {
        let mut out = Vec::with_capacity(model.n());
        for (g, (_, count)) in groups.iter().enumerate() {
            out.extend(std::iter::repeat_n(v[g], *count));
        }
        out
    };
    Ok(PredictedStats {
        mu: expand(&mu),
        nu: expand(&nu),
        delta: expand(&deltas),
        m_y,
        c_y,
        diagnostics: diag,
    })
}

/// Monte-Carlo mean and covariance of `Y` over seeded draws.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub used: usize,
    pub discarded: usize,
}

impl EmpiricalStats {
    pub fn discard_rate(&self) -> f64 {
        self.discarded as f64 / (self.used + self.discarded).max(1) as f64
    }

    /// More than 20% of draws violated the contraction precondition.
    pub fn flagged(&self) -> bool {
        self.discard_rate() > 0.2
    }
}

/// Solves for `Y` on `trials` seeded draws; draws whose contraction bound
/// exceeds the limit are discarded and counted.
pub fn empirical_regression_stats(model: &DataModel, f: &Nonlinearity, trials: usize, seed: u64) -> Result<EmpiricalStats> {
    if trials < 2 {
        return Err(Error::InvalidArgument("need at least 2 trials".into()));
    }
    let slots: Vec<Result<Option<DVector<f64>>>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let x = sample(model, derive_seed(seed, t as u64));
            match solve_y(&x, f, 1e-12) {
                Ok(sol) => Ok(Some(sol.y)),
                Err(Error::ContractionViolated { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut ys = Vec::with_capacity(trials);
    let mut discarded = 0;
    for s in slots {
        match s? {
            Some(y) => ys.push(y),
            None => discarded += 1,
        }
    }
    if ys.len() < 2 {
        return Err(Error::Estimation(format!(
            "only {} of {trials} draws satisfied the contraction precondition",
            ys.len()
        )));
    }
    let p = model.p();
    let used = ys.len();
    let mut sums = vec![CompensatedSum::default(); p];
    for y in &ys {
        for (s, v) in sums.iter_mut().zip(y.iter()) {
            s.add(*v);
        }
    }
    let mean = DVector::from_iterator(p, sums.iter().map(|s| s.value() / used as f64));
    let mut cov = DMatrix::zeros(p, p);
    for y in &ys {
        let d = y - &mean;
        cov += &d * d.transpose();
    }
    cov /= (used - 1) as f64;
    linalg::symmetrize(&mut cov);
    Ok(EmpiricalStats {
        mean,
        cov,
        used,
        discarded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(p: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(p, n, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    /// Independent oracle: damped Newton on `F(Y) = Y − (1/n) X f(XᵀY)`.
    fn newton_oracle(x: &DMatrix<f64>, f: &Nonlinearity) -> DVector<f64> {
        let (p, n) = x.shape();
        let mut y = DVector::zeros(p);
        for _ in 0..100 {
            let s = x.transpose() * &y;
            let fs = s.map(|v| f.eval(v));
            let r = &y - x * fs / n as f64;
            if r.norm() < 1e-15 {
                break;
            }
            let mut xg = x.clone();
            for j in 0..n {
                xg.column_mut(j).scale_mut(f.deriv(s[j]) / n as f64);
            }
            let jac = DMatrix::identity(p, p) - xg * x.transpose();
            let step = jac.lu().solve(&r).unwrap();
            let mut t = 1.0;
            loop {
                let cand = &y - &step * t;
                let s2 = x.transpose() * &cand;
                let r2 = &cand - x * s2.map(|v| f.eval(v)) / n as f64;
                if r2.norm() < r.norm() || t < 1e-6 {
                    y = cand;
                    break;
                }
                t *= 0.5;
            }
        }
        y
    }

    #[test]
    fn logistic_properties() {
        let f = Nonlinearity::logistic(5.0);
        assert_relative_eq!(f.eval(0.0), 0.1, epsilon = 1e-16);
        assert_relative_eq!(f.deriv(0.0).abs(), f.sup_deriv(), epsilon = 1e-16);
        assert!(f.sup_deriv2() <= 0.1 / 5.0);
        f.audit().unwrap();
        Nonlinearity::tanh(0.3).audit().unwrap();
        Nonlinearity::constant(2.0).audit().unwrap();
        Nonlinearity::identity().audit().unwrap();
        let bad = Nonlinearity::new("bad", Arc::new(|t| 2.0 * t), Arc::new(|_| 2.0), Arc::new(|_| 0.0), 1.0, 0.0);
        assert!(bad.audit().is_err());
    }

    #[test]
    fn solve_y_trivial_cases() {
        let x = SampleMatrix::from_data(random_matrix(3, 5, 1));
        let s = solve_y(&x, &Nonlinearity::zero(), 1e-12).unwrap();
        assert_eq!(s.y, DVector::zeros(3));
        assert_eq!(s.iterations, 1);

        let one = SampleMatrix::from_data(DMatrix::from_element(1, 1, 1.0));
        let s = solve_y(&one, &Nonlinearity::constant(0.7), 1e-12).unwrap();
        assert_eq!(s.y[0], 0.7);
    }

    #[test]
    fn solve_y_matches_newton() {
        let x = random_matrix(5, 10, 2);
        let f = Nonlinearity::logistic(2.0);
        let sol = solve_y(&SampleMatrix::from_data(x.clone()), &f, 1e-13).unwrap();
        let oracle = newton_oracle(&x, &f);
        assert!((&sol.y - &oracle).norm() <= 1e-8);
        assert!(sol.contraction_bound < 1.0);
        let bound_iters = (1e-13f64).ln() / sol.contraction_bound.ln() + 50.0;
        assert!(sol.iterations as f64 <= bound_iters);

        let loo = solve_y_loo(&SampleMatrix::from_data(x.clone()), 3, &f, 1e-13).unwrap();
        let mut xz = x.clone();
        xz.column_mut(3).fill(0.0);
        assert!((loo.y - newton_oracle(&xz, &f)).norm() <= 1e-8);
    }

    #[test]
    fn contraction_violation_is_refused() {
        let x = SampleMatrix::from_data(random_matrix(5, 10, 3) * 10.0);
        let err = solve_y(&x, &Nonlinearity::logistic(0.1), 1e-10).unwrap_err();
        assert!(matches!(err, Error::ContractionViolated { .. }));
    }

    #[test]
    fn loo_edge_cases() {
        let f = Nonlinearity::logistic(3.0);
        let x = SampleMatrix::from_data(DMatrix::from_element(2, 1, 0.5));
        assert_eq!(solve_y_loo(&x, 0, &f, 1e-12).unwrap().y, DVector::zeros(2));

        let mut d = random_matrix(3, 6, 4);
        let c = d.column(1).clone_owned();
        d.set_column(4, &c);
        let x = SampleMatrix::from_data(d);
        let a = solve_y_loo(&x, 1, &f, 1e-13).unwrap().y;
        let b = solve_y_loo(&x, 4, &f, 1e-13).unwrap().y;
        assert!((a - b).norm() <= 1e-14);
    }

    #[test]
    fn q_minus_i_cases() {
        let x = SampleMatrix::from_data(random_matrix(4, 7, 5));
        let y = DVector::from_vec(vec![0.1, -0.2, 0.0, 0.3]);
        let q = q_minus_i(&x, &y, 2, &Nonlinearity::zero()).unwrap();
        assert_eq!(q, DMatrix::identity(4, 4));

        let lin = Nonlinearity::new("lin", Arc::new(|t| 0.2 * t), Arc::new(|_| 0.2), Arc::new(|_| 0.0), 0.2, 0.0);
        let q = q_minus_i(&x, &y, 2, &lin).unwrap();
        let mut gamma = vec![0.2; 7];
        gamma[2] = 0.0;
        let r = resolvent_weighted_real(&x.data, &gamma, 1.0).unwrap();
        assert_eq!(q, r);

        let f = Nonlinearity::logistic(2.0);
        let q = q_minus_i(&x, &y, 2, &f).unwrap();
        let mut a = DMatrix::identity(4, 4);
        for j in 0..7 {
            if j == 2 {
                continue;
            }
            let c = x.data.column(j);
            a -= c * c.transpose() * (f.deriv(c.dot(&y)) / 7.0);
        }
        let o = a.lu().try_inverse().unwrap();
        assert!((q - o).amax() <= 1e-12);
    }

    #[test]
    fn w_residual_closed_forms() {
        let x = SampleMatrix::from_data(random_matrix(4, 8, 6));
        assert_eq!(w_residual(&x, 3, &Nonlinearity::zero(), 1e-12).unwrap(), 0.0);
        assert!(w_residual(&x, 3, &Nonlinearity::constant(0.4), 1e-12).unwrap() <= 1e-14);
        let (model, f) = logistic_model(
            DVector::from_fn(50, |i, _| if i == 0 { 2.0 } else { 0.0 }),
            DMatrix::identity(50, 50),
            100,
            5.0,
        )
        .unwrap();
        let x = sample(&model, 1);
        let w = w_residual(&x, 0, &f, 1e-14).unwrap();
        assert!(w.is_finite() && w < 1e-3);
    }

    #[test]
    fn zeta_examples() {
        let f = Nonlinearity::logistic(1.0);
        assert_eq!(zeta(0.3, 0.0, &f).unwrap(), (0.3, 1.0));
        let (z, d) = zeta(0.3, 0.5, &Nonlinearity::constant(2.0)).unwrap();
        assert_relative_eq!(z, 1.3, epsilon = 1e-15);
        assert_eq!(d, 1.0);

        // Scalar Picard oracle for z = 0.5/(1 + e^z).
        let mut o: f64 = 0.0;
        for _ in 0..200 {
            o = 0.5 / (1.0 + o.exp());
        }
        let (z, _) = zeta(0.0, 0.5, &f).unwrap();
        assert!((z - o).abs() <= 1e-10);
        // The true root is 0.2223234712...
        assert!((z - 0.22226).abs() <= 1e-4);
        assert!(zeta(0.0, 5.0, &f).is_err());
    }

    #[test]
    fn theta_commuting_case() {
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 0.5]));
        let ct = DMatrix::from_diagonal(&DVector::from_vec(vec![0.3, -0.5, 0.1]));
        let th = theta(&b, &ct, 1e-15, 10_000).unwrap();
        for k in 0..3 {
            let c = ct[(k, k)];
            assert_relative_eq!(th[(k, k)], b[(k, k)] / (1.0 - c * c), epsilon = 1e-10);
        }
        assert!((&th - &b - &ct * &th * &ct).norm() <= 1e-10);
    }

    #[test]
    fn predict_zero_nonlinearity() {
        let m = DataModel::isotropic(5, 10, 0.2, 0.25).unwrap();
        let s = predict_stats(&m, &Nonlinearity::zero(), &PredictOptions::default()).unwrap();
        assert_eq!(s.m_y, DVector::zeros(5));
        assert_eq!(s.c_y, DMatrix::zeros(5, 5));
        assert!(s.mu.iter().chain(&s.nu).all(|v| *v == 0.0));
    }

    #[test]
    fn predict_constant_nonlinearity() {
        let (p, n, c) = (6, 12, 0.7);
        let m = DataModel::new_relaxed(vec![(ColumnLaw::isotropic(p, 1.0).unwrap(), n)], Generator::Gaussian, 0.25)
            .unwrap();
        for rule in [CovarianceRule::Response, CovarianceRule::Theta] {
            let opts = PredictOptions {
                rule,
                ..Default::default()
            };
            let s = predict_stats(&m, &Nonlinearity::constant(c), &opts).unwrap();
            assert!(s.m_y.amax() == 0.0);
            let want = DMatrix::<f64>::identity(p, p) * (c * c / n as f64);
            assert!((&s.c_y - want).amax() <= 1e-14);
            for v in &s.nu {
                assert_relative_eq!(*v, c * c * p as f64 / n as f64, epsilon = 1e-13);
            }
            assert_relative_eq!(s.delta[0], p as f64 / n as f64, epsilon = 1e-15);
        }
    }

    #[test]
    fn empirical_constant_case() {
        let (p, n, c) = (3, 5, 0.5);
        let m = DataModel::new_relaxed(vec![(ColumnLaw::isotropic(p, 1.0).unwrap(), n)], Generator::Gaussian, 0.25)
            .unwrap();
        let e = empirical_regression_stats(&m, &Nonlinearity::constant(c), 10_000, 3).unwrap();
        let want = c * c / n as f64;
        for i in 0..p {
            assert!((e.cov[(i, i)] - want).abs() < 5.0 * want * (2.0 / 10_000f64).sqrt());
            assert!(e.mean[i].abs() < 5.0 * (want / 10_000.0).sqrt());
        }
        let z = empirical_regression_stats(&m, &Nonlinearity::zero(), 4, 3).unwrap();
        assert_eq!(z.mean, DVector::zeros(p));
        assert_eq!(z.cov, DMatrix::zeros(p, p));
        assert_eq!(
            empirical_regression_stats(&m, &Nonlinearity::constant(c), 6, 9),
            empirical_regression_stats(&m, &Nonlinearity::constant(c), 6, 9)
        );
    }

    #[test]
    fn stein_closed_forms() {
        let p = 3;
        let mu = DVector::from_vec(vec![0.5, -0.2, 0.1]);
        let c = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 0.5, 0.1, 0.0, 0.1, 0.8]);
        let w = DVector::from_vec(vec![0.3, 0.1, -0.4]);
        let u = DVector::from_vec(vec![1.0, 0.0, 2.0]);
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.0, 0.0, 1.0, 0.0, 0.2, 0.0, 0.3]);
        let r = stein_check(&mu, &c, &w, &u, &a, &Nonlinearity::identity(), 200_000, 1).unwrap();
        let closed = w.dot(&mu) * u.dot(&mu) + u.dot(&(&c * &w));
        assert_relative_eq!(r.linear.rhs_quadrature, closed, epsilon = 1e-12);
        assert!(r.linear.z_score() <= 4.0 && r.quadratic.z_score() <= 4.0);

        let zero_w = DVector::zeros(p);
        let f = Nonlinearity::logistic(1.0);
        let r = stein_check(&mu, &c, &zero_w, &u, &a, &f, 50_000, 2).unwrap();
        assert_relative_eq!(r.linear.rhs_quadrature, f.eval(0.0) * u.dot(&mu), epsilon = 1e-15);
        assert!(r.linear.z_score() <= 4.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn zeta_derivative_matches_fd(v in -10.0f64..10.0, k in 0.0f64..0.9, lam in 0.2f64..5.0) {
            let f = Nonlinearity::logistic(lam);
            let delta = k / f.sup_deriv();
            let (z, d) = zeta(v, delta, &f).unwrap();
            prop_assert!((z - v - delta * f.eval(z)).abs() <= 1e-12);
            let h = 1e-5;
            let fd = (zeta(v + h, delta, &f).unwrap().0 - zeta(v - h, delta, &f).unwrap().0) / (2.0 * h);
            prop_assert!((fd - d).abs() <= 1e-6 * d.abs());
        }

        #[test]
        fn solve_y_column_permutation(seed in any::<u64>()) {
            let x = random_matrix(4, 8, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let mut perm: Vec<usize> = (0..8).collect();
            for k in (1..8).rev() {
                perm.swap(k, rng.random_range(0..=k));
            }
            let xp = DMatrix::from_fn(4, 8, |i, j| x[(i, perm[j])]);
            let f = Nonlinearity::logistic(4.0);
            let a = solve_y(&SampleMatrix::from_data(x), &f, 1e-14).unwrap().y;
            let b = solve_y(&SampleMatrix::from_data(xp), &f, 1e-14).unwrap().y;
            prop_assert!((a - b).amax() <= 1e-13);
        }

        #[test]
        fn theta_residual(seed in any::<u64>(), p in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = DMatrix::from_fn(p, p, |_, _| rng.random::<f64>() - 0.5);
            let b = &g * g.transpose();
            let h = DMatrix::from_fn(p, p, |_, _| rng.random::<f64>() - 0.5);
            let mut ct = &h * h.transpose();
            let s = linalg::sym_spectral_norm(&ct);
            ct *= 0.8 / s.max(1e-12);
            let th = theta(&b, &ct, 1e-15, 100_000).unwrap();
            prop_assert!((&th - &b - &ct * &th * &ct).norm() <= 1e-10);
        }
    }
}
