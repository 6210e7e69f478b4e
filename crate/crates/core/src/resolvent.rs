//! Deterministic equivalents of `Q^z = (zI − XXᵀ/n)⁻¹` and exact
//! empirical-resolvent utilities.
//!
//! The equivalent is `Q̃^z(χ(Λ^z))` with `Q̃^z(D) = (zI − (1/n)Σ_i D_i Σ_i)⁻¹`
//! and `Λ^z` the fixed point of `Λ = I^z(χ(Λ))`,
//! `I^z(D)_i = (1/n) tr(Σ_i Q̃^z(D))`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::cplx_diag::{chi, solve_contractive, ComplexDiagonal, Domain, SolveDiagnostics, SolveOptions};
use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix, CompensatedSum, C64, MAX_CONDITION};
use crate::model::{sample, DataModel, SampleMatrix};
use crate::rng::derive_seed;

/// Smallest admissible distance between `z` and `[0, 1 − ε]`.
pub const MIN_QUERY_DISTANCE: f64 = 1e-6;

/// Distance from `z` to the real segment `[0, b]`.
pub fn segment_distance(z: C64, b: f64) -> f64 {
    let x = z.re.clamp(0.0, b.max(0.0));
    ((z.re - x).powi(2) + z.im.powi(2)).sqrt()
}

fn check_query(z: C64, epsilon: f64) -> Result<()> {
    if !(z.re.is_finite() && z.im.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite z = {z}")));
    }
    let d = segment_distance(z, 1.0 - epsilon);
    if d < MIN_QUERY_DISTANCE {
        return Err(Error::InvalidArgument(format!(
            "z = {z} lies within {d:e} of [0, {}]",
            1.0 - epsilon
        )));
    }
    Ok(())
}

/// Half-plane in which `Λ^z` lives.
pub fn lambda_domain(z: C64) -> Domain {
    if z.im < 0.0 {
        Domain::Upper
    } else if z.im > 0.0 {
        Domain::Lower
    } else {
        Domain::Unconstrained
    }
}

/// How `Q̃` and the traces of `I^z` are evaluated for a model.
enum Plan {
    /// Every group's `Σ` is diagonal: `Q̃` is diagonal.
    Diagonal(Vec<DVector<f64>>),
    /// One shared law: `Σ_D = s·Σ`, diagonal in the eigenbasis of `Σ`.
    Shared { values: DVector<f64>, vectors: DMatrix<f64> },
    /// General case: one dense complex LU per evaluation.
    Dense,
}

/// Evaluates `Q̃^z` and `I^z` for a fixed model, caching factorizations
/// that do not depend on `D`.
pub struct Evaluator<'a> {
    model: &'a DataModel,
    plan: Plan,
}

impl<'a> Evaluator<'a> {
    pub fn new(model: &'a DataModel) -> Self {
        let groups = model.groups();
        let plan = if groups.iter().all(|(l, _)| l.second_moment_is_diagonal()) {
            Plan::Diagonal(groups.iter().map(|(l, _)| l.second_moment().diagonal()).collect())
        } else if groups.len() == 1 {
            let eig = groups[0].0.second_moment().clone().symmetric_eigen();
            Plan::Shared {
                values: eig.eigenvalues,
                vectors: eig.eigenvectors,
            }
        } else {
            Plan::Dense
        };
        Self { model, plan }
    }

    /// Forces the dense path (used to cross-check the fast paths).
    pub fn dense(model: &'a DataModel) -> Self {
        Self {
            model,
            plan: Plan::Dense,
        }
    }

    pub fn model(&self) -> &DataModel {
        self.model
    }

    /// `(1/n) Σ_{i ∈ g} D_i` per group.
    fn group_weights(&self, d: &ComplexDiagonal) -> Result<Vec<C64>> {
        let m = self.model;
        if d.len() != m.n() {
            return Err(Error::InvalidArgument(format!(
                "diagonal has {} entries but n = {}",
                d.len(),
                m.n()
            )));
        }
        let n = m.n() as f64;
        Ok((0..m.groups().len())
            .map(|g| {
                let (mut re, mut im) = (CompensatedSum::default(), CompensatedSum::default());
                for i in m.group_range(g) {
                    re.add(d[i].re);
                    im.add(d[i].im);
                }
                C64::new(re.value() / n, im.value() / n)
            })
            .collect())
    }

    /// Eigen-denominators `z − s_k` for the diagonal and shared plans.
    fn denominators(&self, z: C64, w: &[C64]) -> Option<Vec<C64>> {
        let p = self.model.p();
        match &self.plan {
            Plan::Diagonal(diags) => Some(
                (0..p)
                    .map(|k| z - diags.iter().zip(w).map(|(s, wg)| wg * s[k]).sum::<C64>())
                    .collect(),
            ),
            Plan::Shared { values, .. } => Some(values.iter().map(|v| z - w[0] * *v).collect()),
            Plan::Dense => None,
        }
    }

    fn check_denominators(den: &[C64]) -> Result<()> {
        let (lo, hi) = den
            .iter()
            .fold((f64::INFINITY, 0.0_f64), |(lo, hi), v| (lo.min(v.norm()), hi.max(v.norm())));
        let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !cond.is_finite() || cond > MAX_CONDITION {
            return Err(Error::Singular { condition: cond });
        }
        Ok(())
    }

    fn dense_matrix(&self, z: C64, w: &[C64]) -> CMatrix {
        let p = self.model.p();
        let mut a = CMatrix::from_diagonal_element(p, p, z);
        for ((law, _), wg) in self.model.groups().iter().zip(w) {
            let s = law.second_moment();
            for j in 0..p {
                for i in 0..p {
                    a[(i, j)] -= wg * s[(i, j)];
                }
            }
        }
        a
    }

    /// `Q̃^z(D)` as a dense matrix.
    pub fn tilde_q(&self, z: C64, d: &ComplexDiagonal) -> Result<CMatrix> {
        let w = self.group_weights(d)?;
        let p = self.model.p();
        match (&self.plan, self.denominators(z, &w)) {
            (Plan::Diagonal(_), Some(den)) => {
                Self::check_denominators(&den)?;
                Ok(CMatrix::from_diagonal(&DVector::from_iterator(p, den.iter().map(|v| v.inv()))))
            }
            (Plan::Shared { vectors, .. }, Some(den)) => {
                Self::check_denominators(&den)?;
                let u = linalg::to_complex(vectors);
                let scaled = CMatrix::from_fn(p, p, |i, k| u[(i, k)] / den[k]);
                Ok(scaled * u.transpose())
            }
            _ => linalg::inverse_c(&self.dense_matrix(z, &w)),
        }
    }

    /// `(1/n) tr(Σ_g Q̃^z(D))` per group.
    fn group_traces(&self, z: C64, d: &ComplexDiagonal) -> Result<Vec<C64>> {
        let w = self.group_weights(d)?;
        let n = self.model.n() as f64;
        match (&self.plan, self.denominators(z, &w)) {
            (Plan::Diagonal(diags), Some(den)) => {
                Self::check_denominators(&den)?;
                Ok(diags
                    .iter()
                    .map(|s| s.iter().zip(&den).map(|(v, dk)| *v / dk).sum::<C64>() / n)
                    .collect())
            }
            (Plan::Shared { values, .. }, Some(den)) => {
                Self::check_denominators(&den)?;
                Ok(vec![values.iter().zip(&den).map(|(v, dk)| *v / dk).sum::<C64>() / n])
            }
            _ => {
                let q = linalg::inverse_c(&self.dense_matrix(z, &w))?;
                let p = self.model.p();
                Ok(self
                    .model
                    .groups()
                    .iter()
                    .map(|(law, _)| {
                        let s = law.second_moment();
                        let mut acc = C64::new(0.0, 0.0);
                        for j in 0..p {
                            for k in 0..p {
                                acc += q[(k, j)] * s[(j, k)];
                            }
                        }
                        acc / n
                    })
                    .collect())
            }
        }
    }

    /// `I^z(D)_i = (1/n) tr(Σ_i Q̃^z(D))`.
    pub fn i_z(&self, z: C64, d: &ComplexDiagonal) -> Result<ComplexDiagonal> {
        let t = self.group_traces(z, d)?;
        let mut out = Vec::with_capacity(self.model.n());
        for (g, (_, count)) in self.model.groups().iter().enumerate() {
            out.extend(std::iter::repeat_n(t[g], *count));
        }
        Ok(ComplexDiagonal::new(out))
    }

    /// The map `D ↦ I^z(χ(D))` whose fixed point is `Λ^z`.
    pub fn lambda_map(&self, z: C64, d: &ComplexDiagonal) -> Result<ComplexDiagonal> {
        self.i_z(z, &chi(d)?)
    }

    /// `Λ₀ = diag(tr Σ_i / (z n))`, tagged with the half-plane of `z`.
    pub fn initial_lambda(&self, z: C64) -> Result<ComplexDiagonal> {
        let n = self.model.n() as f64;
        let entries = self.model.traces().into_iter().map(|t| C64::new(t, 0.0) / (z * n)).collect();
        ComplexDiagonal::with_domain(entries, lambda_domain(z))
    }

    fn solve_from(&self, z: C64, d0: &ComplexDiagonal, opts: &SolveOptions) -> Result<(ComplexDiagonal, SolveDiagnostics)> {
        let start = d0.clone().retag(Domain::Unconstrained);
        let start = ComplexDiagonal::with_domain(start.into_entries(), lambda_domain(z))?;
        solve_contractive(|d| self.lambda_map(z, d), &start, opts)
    }

    /// Solves `Λ = I^z(χ(Λ))` from `Λ₀`. On a real `z` that fails to
    /// converge, solves at `z − 0.5i` and walks back to `z` in five steps.
    pub fn compute_lambda(&self, z: C64, opts: &SolveOptions) -> Result<(ComplexDiagonal, SolveDiagnostics)> {
        check_query(z, self.model.epsilon())?;
        let d0 = self.initial_lambda(z)?;
        let direct = self.solve_from(z, &d0, opts);
        let (lambda, diag) = match direct {
            Err(Error::NonConvergence { .. }) | Err(Error::Singular { .. }) if z.im == 0.0 => {
                let steps = 5;
                let mut zk = z - C64::new(0.0, 0.5);
                let (mut lam, mut total) = self.solve_from(zk, &self.initial_lambda(zk)?, opts)?;
                for k in 1..=steps {
                    zk = z - C64::new(0.0, 0.5 * (steps - k) as f64 / steps as f64);
                    let (next, d) = self.solve_from(zk, &lam, opts)?;
                    total.iterations += d.iterations;
                    total.final_residual = d.final_residual;
                    total.ds_history.extend(d.ds_history);
                    total.residual_history.extend(d.residual_history);
                    total.damping = d.damping;
                    lam = next;
                }
                total.continuation_steps = steps;
                (lam, total)
            }
            other => other?,
        };
        if let Some(k) = lambda.entries().iter().position(|v| (v - 1.0).norm() < 1e-12) {
            return Err(Error::Domain {
                index: k,
                reason: "Lambda within 1e-12 of the chi pole".into(),
            });
        }
        Ok((lambda, diag))
    }

    pub fn deterministic_equivalent(&self, z: C64, opts: &SolveOptions) -> Result<DeterministicEquivalent> {
        let (lambda, diagnostics) = self.compute_lambda(z, opts)?;
        let tilde_q = self.tilde_q(z, &chi(&lambda)?)?;
        let p = self.model.p() as f64;
        let normalized_trace = tilde_q.trace() / p;
        Ok(DeterministicEquivalent {
            z,
            lambda,
            tilde_q,
            stieltjes: -normalized_trace,
            normalized_trace,
            diagnostics,
        })
    }

    /// `−(1/p) tr Q̃^z(χ(Λ^z))` without materializing `Q̃` on the fast paths.
    pub fn stieltjes(&self, z: C64, opts: &SolveOptions) -> Result<(C64, SolveDiagnostics)> {
        let (lambda, diag) = self.compute_lambda(z, opts)?;
        let d = chi(&lambda)?;
        let w = self.group_weights(&d)?;
        let p = self.model.p() as f64;
        let tr = match self.denominators(z, &w) {
            Some(den) => {
                Self::check_denominators(&den)?;
                den.iter().map(|v| v.inv()).sum::<C64>()
            }
            None => linalg::inverse_c(&self.dense_matrix(z, &w))?.trace(),
        };
        Ok((-tr / p, diag))
    }
}

/// `Λ^z` together with the equivalent `Q̃^z(χ(Λ^z))`.
#[derive(Debug, Clone)]
pub struct DeterministicEquivalent {
    pub z: C64,
    pub lambda: ComplexDiagonal,
    pub tilde_q: CMatrix,
    /// `m(z) = −(1/p) tr Q̃`, the Stieltjes transform of the limiting spectrum.
    pub stieltjes: C64,
    /// `(1/p) tr Q̃`.
    pub normalized_trace: C64,
    pub diagnostics: SolveDiagnostics,
}

pub fn tilde_q(z: C64, d: &ComplexDiagonal, model: &DataModel) -> Result<CMatrix> {
    Evaluator::new(model).tilde_q(z, d)
}

pub fn i_z(z: C64, d: &ComplexDiagonal, model: &DataModel) -> Result<ComplexDiagonal> {
    Evaluator::new(model).i_z(z, d)
}

pub fn compute_lambda(z: C64, model: &DataModel, opts: &SolveOptions) -> Result<(ComplexDiagonal, SolveDiagnostics)> {
    Evaluator::new(model).compute_lambda(z, opts)
}

pub fn deterministic_equivalent(z: C64, model: &DataModel, opts: &SolveOptions) -> Result<DeterministicEquivalent> {
    Evaluator::new(model).deterministic_equivalent(z, opts)
}

/// Default options for density sweeps: near the real axis the plain
/// iteration needs thousands of steps.
pub fn density_options() -> SolveOptions {
    SolveOptions {
        max_iter: 200_000,
        ..SolveOptions::default()
    }
}

/// `(x, (1/π) Im m(x + iη))` over `grid`, solved independently per point.
pub fn spectral_density(model: &DataModel, grid: &[f64], eta: f64, opts: &SolveOptions) -> Result<Vec<(f64, f64)>> {
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!("eta must be positive, got {eta}")));
    }
    let ev = Evaluator::new(model);
    let out: Vec<Result<(f64, f64)>> = grid
        .par_iter()
        .map(|&x| {
            let (m, _) = ev.stieltjes(C64::new(x, eta), opts)?;
            let rho = m.im / std::f64::consts::PI;
            if rho < -1e-12 {
                return Err(Error::Consistency(format!("negative density {rho:e} at x = {x}")));
            }
            Ok((x, rho))
        })
        .collect();
    out.into_iter().collect()
}

/// One row of a Stieltjes sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StieltjesPoint {
    pub z: C64,
    pub m: C64,
    pub iterations: usize,
    pub residual: f64,
}

pub fn stieltjes_sweep(model: &DataModel, zs: &[C64], opts: &SolveOptions) -> Result<Vec<StieltjesPoint>> {
    let ev = Evaluator::new(model);
    zs.iter()
        .map(|&z| {
            let (m, d) = ev.stieltjes(z, opts)?;
            Ok(StieltjesPoint {
                z,
                m,
                iterations: d.iterations,
                residual: d.final_residual,
            })
        })
        .collect()
}

/// Whether `‖XXᵀ/n‖ ≤ 1 − ε`, decided by a Cholesky factorization of
/// `(1 − ε)I − XXᵀ/n`.
pub fn in_event(gram: &DMatrix<f64>, epsilon: f64) -> bool {
    let p = gram.nrows();
    let mut a = -gram.clone();
    for i in 0..p {
        a[(i, i)] += 1.0 - epsilon;
    }
    linalg::cholesky(&a).is_some()
}

/// `Q^z` for a real `z`, with the event flag.
pub fn empirical_resolvent_real(x: &SampleMatrix, z: f64, epsilon: f64) -> Result<(DMatrix<f64>, bool)> {
    check_query(C64::new(z, 0.0), epsilon)?;
    let g = linalg::gram_over_n(&x.data);
    let ok = in_event(&g, epsilon);
    Ok((linalg::real_resolvent(&g, z)?, ok))
}

/// `Q^z = (zI − XXᵀ/n)⁻¹` and whether the draw lies in the event `A_Q`.
pub fn empirical_resolvent(x: &SampleMatrix, z: C64, epsilon: f64) -> Result<(CMatrix, bool)> {
    if z.im == 0.0 {
        let (q, ok) = empirical_resolvent_real(x, z.re, epsilon)?;
        return Ok((linalg::to_complex(&q), ok));
    }
    check_query(z, epsilon)?;
    let g = linalg::gram_over_n(&x.data);
    let ok = in_event(&g, epsilon);
    let p = g.nrows();
    let mut a = CMatrix::from_diagonal_element(p, p, z);
    a -= linalg::to_complex(&g);
    Ok((linalg::inverse_c(&a)?, ok))
}

/// Residual norms of the two rank-one (Schur) identities linking `Q` and
/// `Q_{−i}`: `‖Q − Q_{−i} − (1/n)Q_{−i}x xᵀQ_{−i}/(1 − (1/n)xᵀQ_{−i}x)‖_F`
/// and `‖Qx − Q_{−i}x/(1 − (1/n)xᵀQ_{−i}x)‖`.
pub fn schur_check(x: &SampleMatrix, z: C64, i: usize) -> Result<(f64, f64)> {
    let (p, n) = (x.p(), x.n());
    if i >= n {
        return Err(Error::InvalidArgument(format!("column {i} out of range (n = {n})")));
    }
    let g = linalg::to_complex(&linalg::gram_over_n(&x.data));
    let xi = linalg::to_complex_vec(&x.data.column(i).clone_owned());
    let nf = n as f64;
    let mut a = CMatrix::from_diagonal_element(p, p, z) - &g;
    let q = linalg::inverse_c(&a)?;
    a += &xi * xi.transpose() / C64::new(nf, 0.0);
    let q_mi = linalg::inverse_c(&a)?;

    let qx = &q_mi * &xi;
    let quad = (xi.transpose() * &qx)[(0, 0)] / nf;
    let den = C64::new(1.0, 0.0) - quad;
    if den.norm() < 1e-10 {
        return Err(Error::Singular {
            condition: 1.0 / den.norm(),
        });
    }
    let rhs = &q_mi + &qx * qx.transpose() / (den * nf);
    let res_m = (&q - rhs).norm();
    let res_v = (&q * &xi - qx / den).norm();
    Ok((res_m, res_v))
}

/// Monte-Carlo average of `D^z` over draws in `A_Q`.
#[derive(Debug, Clone)]
pub struct EmpiricalDelta {
    pub delta: ComplexDiagonal,
    pub used: usize,
    pub discarded: usize,
}

impl EmpiricalDelta {
    pub fn discard_rate(&self) -> f64 {
        self.discarded as f64 / (self.used + self.discarded) as f64
    }
}

/// `D^z_i = (1/n) x_iᵀ Q^z_{−i} x_i` for one draw, via
/// `D_i = q_i/(1 + q_i)` with `q_i = (1/n) x_iᵀ Q^z x_i`.
pub fn empirical_d(x: &SampleMatrix, q: &CMatrix) -> Vec<C64> {
    let n = x.n() as f64;
    let xc = linalg::to_complex(&x.data);
    let qx = q * &xc;
    (0..x.n())
        .map(|i| {
            let qi = xc.column(i).iter().zip(qx.column(i).iter()).map(|(a, b)| a * b).sum::<C64>() / n;
            qi / (C64::new(1.0, 0.0) + qi)
        })
        .collect()
}

/// `Δ^z ≈ E_{A_Q}[D^z]` from `trials` seeded draws.
pub fn empirical_delta(model: &DataModel, z: C64, trials: usize, seed: u64) -> Result<EmpiricalDelta> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    check_query(z, model.epsilon())?;
    let slots: Vec<Result<Option<Vec<C64>>>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let x = sample(model, derive_seed(seed, t as u64));
            let (q, ok) = empirical_resolvent(&x, z, model.epsilon())?;
            Ok(ok.then(|| empirical_d(&x, &q)))
        })
        .collect();
    let n = model.n();
    let mut re = vec![CompensatedSum::default(); n];
    let mut im = vec![CompensatedSum::default(); n];
    let (mut used, mut discarded) = (0, 0);
    for slot in slots {
        match slot? {
            Some(d) => {
                used += 1;
                for (k, v) in d.iter().enumerate() {
                    re[k].add(v.re);
                    im[k].add(v.im);
                }
            }
            None => discarded += 1,
        }
    }
    if used == 0 {
        return Err(Error::Estimation(format!("all {trials} trials fell outside the event")));
    }
    let delta = ComplexDiagonal::new(
        re.iter()
            .zip(&im)
            .map(|(r, i)| C64::new(r.value() / used as f64, i.value() / used as f64))
            .collect(),
    );
    Ok(EmpiricalDelta { delta, used, discarded })
}

/// `(1/n) X Γ Xᵀ` for a real diagonal `Γ`.
fn weighted_gram(x: &DMatrix<f64>, gamma: &[f64]) -> Result<DMatrix<f64>> {
    if gamma.len() != x.ncols() {
        return Err(Error::InvalidArgument(format!(
            "Gamma has {} entries but n = {}",
            gamma.len(),
            x.ncols()
        )));
    }
    let mut xg = x.clone();
    for (j, g) in gamma.iter().enumerate() {
        xg.column_mut(j).scale_mut(*g);
    }
    let mut m = xg * x.transpose();
    m /= x.ncols().max(1) as f64;
    linalg::symmetrize(&mut m);
    Ok(m)
}

/// `(zI − (1/n) X Γ Xᵀ)⁻¹` for real `z`, by dense LU.
pub fn resolvent_weighted_real(x: &DMatrix<f64>, gamma: &[f64], z: f64) -> Result<DMatrix<f64>> {
    let mut a = -weighted_gram(x, gamma)?;
    for i in 0..a.nrows() {
        a[(i, i)] += z;
    }
    linalg::inverse_r(&a)
}

/// `(zI − (1/n) X Γ Xᵀ)⁻¹`.
pub fn resolvent_weighted(x: &SampleMatrix, gamma: &[f64], z: C64) -> Result<CMatrix> {
    let m = weighted_gram(&x.data, gamma)?;
    let p = m.nrows();
    let a = CMatrix::from_diagonal_element(p, p, z) - linalg::to_complex(&m);
    linalg::inverse_c(&a)
}
