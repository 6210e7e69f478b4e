//! Complex diagonal matrices, the map `χ(z) = 1/(1 − z)`, the stable
//! semi-metric `d_s`, and a damped fixed-point driver.

use std::ops::Index;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::C64;

/// Half-plane constraint carried by a diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// Every entry has `Im > 0`.
    Upper,
    /// Every entry has `Im < 0` (the conjugate picture).
    Lower,
    /// No constraint, e.g. on the real axis where `d_s` is undefined.
    Unconstrained,
}

impl Domain {
    fn admits(self, v: C64) -> bool {
        match self {
            Domain::Upper => v.im > 0.0,
            Domain::Lower => v.im < 0.0,
            Domain::Unconstrained => true,
        }
    }
}

/// Diagonal of an n×n complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexDiagonal {
    entries: Vec<C64>,
    domain: Domain,
}

impl ComplexDiagonal {
    /// Untagged diagonal. Panics on an empty input.
    pub fn new(entries: Vec<C64>) -> Self {
        assert!(!entries.is_empty(), "a diagonal needs at least one entry");
        Self {
            entries,
            domain: Domain::Unconstrained,
        }
    }

    /// Tagged diagonal; fails with the first entry outside the half-plane.
    pub fn with_domain(entries: Vec<C64>, domain: Domain) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArgument("empty diagonal".into()));
        }
        if let Some(k) = entries.iter().position(|v| !domain.admits(*v)) {
            return Err(Error::Domain {
                index: k,
                reason: format!("{} is outside the {domain:?} half-plane", entries[k]),
            });
        }
        Ok(Self { entries, domain })
    }

    pub fn from_real(values: &[f64]) -> Self {
        Self::new(values.iter().map(|&v| C64::new(v, 0.0)).collect())
    }

    pub fn constant(n: usize, v: C64) -> Self {
        Self::new(vec![v; n])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[C64] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<C64> {
        self.entries
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    /// Drops or changes the tag without checking.
    pub fn retag(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    pub fn conj(&self) -> Self {
        let domain = match self.domain {
            Domain::Upper => Domain::Lower,
            Domain::Lower => Domain::Upper,
            Domain::Unconstrained => Domain::Unconstrained,
        };
        Self {
            entries: self.entries.iter().map(|v| v.conj()).collect(),
            domain,
        }
    }

    /// `sup_i |a_i − b_i|`.
    pub fn sup_distance(&self, other: &Self) -> f64 {
        assert_eq!(self.len(), other.len(), "length mismatch");
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn all_upper(&self) -> bool {
        self.entries.iter().all(|v| v.im > 0.0)
    }

    pub fn all_lower(&self) -> bool {
        self.entries.iter().all(|v| v.im < 0.0)
    }
}

impl Index<usize> for ComplexDiagonal {
    type Output = C64;

    fn index(&self, k: usize) -> &C64 {
        &self.entries[k]
    }
}

/// Entrywise `χ(z) = 1/(1 − z)`.
pub fn chi(d: &ComplexDiagonal) -> Result<ComplexDiagonal> {
    let one = C64::new(1.0, 0.0);
    let mut out = Vec::with_capacity(d.len());
    for (k, v) in d.entries.iter().enumerate() {
        let den = one - v;
        if den.norm() < 1e-300 {
            return Err(Error::Domain {
                index: k,
                reason: "pole of chi at 1".into(),
            });
        }
        out.push(one / den);
    }
    Ok(ComplexDiagonal {
        entries: out,
        domain: d.domain,
    })
}

/// `d_s(D, D') = sup_i |D_i − D'_i| / √(Im D_i · Im D'_i)`, upper half-plane only.
pub fn stable_distance(a: &ComplexDiagonal, b: &ComplexDiagonal) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut worst = 0.0_f64;
    for (k, (x, y)) in a.entries.iter().zip(&b.entries).enumerate() {
        if x.im <= 0.0 || y.im <= 0.0 {
            return Err(Error::Domain {
                index: k,
                reason: "stable distance needs positive imaginary parts".into(),
            });
        }
        worst = worst.max((x - y).norm() / (x.im * y.im).sqrt());
    }
    Ok(worst)
}

/// Stopping and damping parameters of [`solve_contractive`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
    /// Retry once at damping 0.5 after 10 consecutive non-decreasing residuals.
    pub auto_damp: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 1000,
            damping: 1.0,
            auto_damp: true,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tol must be positive, got {}", self.tol)));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    /// `‖D − f(D)‖_∞` at the returned iterate.
    pub final_residual: f64,
    /// `d_s` between successive iterates while both lie in a half-plane
    /// (for the lower half-plane, measured on conjugates).
    pub ds_history: Vec<f64>,
    pub residual_history: Vec<f64>,
    /// Damping in force when the iteration stopped.
    pub damping: f64,
    /// Continuation steps a caller took to reach the target (0 for a direct solve).
    pub continuation_steps: usize,
}

/// Iterates `D ← (1 − a)·D + a·f(D)` until `‖D − f(D)‖_∞ ≤ tol`.
///
/// The returned diagonal is the iterate whose residual was certified, so
/// `final_residual` is exact for it. Iterates that leave the tagged
/// half-plane of `d0` raise [`Error::DomainEscape`].
pub fn solve_contractive<F>(
    mut f: F,
    d0: &ComplexDiagonal,
    opts: &SolveOptions,
) -> Result<(ComplexDiagonal, SolveDiagnostics)>
where
    F: FnMut(&ComplexDiagonal) -> Result<ComplexDiagonal>,
{
    opts.validate()?;
    let domain = d0.domain;
    if let Some(k) = d0.entries.iter().position(|v| !domain.admits(*v)) {
        return Err(Error::DomainEscape { iteration: 0, index: k });
    }
    let mut diag = SolveDiagnostics {
        damping: opts.damping,
        ..Default::default()
    };
    let mut d = d0.clone();
    let mut damping = opts.damping;
    let mut retried = false;
    let mut stalled = 0usize;
    let mut prev_res = f64::INFINITY;
    let mut res = f64::INFINITY;

    for it in 0..opts.max_iter {
        let fd = f(&d)?;
        if fd.len() != d.len() {
            return Err(Error::InvalidArgument("map changed the diagonal length".into()));
        }
        res = d.sup_distance(&fd);
        if !res.is_finite() {
            return Err(Error::NonConvergence {
                iterations: it,
                residual: res,
            });
        }
        diag.residual_history.push(res);
        if res <= opts.tol {
            diag.iterations = it;
            diag.final_residual = res;
            diag.damping = damping;
            return Ok((d.retag(domain), diag));
        }

        if res >= prev_res {
            stalled += 1;
        } else {
            stalled = 0;
        }
        prev_res = res;
        if opts.auto_damp && !retried && stalled >= 10 && damping > 0.5 {
            damping = 0.5;
            retried = true;
            stalled = 0;
        }

        let next: Vec<C64> = d
            .entries
            .iter()
            .zip(&fd.entries)
            .map(|(a, b)| a * (1.0 - damping) + b * damping)
            .collect();
        if let Some(k) = next.iter().position(|v| !domain.admits(*v)) {
            return Err(Error::DomainEscape {
                iteration: it + 1,
                index: k,
            });
        }
        let next = ComplexDiagonal {
            entries: next,
            domain,
        };
        let ds = if d.all_upper() && next.all_upper() {
            stable_distance(&d, &next).ok()
        } else if d.all_lower() && next.all_lower() {
            stable_distance(&d.conj(), &next.conj()).ok()
        } else {
            None
        };
        if let Some(v) = ds {
            diag.ds_history.push(v);
        }
        d = next;
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        residual: res,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn chi_examples() {
        let out = chi(&ComplexDiagonal::new(vec![c(0.0, 0.0), c(2.0, 0.0), c(0.0, 1.0)])).unwrap();
        assert_eq!(out[0], c(1.0, 0.0));
        assert_eq!(out[1], c(-1.0, 0.0));
        assert_relative_eq!(out[2].re, 0.5, epsilon = 1e-15);
        assert_relative_eq!(out[2].im, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn chi_pole_reports_index() {
        let err = chi(&ComplexDiagonal::new(vec![c(0.0, 0.0), c(1.0, 0.0)])).unwrap_err();
        assert!(matches!(err, Error::Domain { index: 1, .. }));
    }

    #[test]
    fn stable_distance_examples() {
        let a = ComplexDiagonal::new(vec![c(0.0, 1.0)]);
        let b = ComplexDiagonal::new(vec![c(0.0, 2.0)]);
        assert_relative_eq!(stable_distance(&a, &b).unwrap(), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-13);
        assert_eq!(stable_distance(&a, &a).unwrap(), 0.0);
        let d = ComplexDiagonal::new(vec![c(1.0, 1.0), c(0.0, 1.0)]);
        let e = ComplexDiagonal::new(vec![c(0.0, 1.0), c(0.0, 1.0)]);
        assert_relative_eq!(stable_distance(&d, &e).unwrap(), 1.0, epsilon = 1e-15);
        let real = ComplexDiagonal::new(vec![c(0.0, 0.0)]);
        assert!(stable_distance(&real, &a).is_err());
    }

    #[test]
    fn constant_map_one_step() {
        let target = ComplexDiagonal::new(vec![c(0.3, 0.7), c(-1.0, 2.0)]);
        let d0 = ComplexDiagonal::new(vec![c(0.0, 1.0); 2]);
        let (d, diag) = solve_contractive(|_| Ok(target.clone()), &d0, &SolveOptions::default()).unwrap();
        assert_eq!(d, target);
        assert_eq!(diag.iterations, 1);
        assert_eq!(diag.final_residual, 0.0);
    }

    #[test]
    fn affine_scalar_map() {
        let d0 = ComplexDiagonal::with_domain(vec![c(0.0, 1.0)], Domain::Upper).unwrap();
        let opts = SolveOptions::default();
        let (d, diag) = solve_contractive(
            |d| Ok(ComplexDiagonal::new(vec![c(0.0, 1.0) + d[0] * 0.5])),
            &d0,
            &opts,
        )
        .unwrap();
        assert!((d[0] - c(0.0, 2.0)).norm() <= 2.0 * opts.tol);
        let expected = (1.0 / opts.tol).log2();
        assert!((diag.iterations as f64 - expected).abs() <= 3.0, "{}", diag.iterations);
        assert_eq!(diag.ds_history.len(), diag.iterations);
    }

    #[test]
    fn non_convergence_and_escape() {
        let d0 = ComplexDiagonal::new(vec![c(0.0, 1.0)]);
        let opts = SolveOptions {
            max_iter: 20,
            auto_damp: false,
            ..Default::default()
        };
        let err = solve_contractive(|d| Ok(ComplexDiagonal::new(vec![d[0] + 1.0])), &d0, &opts).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { iterations: 20, .. }));

        let up = ComplexDiagonal::with_domain(vec![c(0.0, 1.0)], Domain::Upper).unwrap();
        let err = solve_contractive(|d| Ok(ComplexDiagonal::new(vec![d[0] - c(0.0, 3.0)])), &up, &opts)
            .unwrap_err();
        assert!(matches!(err, Error::DomainEscape { iteration: 1, index: 0 }));
    }

    #[test]
    fn oscillation_triggers_damping() {
        // f(d) = -d + 2 oscillates forever undamped; damping 0.5 lands on 1 at once.
        let d0 = ComplexDiagonal::new(vec![c(0.0, 0.0)]);
        let (d, diag) = solve_contractive(
            |d| Ok(ComplexDiagonal::new(vec![c(2.0, 0.0) - d[0]])),
            &d0,
            &SolveOptions::default(),
        )
        .unwrap();
        assert!((d[0] - c(1.0, 0.0)).norm() < 1e-10);
        assert_eq!(diag.damping, 0.5);
    }

    fn upper_diag(n: usize) -> impl Strategy<Value = Vec<C64>> {
        prop::collection::vec((-5.0f64..5.0, 1e-3f64..5.0).prop_map(|(r, i)| C64::new(r, i)), n)
    }

    fn pair() -> impl Strategy<Value = (Vec<C64>, Vec<C64>)> {
        (1usize..=16).prop_flat_map(|n| (upper_diag(n), upper_diag(n)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn chi_is_nonexpansive_for_ds((a, b) in pair()) {
            let a = ComplexDiagonal::new(a);
            let b = ComplexDiagonal::new(b);
            let before = stable_distance(&a, &b).unwrap();
            let ca = chi(&a).unwrap();
            let cb = chi(&b).unwrap();
            prop_assert!(ca.all_upper() && cb.all_upper());
            let after = stable_distance(&ca, &cb).unwrap();
            prop_assert!(after <= before + 1e-12 * (1.0 + before), "{} > {}", after, before);
        }

        #[test]
        fn ds_permutation_invariant((a, b) in pair(), seed in any::<u64>()) {
            let n = a.len();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut s = seed;
            for k in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                perm.swap(k, (s >> 33) as usize % (k + 1));
            }
            let pa: Vec<C64> = perm.iter().map(|&k| a[k]).collect();
            let pb: Vec<C64> = perm.iter().map(|&k| b[k]).collect();
            let d1 = stable_distance(&ComplexDiagonal::new(a), &ComplexDiagonal::new(b)).unwrap();
            let d2 = stable_distance(&ComplexDiagonal::new(pa), &ComplexDiagonal::new(pb)).unwrap();
            prop_assert_eq!(d1, d2);
        }

        #[test]
        fn ds_symmetric((a, b) in pair()) {
            let a = ComplexDiagonal::new(a);
            let b = ComplexDiagonal::new(b);
            prop_assert_eq!(stable_distance(&a, &b).unwrap(), stable_distance(&b, &a).unwrap());
        }

        #[test]
        fn residual_decays_at_lipschitz_rate(
            lam in 0.1f64..0.9,
            theta in 0.0f64..std::f64::consts::TAU,
            b in upper_diag(6),
        ) {
            // f(d)_k = b_k + λ e^{iθ} d_{k+1 mod n} is λ-Lipschitz in sup-norm.
            let rot = C64::from_polar(lam, theta);
            let map = |d: &ComplexDiagonal| {
                let n = d.len();
                Ok(ComplexDiagonal::new((0..n).map(|k| b[k] + rot * d[(k + 1) % n]).collect()))
            };
            let d0 = ComplexDiagonal::constant(6, C64::new(0.0, 1.0));
            let opts = SolveOptions { tol: 1e-12, auto_damp: false, ..Default::default() };
            let (_, diag) = solve_contractive(map, &d0, &opts).unwrap();
            for w in diag.residual_history.windows(2) {
                if w[0] > 1e-13 {
                    prop_assert!(w[1] <= (lam + 0.05) * w[0] + 1e-15);
                }
            }
        }
    }
}
