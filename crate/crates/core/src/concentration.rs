//! Monte-Carlo checks of concentration: observable diameters, tail
//! exponents, and size-scaling experiments.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, CompensatedSum, MatrixAccumulator, C64};
use crate::model::{sample, sample_bounded, ModelFamily};
use crate::resolvent::{density_options, empirical_resolvent, in_event, Evaluator};
use crate::rng::{derive_seed, for_each_trial_ordered, stream_rng};

/// MAD-to-σ factor of the normal law.
pub const MAD_SCALE: f64 = 1.4826;

/// Scalar observations, one per trial.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservableSamples {
    pub values: Vec<f64>,
    pub meta: String,
    pub seed: u64,
}

impl ObservableSamples {
    pub fn new(values: Vec<f64>, meta: impl Into<String>, seed: u64) -> Self {
        Self {
            values,
            meta: meta.into(),
            seed,
        }
    }
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn sorted(values: &[f64]) -> Result<Vec<f64>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateSamples("non-finite sample".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    Ok(v)
}

/// Sorted absolute deviations from the median.
fn deviations(values: &[f64]) -> Result<Vec<f64>> {
    let v = sorted(values)?;
    let med = median_sorted(&v);
    let mut dev: Vec<f64> = v.iter().map(|x| (x - med).abs()).collect();
    dev.sort_by(|a, b| a.total_cmp(b));
    Ok(dev)
}

/// `1.4826 · median |v − median(v)|`.
pub fn observable_diameter(samples: &ObservableSamples) -> Result<f64> {
    if samples.values.len() < 100 {
        return Err(Error::InvalidArgument(format!(
            "need at least 100 samples, got {}",
            samples.values.len()
        )));
    }
    let dev = deviations(&samples.values)?;
    let mad = median_sorted(&dev);
    if !(mad > 0.0) {
        return Err(Error::DegenerateSamples("median absolute deviation is zero".into()));
    }
    Ok(MAD_SCALE * mad)
}

/// Least-squares tail exponent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailFit {
    pub q_hat: f64,
    pub sigma_hat: f64,
    pub r2: f64,
    pub t_grid: Vec<f64>,
    /// `P̂(|v − median| ≥ t)` on `t_grid`.
    pub tail_probs: Vec<f64>,
}

/// Fits `log(−log P̂(|v − m| ≥ t)) = q·log t + b` over 50 log-spaced `t`
/// whose empirical tail probability lies in `[10/N, 0.2]`; `q_hat` is the slope.
pub fn fit_tail_exponent(samples: &ObservableSamples) -> Result<TailFit> {
    let n = samples.values.len();
    if n < 10_000 {
        return Err(Error::InvalidArgument(format!("need at least 10^4 samples, got {n}")));
    }
    let dev = deviations(&samples.values)?;
    let nf = n as f64;
    let survival = |t: f64| (n - dev.partition_point(|d| *d < t)) as f64 / nf;
    let (p_lo, p_hi) = (10.0 / nf, 0.2);
    // Deviation values at which the survival crosses the window ends.
    let t_lo = dev[((1.0 - p_hi) * nf).floor() as usize];
    let t_hi = dev[n - 10];
    if !(t_lo > 0.0) || !(t_hi > t_lo * (1.0 + 1e-9)) {
        return Err(Error::FitFailure("tail window is degenerate".into()));
    }
    let steps = 50;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut t_grid = Vec::new();
    let mut tail_probs = Vec::new();
    let mut last_p = f64::NAN;
    for k in 0..steps {
        let t = t_lo * (t_hi / t_lo).powf(k as f64 / (steps - 1) as f64);
        let p = survival(t);
        if p < p_lo || p > p_hi || p >= 1.0 || p == last_p {
            continue;
        }
        last_p = p;
        t_grid.push(t);
        tail_probs.push(p);
        xs.push(t.ln());
        ys.push((-p.ln()).ln());
    }
    if xs.len() < 5 {
        return Err(Error::FitFailure(format!("only {} usable grid points", xs.len())));
    }
    let (slope, r2) = ols(&xs, &ys);
    if !(slope > 0.0) {
        return Err(Error::FitFailure(format!("non-positive slope {slope}")));
    }
    let sigma_hat = MAD_SCALE * median_sorted(&dev);
    if !(sigma_hat > 0.0) {
        return Err(Error::DegenerateSamples("median absolute deviation is zero".into()));
    }
    Ok(TailFit {
        q_hat: slope,
        sigma_hat,
        r2,
        t_grid,
        tail_probs,
    })
}

/// Slope and `R²` of the least-squares line through `(x, y)`.
pub fn ols(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) } else { 1.0 };
    (slope, r2)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateRow {
    pub n: usize,
    pub p: usize,
    pub trials: usize,
    pub used: usize,
    pub discard_rate: f64,
    /// `‖mean_{A_Q} Q^z − Q̃^z‖_F`.
    pub error: f64,
    /// `√(ln n / n)`.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateTable {
    pub rows: Vec<RateRow>,
    /// Slope of `log error` against `log rate`.
    pub slope: f64,
}

/// Frobenius distance between the event-restricted empirical mean of `Q^z`
/// and the deterministic equivalent, per size.
pub fn frobenius_rate_experiment(
    family: &ModelFamily,
    z: C64,
    sizes: &[(usize, usize)],
    trials: usize,
    seed: u64,
) -> Result<RateTable> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    if sizes.is_empty() || sizes.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::InvalidArgument("sizes must be non-empty with n strictly increasing".into()));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for (row, &(n, p)) in sizes.iter().enumerate() {
        let model = family.instantiate(p, n)?;
        let eq = Evaluator::new(&model).deterministic_equivalent(z, &density_options())?;
        let row_seed = derive_seed(seed, row as u64);
        let mut acc = MatrixAccumulator::new(p, p);
        let mut used = 0;
        let mut failure = None;
        for_each_trial_ordered(
            trials,
            8,
            |t| -> Result<Option<_>> {
                let x = sample(&model, derive_seed(row_seed, t as u64));
                let (q, ok) = empirical_resolvent(&x, z, model.epsilon())?;
                Ok(ok.then_some(q))
            },
            |_, r| match r {
                Ok(Some(q)) => {
                    acc.add(&q);
                    used += 1;
                }
                Ok(None) => {}
                Err(e) => {
                    failure.get_or_insert(e);
                }
            },
        );
        if let Some(e) = failure {
            return Err(e);
        }
        if used == 0 {
            return Err(Error::Estimation(format!("every trial fell outside the event at n = {n}, p = {p}")));
        }
        let error = (acc.mean(used) - &eq.tilde_q).norm();
        let nf = n as f64;
        rows.push(RateRow {
            n,
            p,
            trials,
            used,
            discard_rate: (trials - used) as f64 / trials as f64,
            error,
            rate: (nf.ln() / nf).sqrt(),
        });
    }
    let slope = if rows.len() >= 2 {
        let xs: Vec<f64> = rows.iter().map(|r| r.rate.ln()).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.error.ln()).collect();
        ols(&xs, &ys).0
    } else {
        f64::NAN
    };
    Ok(RateTable { rows, slope })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HansonWrightRow {
    pub frobenius: f64,
    pub std: f64,
}

impl HansonWrightRow {
    /// `std / ‖A‖_F` (NaN for `A = 0`).
    pub fn ratio(&self) -> f64 {
        self.std / self.frobenius
    }
}

fn std_from_sums(s: &CompensatedSum, s2: &CompensatedSum, count: usize) -> f64 {
    let nf = count as f64;
    let mean = s.value() / nf;
    (((s2.value() - nf * mean * mean) / (nf - 1.0)).max(0.0)).sqrt()
}

/// Empirical std of `ZᵀAW` for independent `Z, W ~ N(0, I_p)`; the same
/// draws are shared across matrices.
pub fn hanson_wright_experiment(p: usize, matrices: &[DMatrix<f64>], trials: usize, seed: u64) -> Result<Vec<HansonWrightRow>> {
    if trials < 2 {
        return Err(Error::InvalidArgument("need at least 2 trials".into()));
    }
    if let Some(a) = matrices.iter().find(|a| a.shape() != (p, p)) {
        return Err(Error::InvalidArgument(format!("matrix of shape {:?}, expected {p}x{p}", a.shape())));
    }
    let k = matrices.len();
    let chunk = 4096usize;
    let chunks = trials.div_ceil(chunk);
    let mut sums = vec![(CompensatedSum::default(), CompensatedSum::default()); k];
    for_each_trial_ordered(
        chunks,
        16,
        |c| {
            let mut rng = stream_rng(derive_seed(seed, c as u64), 0);
            let count = chunk.min(trials - c * chunk);
            let mut part = vec![(CompensatedSum::default(), CompensatedSum::default()); k];
            let mut z = nalgebra::DVector::zeros(p);
            let mut w = nalgebra::DVector::zeros(p);
            for _ in 0..count {
                for v in z.iter_mut().chain(w.iter_mut()) {
                    *v = rng.sample(StandardNormal);
                }
                for (a, acc) in matrices.iter().zip(part.iter_mut()) {
                    let v = z.dot(&(a * &w));
                    acc.0.add(v);
                    acc.1.add(v * v);
                }
            }
            part
        },
        |_, part| {
            for (s, q) in sums.iter_mut().zip(part) {
                s.0.add(q.0.value());
                s.1.add(q.1.value());
            }
        },
    );
    Ok(matrices
        .iter()
        .zip(&sums)
        .map(|(a, (s, s2))| HansonWrightRow {
            frobenius: a.norm(),
            std: std_from_sums(s, s2, trials),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvexRow {
    pub p: usize,
    pub n: usize,
    pub used: usize,
    pub discard_rate: f64,
    /// Std of `(1/p) tr(A Q)` over draws in the event.
    pub std: f64,
    /// Discard rate above 10%.
    pub flagged: bool,
}

/// Entry scale applied to [`sample_bounded`] draws in the convex experiment.
pub const CONVEX_SCALE: f64 = 0.5;
pub const CONVEX_EPSILON: f64 = 0.25;
pub const CONVEX_Z: f64 = -1.0;

/// Std of `(1/p) tr(A Q^z)` with `A = a·I`, `z = −1`, `n = 2p`, and `X` made
/// of i.i.d. bounded entries (uniform, variance `0.25`).
pub fn convex_concentration_experiment(sizes: &[usize], trials: usize, seed: u64, a: f64) -> Result<Vec<ConvexRow>> {
    if trials < 2 {
        return Err(Error::InvalidArgument("need at least 2 trials".into()));
    }
    if !(a.abs() <= 1.0) {
        return Err(Error::InvalidArgument(format!("|a| must be at most 1, got {a}")));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for (row, &p) in sizes.iter().enumerate() {
        if p == 0 {
            return Err(Error::InvalidArgument("p must be positive".into()));
        }
        let n = 2 * p;
        let row_seed = derive_seed(seed, row as u64);
        let (mut s, mut s2) = (CompensatedSum::default(), CompensatedSum::default());
        let mut used = 0;
        for_each_trial_ordered(
            trials,
            8,
            |t| {
                let mut x = sample_bounded(p, n, derive_seed(row_seed, t as u64)).data;
                x *= CONVEX_SCALE;
                let g = linalg::gram_over_n(&x);
                if !in_event(&g, CONVEX_EPSILON) {
                    return None;
                }
                // Q = (zI − G)⁻¹ = −(G − zI)⁻¹ and tr((G − zI)⁻¹) = ‖L⁻¹‖²_F.
                let mut m = g;
                for i in 0..p {
                    m[(i, i)] -= CONVEX_Z;
                }
                let l = linalg::cholesky(&m)?.l();
                let linv = l.solve_lower_triangular(&DMatrix::identity(p, p))?;
                let tr_q = -linv.norm_squared();
                Some(a * tr_q / p as f64)
            },
            |_, v| {
                if let Some(v) = v {
                    s.add(v);
                    s2.add(v * v);
                    used += 1;
                }
            },
        );
        if used < 2 {
            return Err(Error::Estimation(format!("fewer than 2 draws in the event at p = {p}")));
        }
        let discard_rate = (trials - used) as f64 / trials as f64;
        rows.push(ConvexRow {
            p,
            n,
            used,
            discard_rate,
            std: std_from_sums(&s, &s2, used),
            flagged: discard_rate > 0.1,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resolvent::empirical_resolvent_real;
    use approx::assert_relative_eq;
    use rand_distr::Exp1;

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream_rng(seed, 0);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn laplace(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream_rng(seed, 0);
        (0..n)
            .map(|_| {
                let e: f64 = rng.sample(Exp1);
                if rng.random::<bool>() {
                    e
                } else {
                    -e
                }
            })
            .collect()
    }

    #[test]
    fn diameter_of_standard_normal() {
        let s = ObservableSamples::new(normals(100_000, 1), "normal", 1);
        let d = observable_diameter(&s).unwrap();
        assert!((d - 1.0).abs() <= 0.02, "{d}");
    }

    #[test]
    fn diameter_equivariance_and_shift() {
        let v = normals(1001, 2);
        let base = observable_diameter(&ObservableSamples::new(v.clone(), "", 0)).unwrap();
        let scaled: Vec<f64> = v.iter().map(|x| 3.0 * x).collect();
        let d3 = observable_diameter(&ObservableSamples::new(scaled, "", 0)).unwrap();
        assert_relative_eq!(d3, 3.0 * base, max_relative = 1e-14);
        let shifted: Vec<f64> = v.iter().map(|x| x + 0.75).collect();
        let ds = observable_diameter(&ObservableSamples::new(shifted, "", 0)).unwrap();
        assert_relative_eq!(ds, base, max_relative = 1e-12);
    }

    #[test]
    fn diameter_rejects_constant_and_short() {
        assert!(matches!(
            observable_diameter(&ObservableSamples::new(vec![2.0; 500], "", 0)),
            Err(Error::DegenerateSamples(_))
        ));
        assert!(observable_diameter(&ObservableSamples::new(vec![1.0; 10], "", 0)).is_err());
    }

    #[test]
    fn tail_exponents() {
        let g = fit_tail_exponent(&ObservableSamples::new(normals(100_000, 3), "", 3)).unwrap();
        let l = fit_tail_exponent(&ObservableSamples::new(laplace(100_000, 4), "", 4)).unwrap();
        // Over this probability window the Gaussian slope sits near 1.6,
        // below its asymptotic value of 2.
        assert!(g.q_hat > l.q_hat + 0.3, "gaussian {} vs laplace {}", g.q_hat, l.q_hat);
        assert!((0.8..=1.3).contains(&l.q_hat), "{}", l.q_hat);
        assert!(g.r2 > 0.9 && l.r2 > 0.9);
        // Shift invariance through median-centering.
        let v: Vec<f64> = normals(20_000, 5);
        let a = fit_tail_exponent(&ObservableSamples::new(v.clone(), "", 0)).unwrap();
        let b = fit_tail_exponent(&ObservableSamples::new(v.iter().map(|x| x + 0.5).collect(), "", 0)).unwrap();
        assert_relative_eq!(a.q_hat, b.q_hat, max_relative = 1e-6);
    }

    #[test]
    fn jitter_fails_fit() {
        let v: Vec<f64> = (0..20_000).map(|k| if k % 2 == 0 { 1e-9 } else { -1e-9 }).collect();
        assert!(matches!(
            fit_tail_exponent(&ObservableSamples::new(v, "", 0)),
            Err(Error::FitFailure(_))
        ));
    }

    #[test]
    fn single_trial_rate_row_matches_direct() {
        let fam = ModelFamily::TwoGroup { a: 0.2, b: 0.4, epsilon: 0.1 };
        let z = C64::new(-1.0, 0.0);
        let t = frobenius_rate_experiment(&fam, z, &[(20, 10)], 1, 7).unwrap();
        let model = fam.instantiate(10, 20).unwrap();
        let x = sample(&model, derive_seed(derive_seed(7, 0), 0));
        let (q, ok) = empirical_resolvent_real(&x, -1.0, 0.1).unwrap();
        assert!(ok);
        let eq = Evaluator::new(&model).deterministic_equivalent(z, &Default::default()).unwrap();
        let direct = (linalg::to_complex(&q) - eq.tilde_q).norm();
        assert_relative_eq!(t.rows[0].error, direct, max_relative = 1e-12);
        assert!(frobenius_rate_experiment(&fam, z, &[(20, 10), (20, 10)], 1, 7).is_err());
    }

    #[test]
    fn hanson_wright_identity_and_zero() {
        let p = 16;
        let mats = vec![DMatrix::identity(p, p), DMatrix::zeros(p, p)];
        let rows = hanson_wright_experiment(p, &mats, 100_000, 11).unwrap();
        assert!((rows[0].std / (p as f64).sqrt() - 1.0).abs() <= 0.05);
        assert_eq!(rows[1].std, 0.0);

        let mut rank1 = DMatrix::zeros(p, p);
        rank1[(0, 0)] = 1.0;
        let iso = DMatrix::identity(p, p) / (p as f64).sqrt();
        let rows = hanson_wright_experiment(p, &[rank1, iso], 50_000, 12).unwrap();
        let r = rows[0].ratio() / rows[1].ratio();
        assert!((1.0 / 3.0..=3.0).contains(&r));
    }

    #[test]
    fn convex_zero_and_reproducible() {
        let rows = convex_concentration_experiment(&[20], 20, 1, 0.0).unwrap();
        assert_eq!(rows[0].std, 0.0);
        let a = convex_concentration_experiment(&[20], 20, 5, 1.0).unwrap();
        let b = convex_concentration_experiment(&[20], 20, 5, 1.0).unwrap();
        assert_eq!(a, b);
        assert!(a[0].std > 0.0 && !a[0].flagged);
    }
}
