//! Dense helpers shared by the numerical modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub type C64 = nalgebra::Complex<f64>;
pub type CMatrix = DMatrix<C64>;

/// Condition estimates above this are treated as singular.
pub const MAX_CONDITION: f64 = 1e14;

/// `X Xᵀ / n` for a p×n matrix.
pub fn gram_over_n(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.ncols().max(1) as f64;
    let mut g = x * x.transpose();
    g /= n;
    symmetrize(&mut g);
    g
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let p = m.nrows();
    for i in 0..p {
        for j in (i + 1)..p {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Largest eigenvalue of a symmetric matrix.
pub fn top_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone()
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Spectral norm of a symmetric matrix (largest absolute eigenvalue).
pub fn sym_spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone()
        .symmetric_eigenvalues()
        .iter()
        .fold(0.0_f64, |a, v| a.max(v.abs()))
}

/// Largest entrywise asymmetry `|m_ij - m_ji|`.
pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn is_diagonal(m: &DMatrix<f64>) -> bool {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if i != j && m[(i, j)] != 0.0 {
                return false;
            }
        }
    }
    true
}

/// Symmetric square root of a PSD matrix via eigendecomposition.
///
/// Eigenvalues in `[-1e-10·tr/p, 0)` are clamped to zero; anything more
/// negative is reported as indefinite. Returns the root and the eigenvalues.
pub fn psd_sqrt(m: &DMatrix<f64>) -> std::result::Result<(DMatrix<f64>, DVector<f64>), String> {
    let p = m.nrows();
    if p == 0 {
        return Ok((DMatrix::zeros(0, 0), DVector::zeros(0)));
    }
    let trace = m.trace();
    let floor = -1e-10 * trace.abs().max(f64::MIN_POSITIVE) / p as f64;
    let eig = m.clone().symmetric_eigen();
    let mut roots = DVector::zeros(p);
    for (k, &v) in eig.eigenvalues.iter().enumerate() {
        if v < floor {
            return Err(format!("indefinite: eigenvalue {v:e} below floor {floor:e}"));
        }
        roots[k] = v.max(0.0).sqrt();
    }
    let u = &eig.eigenvectors;
    let scaled = u * DMatrix::from_diagonal(&roots);
    let mut root = scaled * u.transpose();
    symmetrize(&mut root);
    Ok((root, eig.eigenvalues))
}

/// One-norm (max absolute column sum) of a complex matrix.
pub fn norm1_c(m: &CMatrix) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| v.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn norm1(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Inverse of a complex matrix by LU, with a one-norm condition estimate.
pub fn inverse_c(m: &CMatrix) -> Result<CMatrix> {
    let inv = m
        .clone()
        .lu()
        .try_inverse()
        .ok_or(Error::Singular { condition: f64::INFINITY })?;
    let cond = norm1_c(m) * norm1_c(&inv);
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::Singular { condition: cond });
    }
    Ok(inv)
}

/// Inverse of a real matrix by LU, with a one-norm condition estimate.
pub fn inverse_r(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let inv = m
        .clone()
        .lu()
        .try_inverse()
        .ok_or(Error::Singular { condition: f64::INFINITY })?;
    let cond = norm1(m) * norm1(&inv);
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::Singular { condition: cond });
    }
    Ok(inv)
}

/// Cholesky factor of a symmetric matrix, `None` when it is not positive definite.
pub fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone())
}

/// `(zI − M)⁻¹` for real `z` strictly above or below the spectrum of the
/// symmetric matrix `M`, through a Cholesky factorization.
pub fn real_resolvent(m: &DMatrix<f64>, z: f64) -> Result<DMatrix<f64>> {
    let p = m.nrows();
    // zI − M is negative definite when z lies left of the spectrum.
    let (shifted, sign) = if z <= 0.0 || top_eigenvalue_hint(m) < z {
        let mut a = m.clone();
        let left = z <= 0.0;
        for i in 0..p {
            if left {
                a[(i, i)] -= z;
            } else {
                a[(i, i)] = z - a[(i, i)];
            }
        }
        if left {
            (a, -1.0)
        } else {
            let mut b = -m.clone();
            for i in 0..p {
                b[(i, i)] += z;
            }
            (b, 1.0)
        }
    } else {
        let mut a = -m.clone();
        for i in 0..p {
            a[(i, i)] += z;
        }
        return inverse_r(&a);
    };
    match Cholesky::new(shifted.clone()) {
        Some(ch) => {
            let mut inv = ch.inverse();
            inv *= sign;
            symmetrize(&mut inv);
            Ok(inv)
        }
        None => {
            let mut a = -m.clone();
            for i in 0..p {
                a[(i, i)] += z;
            }
            inverse_r(&a)
        }
    }
}

/// Cheap upper bound on the top eigenvalue (Gershgorin).
fn top_eigenvalue_hint(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows())
        .map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn to_complex(m: &DMatrix<f64>) -> CMatrix {
    m.map(|v| C64::new(v, 0.0))
}

pub fn to_complex_vec(v: &DVector<f64>) -> CMatrix {
    CMatrix::from_iterator(v.len(), 1, v.iter().map(|x| C64::new(*x, 0.0)))
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Entrywise compensated accumulation of equally shaped complex matrices.
pub struct MatrixAccumulator {
    re: Vec<CompensatedSum>,
    im: Vec<CompensatedSum>,
    rows: usize,
    cols: usize,
}

impl MatrixAccumulator {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            re: vec![CompensatedSum::default(); rows * cols],
            im: vec![CompensatedSum::default(); rows * cols],
            rows,
            cols,
        }
    }

    pub fn add(&mut self, m: &CMatrix) {
        for (k, v) in m.iter().enumerate() {
            self.re[k].add(v.re);
            self.im[k].add(v.im);
        }
    }

    pub fn add_real(&mut self, m: &DMatrix<f64>) {
        for (k, v) in m.iter().enumerate() {
            self.re[k].add(*v);
        }
    }

    pub fn mean(&self, count: usize) -> CMatrix {
        let c = count.max(1) as f64;
        CMatrix::from_iterator(
            self.rows,
            self.cols,
            self.re
                .iter()
                .zip(&self.im)
                .map(|(r, i)| C64::new(r.value() / c, i.value() / c)),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn psd_sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let (r, _) = psd_sqrt(&m).unwrap();
        assert_relative_eq!(&r * &r, m, epsilon = 1e-12);
    }

    #[test]
    fn psd_sqrt_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(psd_sqrt(&m).is_err());
    }

    #[test]
    fn real_resolvent_matches_lu() {
        let m = DMatrix::from_row_slice(3, 3, &[0.3, 0.1, 0.0, 0.1, 0.2, 0.05, 0.0, 0.05, 0.4]);
        for z in [-1.0, -0.01, 2.0] {
            let mut a = -m.clone();
            for i in 0..3 {
                a[(i, i)] += z;
            }
            let lu = a.lu().try_inverse().unwrap();
            assert_relative_eq!(real_resolvent(&m, z).unwrap(), lu, epsilon = 1e-12);
        }
    }

    #[test]
    fn compensated_sum_is_exact_on_cancellation() {
        let mut s = CompensatedSum::default();
        for v in [1e16, 1.0, -1e16, 1.0] {
            s.add(v);
        }
        assert_eq!(s.value(), 2.0);
    }
}
