//! Gauss–Hermite rules for expectations under a standard normal.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Nodes and weights with `Σ w_k g(x_k) ≈ E[g(ξ)]`, `ξ ~ N(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

/// Orthonormal probabilists' Hermite values `(h_{n−1}(x), h_n(x))`.
fn hermite_pair(n: usize, x: f64) -> (f64, f64) {
    let mut prev = 0.0;
    let mut cur = 1.0;
    for k in 0..n {
        let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    (prev, cur)
}

impl GaussHermite {
    /// `n`-point rule, exact for polynomials of degree `≤ 2n − 1`.
    ///
    /// Starting points come from the Jacobi matrix eigenvalues; each node is
    /// then polished by Newton on `h_n`, and weights use
    /// `w = 1/(n·h_{n−1}(x)²)`.
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 nodes, got {n}")));
        }
        let jacobi = DMatrix::from_fn(n, n, |i, j| {
            if i + 1 == j || j + 1 == i {
                (i.max(j) as f64).sqrt()
            } else {
                0.0
            }
        });
        let mut guesses: Vec<f64> = jacobi.symmetric_eigenvalues().iter().cloned().collect();
        guesses.sort_by(|a, b| a.total_cmp(b));

        let nf = n as f64;
        let mut nodes = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for &x0 in &guesses {
            let mut x = x0;
            for _ in 0..100 {
                let (hm1, h) = hermite_pair(n, x);
                let step = h / (nf.sqrt() * hm1);
                x -= step;
                if step.abs() <= 1e-15 * x.abs().max(1.0) {
                    break;
                }
            }
            let (hm1, _) = hermite_pair(n, x);
            nodes.push(x);
            weights.push(1.0 / (nf * hm1 * hm1));
        }
        // Enforce the exact symmetry of the rule.
        for k in 0..n / 2 {
            let j = n - 1 - k;
            let x = 0.5 * (nodes[j] - nodes[k]);
            let w = 0.5 * (weights[j] + weights[k]);
            nodes[k] = -x;
            nodes[j] = x;
            weights[k] = w;
            weights[j] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        Ok(Self { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `E[g(mu + √var·ξ)]`. A zero variance evaluates `g(mu)`.
    pub fn expect<G: FnMut(f64) -> f64>(&self, mut g: G, mu: f64, var: f64) -> f64 {
        if var == 0.0 {
            return g(mu);
        }
        let s = var.sqrt();
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * g(mu + s * x);
        }
        acc
    }
}

/// Gauss–Hermite estimate of `E[g(mu + √var·ξ)]`, `ξ ~ N(0, 1)`.
pub fn gauss_expect<G: FnMut(f64) -> f64>(g: G, mu: f64, var: f64, nodes: usize) -> Result<f64> {
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::InvalidArgument(format!("variance must be positive, got {var}")));
    }
    if !mu.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite mean {mu}")));
    }
    Ok(GaussHermite::new(nodes)?.expect(g, mu, var))
}

/// `E[ξ^k]` for a standard normal: `(k − 1)!!` for even `k`, 0 for odd.
pub fn normal_moment(k: u32) -> f64 {
    if k % 2 == 1 {
        return 0.0;
    }
    (1..k).step_by(2).map(|v| v as f64).product()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn monomials_are_exact() {
        for n in [2usize, 3, 5, 8, 16, 33, 64] {
            let rule = GaussHermite::new(n).unwrap();
            for k in 0..(2 * n as u32) {
                let got = rule.expect(|x| x.powi(k as i32), 0.0, 1.0);
                let want = normal_moment(k);
                if k % 2 == 1 {
                    assert!(got.abs() <= 1e-12 * normal_moment(k + 1).max(1.0), "n={n} k={k} {got}");
                } else {
                    assert_relative_eq!(got, want, max_relative = 1e-12);
                }
            }
        }
    }

    #[test]
    fn examples() {
        assert_relative_eq!(gauss_expect(|z| z * z, 0.0, 1.0, 64).unwrap(), 1.0, epsilon = 1e-13);
        assert_relative_eq!(gauss_expect(f64::exp, 0.0, 1.0, 64).unwrap(), 1.6487212707001282, epsilon = 1e-12);
        for var in [0.1, 1.0, 25.0] {
            let v = gauss_expect(|z| 1.0 / (1.0 + z.exp()), 0.0, var, 64).unwrap();
            assert!((v - 0.5).abs() <= 1e-12);
        }
        assert!(gauss_expect(|z| z, 0.0, 0.0, 8).is_err());
        assert!(gauss_expect(|z| z, 0.0, 1.0, 1).is_err());
    }

    #[test]
    fn shifted_scaled_moments() {
        // E[(mu + s ξ)^3] = mu^3 + 3 mu s^2
        let (mu, var) = (0.7, 2.5);
        let got = gauss_expect(|z| z.powi(3), mu, var, 4).unwrap();
        assert_relative_eq!(got, mu.powi(3) + 3.0 * mu * var, epsilon = 1e-12);
    }
}
