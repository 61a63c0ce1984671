//! Quadrature rules for expectations under the standard Gaussian reference,
//! plus the Gauss–Legendre rule used inside monotone map components.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sym_eigh, SymmetricMatrix};
use crate::seed::rng_from_seed;

pub const DEFAULT_NODE_CAP: usize = 1_000_000;

/// Weighted point set approximating `∫ f dρ`. Weights are positive and sum
/// to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadrature {
    pub nodes: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
}

impl Quadrature {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.nodes.first().map_or(0, |n| n.len())
    }

    /// `Σ_i w_i f(x_i)`.
    pub fn integrate<F: Fn(&DVector<f64>) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(x))
            .sum()
    }
}

/// Quadrature kind as it appears in run configurations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum QuadratureKind {
    GaussHermite { nodes_per_dim: usize },
    MonteCarlo { m: usize },
}

impl QuadratureKind {
    pub fn build(&self, d: usize, seed: u64) -> Result<Quadrature> {
        match *self {
            QuadratureKind::GaussHermite { nodes_per_dim } => gauss_hermite_tensor(nodes_per_dim, d),
            QuadratureKind::MonteCarlo { m } => Ok(monte_carlo(m, d, seed)),
        }
    }
}

/// Golub–Welsch: nodes are the eigenvalues of the symmetric Jacobi matrix,
/// weights the squared first eigenvector components (the weight measure has
/// unit mass).
fn golub_welsch(n: usize, offdiag: impl Fn(usize) -> f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut j = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = offdiag(k);
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let eig = sym_eigh(&SymmetricMatrix::new(j)?)?;
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.values[i], eig.vectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    Ok(pairs.into_iter().map(|(x, w)| (x, w / total)).unzip())
}

/// One-dimensional Gauss–Hermite rule for the probabilists' weight
/// `e^{−x²/2}/√(2π)`, nodes ascending.
pub fn gauss_hermite_1d(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::InvalidInput("nodes_per_dim must be at least 1".into()));
    }
    // three-term recurrence of He_k: off-diagonal √k
    golub_welsch(n, |k| (k as f64).sqrt())
}

/// Tensorized Gauss–Hermite rule with `nodes_per_dim^d` nodes. The first
/// coordinate varies slowest.
pub fn gauss_hermite_tensor(nodes_per_dim: usize, d: usize) -> Result<Quadrature> {
    gauss_hermite_tensor_with_cap(nodes_per_dim, d, DEFAULT_NODE_CAP)
}

pub fn gauss_hermite_tensor_with_cap(nodes_per_dim: usize, d: usize, cap: usize) -> Result<Quadrature> {
    if d == 0 {
        return Err(Error::InvalidInput("dimension must be at least 1".into()));
    }
    let requested = (nodes_per_dim as f64).powi(d as i32);
    if requested > cap as f64 {
        return Err(Error::QuadratureTooLarge { requested, cap });
    }
    let (x1, w1) = gauss_hermite_1d(nodes_per_dim)?;
    let total = requested as usize;
    let mut nodes = Vec::with_capacity(total);
    let mut weights = Vec::with_capacity(total);
    let mut idx = vec![0usize; d];
    for _ in 0..total {
        nodes.push(DVector::from_iterator(d, idx.iter().map(|&k| x1[k])));
        weights.push(idx.iter().map(|&k| w1[k]).product());
        for pos in (0..d).rev() {
            idx[pos] += 1;
            if idx[pos] < nodes_per_dim {
                break;
            }
            idx[pos] = 0;
        }
    }
    Ok(Quadrature { nodes, weights })
}

/// `m` i.i.d. standard-normal nodes from a ChaCha8 stream seeded with `seed`,
/// with uniform weights `1/m`.
pub fn monte_carlo(m: usize, d: usize, seed: u64) -> Quadrature {
    let mut rng = rng_from_seed(seed);
    let nodes = (0..m)
        .map(|_| DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(&mut rng))))
        .collect();
    Quadrature {
        nodes,
        weights: vec![1.0 / m as f64; m],
    }
}

/// Gauss–Legendre rule on `[0, 1]`, nodes ascending, weights summing to one.
pub fn gauss_legendre_unit(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::InvalidInput("need at least one Gauss–Legendre node".into()));
    }
    let (x, w) = golub_welsch(n, |k| {
        let k = k as f64;
        k / (4.0 * k * k - 1.0).sqrt()
    })?;
    Ok((x.into_iter().map(|t| 0.5 * (t + 1.0)).collect(), w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hermite_one_node() {
        let q = gauss_hermite_tensor(1, 1).unwrap();
        assert_eq!(q.len(), 1);
        assert_abs_diff_eq!(q.nodes[0][0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(q.weights[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn hermite_two_nodes() {
        let (x, w) = gauss_hermite_1d(2).unwrap();
        assert_abs_diff_eq!(x[0], -1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(x[1], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(w[0], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(w[1], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn hermite_banana_grid() {
        let q = gauss_hermite_tensor(11, 2).unwrap();
        assert_eq!(q.len(), 121);
        assert_abs_diff_eq!(q.integrate(|x| x[0] * x[0]), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(q.weights.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn hermite_moments() {
        for n in 3..=12 {
            let q = gauss_hermite_tensor(n, 2).unwrap();
            for j in 0..2 {
                assert_abs_diff_eq!(q.integrate(|x| x[j].powi(2)), 1.0, epsilon = 1e-10);
                assert_abs_diff_eq!(q.integrate(|x| x[j].powi(4)), 3.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn hermite_exactness_degree() {
        // E[x^{2k}] = (2k−1)!!, exact up to degree 2n−1 per dimension
        let n = 6;
        let q = gauss_hermite_tensor(n, 2).unwrap();
        let double_fact = |k: i32| (1..=k).map(|i| (2 * i - 1) as f64).product::<f64>();
        for a in 0..(2 * n) as i32 {
            for b in 0..(2 * n) as i32 {
                let exact = if a % 2 == 0 && b % 2 == 0 {
                    double_fact(a / 2) * double_fact(b / 2)
                } else {
                    0.0
                };
                let est = q.integrate(|x| x[0].powi(a) * x[1].powi(b));
                // rounding scales with E[x^2a] E[x^2b]
                let size = (double_fact(a) * double_fact(b)).sqrt();
                assert!((est - exact).abs() <= 1e-12 * size, "{a} {b} {est} {exact}");
            }
        }
    }

    #[test]
    fn hermite_cap() {
        let err = gauss_hermite_tensor_with_cap(10, 7, 1_000_000);
        assert!(matches!(err, Err(Error::QuadratureTooLarge { .. })));
        assert!(gauss_hermite_tensor_with_cap(10, 6, 1_000_000).is_ok());
    }

    #[test]
    fn monte_carlo_structure() {
        let q = monte_carlo(3, 2, 1);
        assert_eq!(q.len(), 3);
        assert_eq!(q.dim(), 2);
        assert!(q.weights.iter().all(|&w| w == 1.0 / 3.0));
        assert_eq!(q, monte_carlo(3, 2, 1));
        assert_ne!(q, monte_carlo(3, 2, 2));
    }

    #[test]
    fn monte_carlo_mean() {
        let m = 10_000;
        let q = monte_carlo(m, 1, 5);
        let mean = q.integrate(|x| x[0]);
        assert!(mean.abs() < 4.0 / (m as f64).sqrt());
    }

    #[test]
    fn legendre_rules() {
        let (x, w) = gauss_legendre_unit(1).unwrap();
        assert_abs_diff_eq!(x[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(w[0], 1.0, epsilon = 1e-15);

        let (x, w) = gauss_legendre_unit(2).unwrap();
        let off = 0.5 / 3f64.sqrt();
        assert_abs_diff_eq!(x[0], 0.5 - off, epsilon = 1e-14);
        assert_abs_diff_eq!(x[1], 0.5 + off, epsilon = 1e-14);
        assert_abs_diff_eq!(w[0], 0.5, epsilon = 1e-14);
        let cube: f64 = x.iter().zip(&w).map(|(t, w)| w * t.powi(3)).sum();
        assert_abs_diff_eq!(cube, 0.25, epsilon = 1e-14);
    }

    #[test]
    fn legendre_exactness() {
        let n = 16;
        let (x, w) = gauss_legendre_unit(n).unwrap();
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
        for k in 0..(2 * n as i32) {
            let est: f64 = x.iter().zip(&w).map(|(t, w)| w * t.powi(k)).sum();
            assert_abs_diff_eq!(est, 1.0 / (k + 1) as f64, epsilon = 1e-13);
        }
    }
}
