use nalgebra::{DMatrix, DVector};

use super::TargetDensity;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, solve_lower, solve_lower_transpose, SymmetricMatrix};

/// `N(mean, cov)` with the normalizing constant dropped:
/// `log π(x) = −½ (x−m)ᵀ Σ⁻¹ (x−m)`.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
}

pub fn gaussian_target(mean: DVector<f64>, cov: &SymmetricMatrix) -> Result<GaussianTarget> {
    if cov.dim() != mean.len() {
        return Err(Error::DimensionMismatch {
            expected: mean.len(),
            got: cov.dim(),
        });
    }
    let chol = cholesky(cov.matrix())?;
    Ok(GaussianTarget { mean, chol })
}

impl GaussianTarget {
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.chol * self.chol.transpose()
    }

    /// Log of the normalizing constant that was dropped, `−½ log det(2πΣ)`.
    pub fn log_normalizer(&self) -> f64 {
        let d = self.mean.len() as f64;
        -0.5 * d * (2.0 * std::f64::consts::PI).ln()
            - self.chol.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }
}

impl TargetDensity for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        let white = solve_lower(&self.chol, &(x - &self.mean));
        Ok(-0.5 * white.norm_squared())
    }

    fn grad_log_density(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.log_density_and_grad(x)?.1)
    }

    fn log_density_and_grad(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let white = solve_lower(&self.chol, &(x - &self.mean));
        let grad = -solve_lower_transpose(&self.chol, &white);
        Ok((-0.5 * white.norm_squared(), grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn standard_at_origin() {
        let t = gaussian_target(DVector::zeros(2), &SymmetricMatrix::from_diagonal(&[1., 1.]).unwrap()).unwrap();
        let (lp, g) = t.log_density_and_grad(&DVector::zeros(2)).unwrap();
        assert_eq!(lp, 0.0);
        assert_eq!(g, DVector::zeros(2));
    }

    #[test]
    fn shifted_mean_gradient() {
        let t = gaussian_target(
            DVector::from_column_slice(&[1., 0.]),
            &SymmetricMatrix::from_diagonal(&[1., 1.]).unwrap(),
        )
        .unwrap();
        let g = t.grad_log_density(&DVector::zeros(2)).unwrap();
        assert_eq!(g.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn scaled_variance_gradient() {
        let t = gaussian_target(DVector::zeros(1), &SymmetricMatrix::from_diagonal(&[4.]).unwrap()).unwrap();
        let g = t.grad_log_density(&DVector::from_element(1, 2.0)).unwrap();
        assert_abs_diff_eq!(g[0], -0.5, epsilon = 1e-15);
    }

    #[test]
    fn rejects_indefinite_covariance() {
        let cov = SymmetricMatrix::new(DMatrix::from_row_slice(2, 2, &[1., 2., 2., 1.])).unwrap();
        let err = gaussian_target(DVector::zeros(2), &cov).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { .. }));
    }
}
