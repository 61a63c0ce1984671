use nalgebra::{DMatrix, DVector};

use super::TargetDensity;
use crate::error::Result;
use crate::linalg::random_orthogonal;

pub const BANANA_MEAN1: f64 = 0.5;
pub const BANANA_VAR1: f64 = 0.8;
pub const BANANA_VAR2: f64 = 0.2;

/// Rotated banana `Q♯π` where `X₁ ∼ N(0.5, 0.8)` and `X₂ | X₁ ∼ N(X₁², 0.2)`
/// (second arguments are variances). The density is fully normalized.
#[derive(Debug, Clone)]
pub struct BananaTarget {
    rotation: DMatrix<f64>,
}

/// Banana rotated by `random_orthogonal(2, seed)`, or unrotated for `None`.
pub fn banana_target(rotation_seed: Option<u64>) -> BananaTarget {
    let rotation = match rotation_seed {
        Some(seed) => random_orthogonal(2, seed),
        None => DMatrix::identity(2, 2),
    };
    BananaTarget { rotation }
}

impl BananaTarget {
    pub fn with_rotation(rotation: DMatrix<f64>) -> Self {
        BananaTarget { rotation }
    }

    pub fn rotation(&self) -> &DMatrix<f64> {
        &self.rotation
    }
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * (x - mean).powi(2) / var
}

impl TargetDensity for BananaTarget {
    fn dim(&self) -> usize {
        2
    }

    fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.log_density_and_grad(x)?.0)
    }

    fn grad_log_density(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.log_density_and_grad(x)?.1)
    }

    fn log_density_and_grad(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let xt = self.rotation.transpose() * x;
        let (a, b) = (xt[0], xt[1]);
        let resid = b - a * a;
        let lp = log_normal(a, BANANA_MEAN1, BANANA_VAR1) + log_normal(b, a * a, BANANA_VAR2);
        let ga = -(a - BANANA_MEAN1) / BANANA_VAR1 + 2.0 * a * resid / BANANA_VAR2;
        let gb = -resid / BANANA_VAR2;
        let grad = &self.rotation * DVector::from_column_slice(&[ga, gb]);
        Ok((lp, grad))
    }
}
