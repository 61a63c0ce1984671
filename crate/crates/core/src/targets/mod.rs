//! Target densities known up to a normalizing constant.
//!
//! Targets that come from a Bayesian model with a Gaussian prior are exposed
//! in whitened coordinates, so the prior is exactly the reference `N(0, I)`.
//! Each such target knows how to map whitened points back to physical
//! parameters.

mod banana;
mod beam;
mod gaussian;
mod log_cox;

use std::sync::Arc;

use nalgebra::DVector;

use crate::error::Result;

pub use banana::{banana_target, BananaTarget, BANANA_MEAN1, BANANA_VAR1, BANANA_VAR2};
pub use beam::{
    beam_solve, simulate_beam_data, BeamData, BeamGeometry, BeamTarget, DEFAULT_N_ELEMENTS,
    NUM_SENSORS, NUM_SEGMENTS, PAPER_E_TRUE_GPA,
};
pub use gaussian::{gaussian_target, GaussianTarget};
pub use log_cox::{
    log_cox_target, simulate_log_cox_data, LogCoxData, LogCoxParams, LogCoxTarget,
};

/// An unnormalized log-density on `R^d` together with its gradient.
///
/// Implementations are immutable and may be evaluated concurrently.
pub trait TargetDensity: Send + Sync {
    fn dim(&self) -> usize;

    fn log_density(&self, x: &DVector<f64>) -> Result<f64>;

    fn grad_log_density(&self, x: &DVector<f64>) -> Result<DVector<f64>>;

    fn log_density_and_grad(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        Ok((self.log_density(x)?, self.grad_log_density(x)?))
    }
}

impl<T: TargetDensity + ?Sized> TargetDensity for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        (**self).log_density(x)
    }
    fn grad_log_density(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).grad_log_density(x)
    }
    fn log_density_and_grad(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        (**self).log_density_and_grad(x)
    }
}

impl<T: TargetDensity + ?Sized> TargetDensity for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        (**self).log_density(x)
    }
    fn grad_log_density(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).grad_log_density(x)
    }
    fn log_density_and_grad(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        (**self).log_density_and_grad(x)
    }
}

impl<T: TargetDensity + ?Sized> TargetDensity for Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        (**self).log_density(x)
    }
    fn grad_log_density(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).grad_log_density(x)
    }
    fn log_density_and_grad(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        (**self).log_density_and_grad(x)
    }
}

/// The reference `N(0, I_d)` itself, normalized.
#[derive(Debug, Clone, Copy)]
pub struct StandardNormal {
    pub dim: usize,
}

impl TargetDensity for StandardNormal {
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(crate::log_reference(x))
    }
    fn grad_log_density(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(-x)
    }
}
