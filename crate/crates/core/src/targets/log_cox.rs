use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::TargetDensity;
use crate::error::{Error, Result};
use crate::linalg::cholesky;
use crate::seed::rng_from_seed;

/// Hyperparameters of the latent Gaussian field on a `grid_n × grid_n` grid
/// over the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogCoxParams {
    pub grid_n: usize,
    pub beta: f64,
    pub sigma2: f64,
    pub mu: f64,
}

impl LogCoxParams {
    /// `β = 1/33`, `σ² = 1.91`, `μ = log(126) − σ²/2` on the given grid.
    pub fn reference_values(grid_n: usize) -> Self {
        let sigma2 = 1.91;
        LogCoxParams {
            grid_n,
            beta: 1.0 / 33.0,
            sigma2,
            mu: 126f64.ln() - sigma2 / 2.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.grid_n * self.grid_n
    }

    fn validate(&self) -> Result<()> {
        if self.grid_n == 0 {
            return Err(Error::InvalidInput("grid_n must be positive".into()));
        }
        if !(self.beta > 0.0) || !(self.sigma2 >= 0.0) || !self.mu.is_finite() {
            return Err(Error::InvalidInput(format!("invalid log-Cox parameters {self:?}")));
        }
        Ok(())
    }

    /// Center of cell `i` (row-major: `i = row·grid_n + col`).
    pub fn cell_center(&self, i: usize) -> (f64, f64) {
        let n = self.grid_n as f64;
        let (row, col) = (i / self.grid_n, i % self.grid_n);
        ((col as f64 + 0.5) / n, (row as f64 + 0.5) / n)
    }

    /// Correlation matrix `K_ij = exp(−‖s_i − s_j‖₂ / (64β))`.
    pub fn kernel(&self) -> DMatrix<f64> {
        let d = self.dim();
        let centers: Vec<(f64, f64)> = (0..d).map(|i| self.cell_center(i)).collect();
        let scale = 64.0 * self.beta;
        DMatrix::from_fn(d, d, |i, j| {
            let (dx, dy) = (centers[i].0 - centers[j].0, centers[i].1 - centers[j].1);
            (-(dx * dx + dy * dy).sqrt() / scale).exp()
        })
    }

    /// Cholesky factor of the prior covariance `σ²K`, computed as `σ·chol(K)`.
    pub fn prior_cholesky(&self) -> Result<DMatrix<f64>> {
        self.validate()?;
        Ok(cholesky(&self.kernel())? * self.sigma2.sqrt())
    }
}

/// Observations of a simulated (or loaded) log-Gaussian Cox data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogCoxData {
    pub schema_version: u32,
    pub params: LogCoxParams,
    pub seed: Option<u64>,
    pub obs_cells: Vec<usize>,
    pub counts: Vec<u64>,
    /// True intensity `Λ* = exp(Z*)`, when known.
    #[serde(default)]
    pub intensity: Option<Vec<f64>>,
}

/// Posterior of the latent field in whitened coordinates `z`, with
/// `Z = μ + L z` and `L = chol(σ²K)`.
#[derive(Debug, Clone)]
pub struct LogCoxTarget {
    params: LogCoxParams,
    obs_cells: Vec<usize>,
    counts: Vec<f64>,
    chol_prior: DMatrix<f64>,
    /// rows of `chol_prior` at the observed cells
    chol_obs: DMatrix<f64>,
}

pub fn log_cox_target(params: LogCoxParams, obs_cells: &[usize], counts: &[u64]) -> Result<LogCoxTarget> {
    params.validate()?;
    if obs_cells.len() != counts.len() {
        return Err(Error::InvalidInput(format!(
            "{} observed cells but {} counts",
            obs_cells.len(),
            counts.len()
        )));
    }
    let d = params.dim();
    let mut seen = vec![false; d];
    for &c in obs_cells {
        if c >= d || std::mem::replace(&mut seen[c], true) {
            return Err(Error::InvalidInput(format!("observed cell {c} out of range or repeated")));
        }
    }
    let chol_prior = params.prior_cholesky()?;
    let chol_obs = chol_prior.select_rows(obs_cells);
    Ok(LogCoxTarget {
        params,
        obs_cells: obs_cells.to_vec(),
        counts: counts.iter().map(|&c| c as f64).collect(),
        chol_prior,
        chol_obs,
    })
}

impl LogCoxTarget {
    pub fn from_data(data: &LogCoxData) -> Result<Self> {
        log_cox_target(data.params, &data.obs_cells, &data.counts)
    }

    pub fn params(&self) -> &LogCoxParams {
        &self.params
    }

    pub fn obs_cells(&self) -> &[usize] {
        &self.obs_cells
    }

    /// `Z = μ + L z`.
    pub fn latent_field(&self, z: &DVector<f64>) -> DVector<f64> {
        (&self.chol_prior * z).add_scalar(self.params.mu)
    }

    /// `Λ = exp(Z)`.
    pub fn intensity(&self, z: &DVector<f64>) -> DVector<f64> {
        self.latent_field(z).map(f64::exp)
    }
}

impl TargetDensity for LogCoxTarget {
    fn dim(&self) -> usize {
        self.params.dim()
    }

    fn log_density(&self, z: &DVector<f64>) -> Result<f64> {
        let d = self.params.dim() as f64;
        let zobs = (&self.chol_obs * z).add_scalar(self.params.mu);
        let lik: f64 = zobs
            .iter()
            .zip(&self.counts)
            .map(|(&zk, &y)| y * (zk - d.ln()) - zk.exp() / d)
            .sum();
        Ok(lik - 0.5 * z.norm_squared())
    }

    fn grad_log_density(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.log_density_and_grad(z)?.1)
    }

    fn log_density_and_grad(&self, z: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let d = self.params.dim() as f64;
        let zobs = (&self.chol_obs * z).add_scalar(self.params.mu);
        let mut lik = 0.0;
        let mut dz = DVector::zeros(zobs.len());
        for (k, (&zk, &y)) in zobs.iter().zip(&self.counts).enumerate() {
            let rate = zk.exp() / d;
            lik += y * (zk - d.ln()) - rate;
            dz[k] = y - rate;
        }
        let grad = self.chol_obs.tr_mul(&dz) - z;
        Ok((lik - 0.5 * z.norm_squared(), grad))
    }
}

/// Draws `Z* = μ + Lξ`, picks `n_obs` distinct cells uniformly and samples
/// `Poisson(exp(Z*_k)/d)` counts there.
pub fn simulate_log_cox_data(params: LogCoxParams, n_obs: usize, seed: u64) -> Result<LogCoxData> {
    params.validate()?;
    let d = params.dim();
    if n_obs > d {
        return Err(Error::InvalidInput(format!("n_obs = {n_obs} exceeds grid size {d}")));
    }
    let mut rng = rng_from_seed(seed);
    let xi = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(&mut rng)));
    let latent = if params.sigma2 == 0.0 {
        DVector::from_element(d, params.mu)
    } else {
        (params.prior_cholesky()? * xi).add_scalar(params.mu)
    };
    let mut obs_cells = sample(&mut rng, d, n_obs).into_vec();
    obs_cells.sort_unstable();
    let mut counts = Vec::with_capacity(n_obs);
    for &c in &obs_cells {
        let rate = latent[c].exp() / d as f64;
        let draw: f64 = Poisson::new(rate)
            .map_err(|e| Error::InvalidInput(format!("Poisson rate {rate}: {e}")))?
            .sample(&mut rng);
        counts.push(draw as u64);
    }
    Ok(LogCoxData {
        schema_version: 1,
        params,
        seed: Some(seed),
        obs_cells,
        counts,
        intensity: Some(latent.iter().map(|v| v.exp()).collect()),
    })
}
