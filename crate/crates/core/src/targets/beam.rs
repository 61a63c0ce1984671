use nalgebra::DVector;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::TargetDensity;
use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

pub const NUM_SEGMENTS: usize = 5;
pub const NUM_SENSORS: usize = 20;
pub const DEFAULT_N_ELEMENTS: usize = 200;
pub const PAPER_E_TRUE_GPA: [f64; NUM_SEGMENTS] = [190.0, 213.0, 195.0, 208.0, 200.0];

const PRIOR_MEAN_GPA: f64 = 200.0;
const PRIOR_STD_GPA: f64 = 5.0;
const GRAVITY: f64 = 9.81;

/// Cantilever geometry and material constants, SI units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamGeometry {
    pub length_m: f64,
    pub width_m: f64,
    pub thickness_m: f64,
    pub poisson_ratio: f64,
    pub shear_coefficient: f64,
    pub tip_load_n: f64,
    pub noise_variance_m2: f64,
}

impl Default for BeamGeometry {
    fn default() -> Self {
        BeamGeometry {
            length_m: 10.0,
            width_m: 0.1,
            thickness_m: 0.3,
            poisson_ratio: 0.28,
            shear_coefficient: 5.0 / 6.0,
            tip_load_n: 5.0 * GRAVITY,
            noise_variance_m2: 1e-6,
        }
    }
}

impl BeamGeometry {
    pub fn area(&self) -> f64 {
        self.width_m * self.thickness_m
    }

    pub fn inertia(&self) -> f64 {
        self.width_m * self.thickness_m.powi(3) / 12.0
    }

    /// Sensors at `0.5·i` m, `i = 1..=20`.
    pub fn sensor_locations(&self) -> Vec<f64> {
        (1..=NUM_SENSORS).map(|i| 0.5 * i as f64).collect()
    }

    /// Tip deflection of a homogeneous cantilever,
    /// `P l³/(3EI) + P l/(κ A G)` with `G = E/(2(1+ν))`.
    pub fn homogeneous_tip_deflection(&self, e_gpa: f64) -> f64 {
        let e = e_gpa * 1e9;
        let g = e / (2.0 * (1.0 + self.poisson_ratio));
        let p = self.tip_load_n;
        let l = self.length_m;
        p * l.powi(3) / (3.0 * e * self.inertia()) + p * l / (self.shear_coefficient * self.area() * g)
    }
}

/// Symmetric positive-definite band matrix, lower band stored row by row.
struct BandMatrix {
    n: usize,
    bw: usize,
    // band[i][k] = A[i][i - bw + k], k = 0..=bw
    band: Vec<f64>,
}

impl BandMatrix {
    fn new(n: usize, bw: usize) -> Self {
        BandMatrix { n, bw, band: vec![0.0; n * (bw + 1)] }
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        debug_assert!(i - j <= self.bw);
        self.band[i * (self.bw + 1) + self.bw + j - i] += v;
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.band[i * (self.bw + 1) + self.bw + j - i]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.band[i * (self.bw + 1) + self.bw + j - i] = v;
    }

    /// In-place banded Cholesky factorization.
    fn factor(mut self) -> Result<Self> {
        let (n, bw) = (self.n, self.bw);
        for j in 0..n {
            let lo = j.saturating_sub(bw);
            let mut diag = self.get(j, j);
            for k in lo..j {
                diag -= self.get(j, k).powi(2);
            }
            if !(diag > 0.0) {
                return Err(Error::SolverFailure(format!("non-positive pivot {diag:e} at dof {j}")));
            }
            let ljj = diag.sqrt();
            self.set(j, j, ljj);
            for i in (j + 1)..(j + bw + 1).min(n) {
                let lo_i = i.saturating_sub(bw).max(lo);
                let mut acc = self.get(i, j);
                for k in lo_i..j {
                    acc -= self.get(i, k) * self.get(j, k);
                }
                self.set(i, j, acc / ljj);
            }
        }
        Ok(self)
    }

    /// Forward/back substitution with a factored matrix.
    fn solve_factored(&self, rhs: &mut [f64]) {
        let (n, bw) = (self.n, self.bw);
        for i in 0..n {
            let mut acc = rhs[i];
            for k in i.saturating_sub(bw)..i {
                acc -= self.get(i, k) * rhs[k];
            }
            rhs[i] = acc / self.get(i, i);
        }
        for i in (0..n).rev() {
            let mut acc = rhs[i];
            for k in (i + 1)..(i + bw + 1).min(n) {
                acc -= self.get(k, i) * rhs[k];
            }
            rhs[i] = acc / self.get(i, i);
        }
    }
}

/// Element stiffness for dofs `(w1, φ1, w2, φ2)` with Young's modulus `e` in
/// pascals. Shear strain `w' − φ` is sampled at the midpoint.
fn element_matrix(e: f64, le: f64, geometry: &BeamGeometry) -> [[f64; 4]; 4] {
    let g = e / (2.0 * (1.0 + geometry.poisson_ratio));
    let bend = e * geometry.inertia() / le;
    let shear = geometry.shear_coefficient * g * geometry.area() * le;
    let b = [-1.0 / le, -0.5, 1.0 / le, -0.5];
    let mut ke = [[0.0; 4]; 4];
    for (i, row) in ke.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = shear * b[i] * b[j];
        }
    }
    ke[1][1] += bend;
    ke[3][3] += bend;
    ke[1][3] -= bend;
    ke[3][1] -= bend;
    ke
}

/// Global dofs of element `el`; the clamped node 0 has none.
fn element_dofs(el: usize) -> [Option<usize>; 4] {
    std::array::from_fn(|local| {
        let node = el + local / 2;
        (node > 0).then(|| 2 * (node - 1) + local % 2)
    })
}

fn segment_of(el: usize, n_elements: usize) -> usize {
    let x_mid = (el as f64 + 0.5) / n_elements as f64;
    ((x_mid * NUM_SEGMENTS as f64) as usize).min(NUM_SEGMENTS - 1)
}

fn check_inputs(e_gpa: &[f64], n_elements: usize) -> Result<()> {
    if e_gpa.len() != NUM_SEGMENTS {
        return Err(Error::DimensionMismatch { expected: NUM_SEGMENTS, got: e_gpa.len() });
    }
    if n_elements == 0 {
        return Err(Error::InvalidInput("n_elements must be positive".into()));
    }
    if e_gpa.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
        return Err(Error::SolverFailure(format!("Young's moduli must be positive, got {e_gpa:?}")));
    }
    Ok(())
}

/// Factored stiffness matrix and the dof vector of the tip-loaded beam.
fn solve_state(e_gpa: &[f64], n_elements: usize, geometry: &BeamGeometry) -> Result<(BandMatrix, Vec<f64>)> {
    check_inputs(e_gpa, n_elements)?;
    let le = geometry.length_m / n_elements as f64;
    let n_dof = 2 * n_elements;
    let mut k = BandMatrix::new(n_dof, 3);
    for el in 0..n_elements {
        let ke = element_matrix(e_gpa[segment_of(el, n_elements)] * 1e9, le, geometry);
        let dofs = element_dofs(el);
        for i in 0..4 {
            let Some(gi) = dofs[i] else { continue };
            for j in 0..=i {
                let Some(gj) = dofs[j] else { continue };
                k.add(gi, gj, ke[i][j]);
            }
        }
    }
    let k = k.factor()?;
    let mut u = vec![0.0; n_dof];
    u[n_dof - 2] = geometry.tip_load_n;
    k.solve_factored(&mut u);
    Ok((k, u))
}

/// Linear Timoshenko finite elements, clamped at `x = 0`, tip point load at
/// `x = l`. Young's moduli `e_gpa` are piecewise constant over five equal
/// segments. The shear term uses one-point (reduced) integration to avoid
/// locking. Returns the deflection `w` at the `n_elements + 1` mesh nodes.
pub fn beam_solve(e_gpa: &[f64], n_elements: usize, geometry: &BeamGeometry) -> Result<Vec<f64>> {
    let (_, u) = solve_state(e_gpa, n_elements, geometry)?;
    let mut w = Vec::with_capacity(n_elements + 1);
    w.push(0.0);
    w.extend(u.iter().step_by(2));
    Ok(w)
}

/// Element index and weight of the right node for linear interpolation at
/// `at`.
fn locate(n: usize, length: f64, at: f64) -> (usize, f64) {
    let pos = at * n as f64 / length;
    let el = (pos as usize).min(n - 1);
    (el, pos - el as f64)
}

fn interpolate(w: &[f64], length: f64, at: f64) -> f64 {
    let (el, t) = locate(w.len() - 1, length, at);
    (1.0 - t) * w[el] + t * w[el + 1]
}

/// Parameter-to-observable map: deflection interpolated at the sensors.
fn observe(e_gpa: &[f64], n_elements: usize, geometry: &BeamGeometry) -> Result<Vec<f64>> {
    let w = beam_solve(e_gpa, n_elements, geometry)?;
    Ok(geometry
        .sensor_locations()
        .iter()
        .map(|&s| interpolate(&w, geometry.length_m, s))
        .collect())
}

/// Observation file for the cantilever experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamData {
    pub schema_version: u32,
    pub geometry: BeamGeometry,
    pub n_elements: usize,
    pub e_true_gpa: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub sensor_locations_m: Vec<f64>,
    pub observations_m: Vec<f64>,
}

/// `y* = F(E_true) + ε` with `ε ∼ N(0, σ²I)`; `seed = None` gives noise-free
/// data.
pub fn simulate_beam_data(
    e_true_gpa: &[f64],
    seed: Option<u64>,
    n_elements: usize,
    geometry: &BeamGeometry,
) -> Result<BeamData> {
    let mut obs = observe(e_true_gpa, n_elements, geometry)?;
    if let Some(seed) = seed {
        let mut rng = rng_from_seed(seed);
        let noise = Normal::new(0.0, geometry.noise_variance_m2.sqrt())
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        for y in &mut obs {
            *y += noise.sample(&mut rng);
        }
    }
    Ok(BeamData {
        schema_version: 1,
        geometry: *geometry,
        n_elements,
        e_true_gpa: Some(e_true_gpa.to_vec()),
        seed,
        sensor_locations_m: geometry.sensor_locations(),
        observations_m: obs,
    })
}

/// Posterior over segment moduli in whitened coordinates, `E = 200 + 5z` GPa.
///
#[derive(Debug, Clone)]
pub struct BeamTarget {
    observations: Vec<f64>,
    n_elements: usize,
    geometry: BeamGeometry,
}

impl BeamTarget {
    pub fn new(observations: Vec<f64>, n_elements: usize, geometry: BeamGeometry) -> Result<Self> {
        if observations.len() != NUM_SENSORS {
            return Err(Error::DimensionMismatch { expected: NUM_SENSORS, got: observations.len() });
        }
        Ok(BeamTarget { observations, n_elements, geometry })
    }

    pub fn from_data(data: &BeamData) -> Result<Self> {
        Self::new(data.observations_m.clone(), data.n_elements, data.geometry)
    }

    /// `E = 200 + 5z` in GPa.
    pub fn moduli_gpa(z: &DVector<f64>) -> Vec<f64> {
        z.iter().map(|v| PRIOR_MEAN_GPA + PRIOR_STD_GPA * v).collect()
    }

    pub fn forward(&self, z: &DVector<f64>) -> Result<Vec<f64>> {
        observe(&Self::moduli_gpa(z), self.n_elements, &self.geometry)
    }

    fn misfit(&self, pred: &[f64]) -> f64 {
        let ss: f64 = self.observations.iter().zip(pred).map(|(y, f)| (y - f).powi(2)).sum();
        -0.5 * ss / self.geometry.noise_variance_m2
    }
}

impl TargetDensity for BeamTarget {
    fn dim(&self) -> usize {
        NUM_SEGMENTS
    }

    fn log_density(&self, z: &DVector<f64>) -> Result<f64> {
        Ok(self.misfit(&self.forward(z)?) - 0.5 * z.norm_squared())
    }

    fn grad_log_density(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.log_density_and_grad(z)?.1)
    }

    /// Adjoint gradient. The stiffness is linear in each segment modulus,
    /// so `∂F/∂E_j = −B K⁻¹ K_j u` with `K_j` the unit-modulus assembly of
    /// segment `j`.
    fn log_density_and_grad(&self, z: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let e_gpa = Self::moduli_gpa(z);
        let (k, u) = solve_state(&e_gpa, self.n_elements, &self.geometry)?;
        let n = self.n_elements;
        let length = self.geometry.length_m;
        let w_at = |node: usize| if node == 0 { 0.0 } else { u[2 * (node - 1)] };
        let mut lambda = vec![0.0; u.len()];
        let mut misfit = 0.0;
        for (&s, &y) in self.geometry.sensor_locations().iter().zip(&self.observations) {
            let (el, t) = locate(n, length, s);
            let r = (y - ((1.0 - t) * w_at(el) + t * w_at(el + 1))) / self.geometry.noise_variance_m2;
            misfit += 0.5 * r * r * self.geometry.noise_variance_m2;
            for (node, wt) in [(el, 1.0 - t), (el + 1, t)] {
                if node > 0 {
                    lambda[2 * (node - 1)] += wt * r;
                }
            }
        }
        k.solve_factored(&mut lambda);
        let le = length / n as f64;
        let unit = element_matrix(1e9, le, &self.geometry);
        let mut grad = -z;
        for el in 0..n {
            let dofs = element_dofs(el);
            let local = |v: &[f64], i: usize| dofs[i].map_or(0.0, |g| v[g]);
            let mut q = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    q += local(&lambda, i) * unit[i][j] * local(&u, j);
                }
            }
            grad[segment_of(el, n)] -= PRIOR_STD_GPA * q;
        }
        Ok((-misfit - 0.5 * z.norm_squared(), grad))
    }
}
