//! Metropolis–Hastings on the pullback `π_ℓ`, effective sample sizes and
//! de-biasing through the composed map.

use std::fmt::Write as _;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lazy::ComposedMap;
use crate::log_reference;
use crate::seed::rng_from_seed;
use crate::targets::TargetDensity;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Sampler {
    /// Independence proposals `z′ ∼ N(0, I)`.
    Independence,
    /// `z′ = √(1−β²) z + β ξ`.
    Pcn { beta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub sampler: Sampler,
    pub n_steps: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if let Sampler::Pcn { beta } = self.sampler {
            if !(beta > 0.0 && beta <= 1.0) {
                return Err(Error::InvalidConfig(format!("pCN step size beta must be in (0, 1], got {beta}")));
            }
        }
        if self.n_steps == 0 {
            return Err(Error::InvalidConfig("n_steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    /// State after each step.
    pub states: Vec<DVector<f64>>,
    pub accepted: Vec<bool>,
    pub acceptance_rate: f64,
    pub seed: u64,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }

    pub fn coordinate(&self, j: usize) -> Vec<f64> {
        self.states.iter().map(|s| s[j]).collect()
    }

    /// One row per state, header `{prefix}1, …, {prefix}d, accepted`.
    pub fn to_csv(&self, prefix: &str) -> String {
        let d = self.dim();
        let mut out = String::new();
        let header: Vec<String> = (1..=d).map(|j| format!("{prefix}{j}")).collect();
        let _ = writeln!(out, "{},accepted", header.join(","));
        for (s, a) in self.states.iter().zip(&self.accepted) {
            for v in s.iter() {
                let _ = write!(out, "{v:e},");
            }
            let _ = writeln!(out, "{}", u8::from(*a));
        }
        out
    }
}

/// `log L_ℓ = log π_ℓ − log ρ`; non-finite values map to `−∞`.
fn log_likelihood<T: TargetDensity + ?Sized>(target: &T, z: &DVector<f64>) -> f64 {
    match target.log_density(z) {
        Ok(v) if v.is_finite() => v - log_reference(z),
        _ => f64::NEG_INFINITY,
    }
}

fn run<T, P>(target: &T, n_steps: usize, seed: u64, initial: Option<DVector<f64>>, mut propose: P) -> Result<Chain>
where
    T: TargetDensity + ?Sized,
    P: FnMut(&DVector<f64>, DVector<f64>) -> DVector<f64>,
{
    let d = target.dim();
    let mut z = initial.unwrap_or_else(|| DVector::zeros(d));
    if z.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: z.len() });
    }
    let mut ll = log_likelihood(target, &z);
    if !ll.is_finite() {
        return Err(Error::InvalidStart);
    }
    let mut rng = rng_from_seed(seed);
    let mut states = Vec::with_capacity(n_steps);
    let mut accepted = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let xi = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(&mut rng)));
        let u: f64 = rng.random();
        let candidate = propose(&z, xi);
        let ll_new = log_likelihood(target, &candidate);
        let accept = u.ln() < ll_new - ll;
        if accept {
            z = candidate;
            ll = ll_new;
        }
        states.push(z.clone());
        accepted.push(accept);
    }
    let acceptance_rate = accepted.iter().filter(|&&a| a).count() as f64 / n_steps.max(1) as f64;
    Ok(Chain { states, accepted, acceptance_rate, seed })
}

/// MH with independence proposal `N(0, I)`: accept with
/// `min(1, π_ℓ(z′)ρ(z) / (π_ℓ(z)ρ(z′)))`.
pub fn mh_independence<T: TargetDensity + ?Sized>(
    target: &T,
    n_steps: usize,
    seed: u64,
    initial: Option<DVector<f64>>,
) -> Result<Chain> {
    run(target, n_steps, seed, initial, |_, xi| xi)
}

/// MH with the pCN proposal; acceptance uses `L_ℓ = π_ℓ/ρ` only.
pub fn mh_pcn<T: TargetDensity + ?Sized>(
    target: &T,
    beta: f64,
    n_steps: usize,
    seed: u64,
    initial: Option<DVector<f64>>,
) -> Result<Chain> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidConfig(format!("pCN step size beta must be in (0, 1], got {beta}")));
    }
    let keep = (1.0 - beta * beta).sqrt();
    run(target, n_steps, seed, initial, |z, xi| z * keep + xi * beta)
}

pub fn sample<T: TargetDensity + ?Sized>(target: &T, config: &McmcConfig, seed: u64) -> Result<Chain> {
    config.validate()?;
    match config.sampler {
        Sampler::Independence => mh_independence(target, config.n_steps, seed, None),
        Sampler::Pcn { beta } => mh_pcn(target, beta, config.n_steps, seed, None),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EssEstimate {
    pub ess: f64,
    /// The coordinate never moved; `ess` is then the chain length.
    pub constant: bool,
}

/// `n / (1 + 2 Σ_{t=1}^{W} ρ̂_t)` with `W` from Geyer's initial positive
/// sequence, clipped to `[1, n]`.
pub fn effective_sample_size(values: &[f64]) -> Result<EssEstimate> {
    let n = values.len();
    if n < 10 {
        return Err(Error::InvalidInput(format!("need at least 10 states for an ESS estimate, got {n}")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let autocov = |t: usize| centered[..n - t].iter().zip(&centered[t..]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    let var = autocov(0);
    if !(var > 0.0) {
        return Ok(EssEstimate { ess: n as f64, constant: true });
    }
    let mut sum = 0.0;
    let mut k = 0;
    loop {
        let (t0, t1) = (2 * k, 2 * k + 1);
        if t1 >= n {
            break;
        }
        let r0 = if t0 == 0 { 1.0 } else { autocov(t0) / var };
        let r1 = autocov(t1) / var;
        if r0 + r1 <= 0.0 {
            break;
        }
        // ρ̂_0 = 1 is not part of the sum
        sum += if t0 == 0 { r1 } else { r0 + r1 };
        k += 1;
    }
    let tau = 1.0 + 2.0 * sum;
    Ok(EssEstimate {
        ess: (n as f64 / tau).clamp(1.0, n as f64),
        constant: false,
    })
}

/// `X_i = 𝔗_ℓ(Z_i)`, acceptance flags unchanged.
pub fn debias(chain: &Chain, map: &ComposedMap) -> Result<Chain> {
    let states = chain
        .states
        .iter()
        .map(|z| map.forward(z).map(|(x, _)| x))
        .collect::<Result<Vec<_>>>()?;
    Ok(Chain { states, ..chain.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcSummary {
    pub schema_version: u32,
    pub sampler: Sampler,
    pub n_steps: usize,
    pub seed: u64,
    pub acceptance_rate: f64,
    /// Per-coordinate ESS as a percentage of the chain length.
    pub ess_percent: Vec<f64>,
    pub worst_ess_percent: f64,
    pub best_ess_percent: f64,
    pub mean_ess_percent: f64,
    pub constant_coordinates: Vec<usize>,
}

pub fn summarize(chain: &Chain, sampler: Sampler) -> Result<McmcSummary> {
    let n = chain.len();
    let mut ess_percent = Vec::with_capacity(chain.dim());
    let mut constant_coordinates = Vec::new();
    for j in 0..chain.dim() {
        let e = effective_sample_size(&chain.coordinate(j))?;
        if e.constant {
            constant_coordinates.push(j);
        }
        ess_percent.push(100.0 * e.ess / n as f64);
    }
    let worst = ess_percent.iter().cloned().fold(f64::INFINITY, f64::min);
    let best = ess_percent.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = ess_percent.iter().sum::<f64>() / ess_percent.len().max(1) as f64;
    Ok(McmcSummary {
        schema_version: 1,
        sampler,
        n_steps: n,
        seed: chain.seed,
        acceptance_rate: chain.acceptance_rate,
        ess_percent,
        worst_ess_percent: worst,
        best_ess_percent: best,
        mean_ess_percent: mean,
        constant_coordinates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lazy::LazyLayer;
    use crate::linalg::SymmetricMatrix;
    use crate::targets::{gaussian_target, StandardNormal};
    use crate::triangular::{MapFamilySpec, TriangularMapParams};
    use nalgebra::DMatrix;

    fn normal(mean: &[f64], var: f64) -> crate::targets::GaussianTarget {
        gaussian_target(
            DVector::from_column_slice(mean),
            &SymmetricMatrix::from_diagonal(&vec![var; mean.len()]).unwrap(),
        )
        .unwrap()
    }

    fn mean_var(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
    }

    #[test]
    fn reference_target_accepts_everything() {
        let t = StandardNormal { dim: 3 };
        assert_eq!(mh_independence(&t, 500, 1, None).unwrap().acceptance_rate, 1.0);
        assert_eq!(mh_pcn(&t, 0.5, 500, 1, None).unwrap().acceptance_rate, 1.0);
    }

    #[test]
    fn acceptance_falls_with_shift() {
        let rates: Vec<f64> = [0.0, 1.0, 2.0, 4.0]
            .iter()
            .map(|&m| mh_independence(&normal(&[m, 0.0], 1.0), 4000, 7, None).unwrap().acceptance_rate)
            .collect();
        assert_eq!(rates[0], 1.0);
        for w in rates.windows(2) {
            assert!(w[1] < w[0], "{rates:?}");
        }
    }

    #[test]
    fn independence_chain_moment() {
        let chain = mh_independence(&normal(&[1.0], 1.0), 20_000, 3, None).unwrap();
        let x = chain.coordinate(0);
        let ess = effective_sample_size(&x).unwrap().ess;
        let (m, v) = mean_var(&x);
        assert!((m - 1.0).abs() < 4.0 * v.sqrt() / ess.sqrt(), "mean {m}, ess {ess}");
    }

    #[test]
    fn pcn_with_unit_beta_matches_independence() {
        let t = normal(&[0.8, -0.3], 1.5);
        let a = mh_independence(&t, 2000, 11, None).unwrap();
        let b = mh_pcn(&t, 1.0, 2000, 11, None).unwrap();
        assert_eq!(a.accepted, b.accepted);
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn pcn_rejects_bad_beta() {
        let t = StandardNormal { dim: 1 };
        assert!(matches!(mh_pcn(&t, 1.5, 10, 0, None), Err(Error::InvalidConfig(_))));
        assert!(matches!(mh_pcn(&t, 0.0, 10, 0, None), Err(Error::InvalidConfig(_))));
        let cfg = McmcConfig { sampler: Sampler::Pcn { beta: 1.5 }, n_steps: 10, seed: None };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn pcn_is_stationary() {
        let chain = mh_pcn(&normal(&[0.0, 0.0], 2.0), 0.5, 100_000, 5, None).unwrap();
        for j in 0..2 {
            let (_, v) = mean_var(&chain.coordinate(j));
            assert!((v - 2.0).abs() < 0.2, "coordinate {j}: variance {v}");
        }
    }

    #[test]
    fn invalid_initial_state() {
        struct Nowhere;
        impl TargetDensity for Nowhere {
            fn dim(&self) -> usize {
                1
            }
            fn log_density(&self, _: &DVector<f64>) -> Result<f64> {
                Ok(f64::NEG_INFINITY)
            }
            fn grad_log_density(&self, _: &DVector<f64>) -> Result<DVector<f64>> {
                Ok(DVector::zeros(1))
            }
        }
        assert_eq!(mh_independence(&Nowhere, 10, 0, None).unwrap_err(), Error::InvalidStart);
    }

    #[test]
    fn ess_of_iid_chain() {
        let n = 10_000;
        let chain = mh_independence(&StandardNormal { dim: 1 }, n, 21, None).unwrap();
        let e = effective_sample_size(&chain.coordinate(0)).unwrap();
        assert!(e.ess >= 0.8 * n as f64 && e.ess <= 1.2 * n as f64, "{e:?}");
    }

    #[test]
    fn ess_of_ar1_chain() {
        let phi: f64 = 0.9;
        let n = 100_000;
        let mut rng = rng_from_seed(2);
        let mut x = 0.0;
        let values: Vec<f64> = (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                x = phi * x + (1.0 - phi * phi).sqrt() * e;
                x
            })
            .collect();
        let ratio = effective_sample_size(&values).unwrap().ess / n as f64;
        let expected = (1.0 - phi) / (1.0 + phi);
        assert!((ratio - expected).abs() < 0.2 * expected, "{ratio} vs {expected}");
    }

    #[test]
    fn ess_degenerate_chains() {
        let alternating: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let e = effective_sample_size(&alternating).unwrap();
        assert_eq!(e.ess, 100.0);
        let e = effective_sample_size(&[3.0; 50]).unwrap();
        assert!(e.constant);
        assert_eq!(e.ess, 50.0);
        assert!(effective_sample_size(&[1.0; 5]).is_err());
    }

    #[test]
    fn debias_through_maps() {
        let chain = mh_independence(&StandardNormal { dim: 1 }, 20_000, 8, None).unwrap();
        let same = debias(&chain, &ComposedMap::identity(1)).unwrap();
        assert_eq!(same, chain);
        let mut tau = TriangularMapParams::identity(MapFamilySpec::new(1, 0)).unwrap();
        tau.h_coeffs_mut(0)[0] = 2f64.sqrt();
        let mut map = ComposedMap::identity(1);
        map.push(LazyLayer::new(DMatrix::identity(1, 1), tau).unwrap()).unwrap();
        let pushed = debias(&chain, &map).unwrap();
        assert_eq!(pushed.accepted, chain.accepted);
        let (_, v) = mean_var(&pushed.coordinate(0));
        assert!((v - 4.0).abs() < 0.4, "variance {v}");
    }

    #[test]
    fn summary_and_csv() {
        let chain = mh_independence(&normal(&[0.5, 0.0], 1.0), 200, 1, None).unwrap();
        let s = summarize(&chain, Sampler::Independence).unwrap();
        assert_eq!(s.ess_percent.len(), 2);
        assert!(s.worst_ess_percent <= s.mean_ess_percent && s.mean_ess_percent <= s.best_ess_percent);
        let csv = chain.to_csv("z");
        assert_eq!(csv.lines().count(), 201);
        assert_eq!(csv.lines().next().unwrap(), "z1,z2,accepted");
        let back: McmcSummary = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }
}
