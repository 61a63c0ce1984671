//! Variational inference by greedy composition of lazy transport maps.
//!
//! A lazy map acts nonlinearly only on a low-dimensional subspace `range(U_r)`
//! and as the identity on its orthogonal complement:
//!
//! ```text
//! T(z) = U_r τ(z_1, …, z_r) + U_⊥ z_⊥
//! ```
//!
//! The subspace is taken from the leading eigenvectors of the diagnostic
//! matrix `H = E[∇log(π/ρ) ∇log(π/ρ)ᵀ]`, and `τ` is a monotone lower-triangular
//! map fitted by minimizing a discretized reverse KL divergence. Layers are
//! stacked greedily on the residual pullback `π_ℓ = (T_1 ∘ … ∘ T_ℓ)^♯ π` until
//! `½ trace(H_ℓ)` drops below a tolerance.
//!
//! The reference density `ρ` is always the standard Gaussian `N(0, I_d)`.
//!
//! Module overview:
//!
//! - [`linalg`]: symmetric eigensolver, Cholesky, random orthogonal matrices.
//! - [`quadrature`]: Gauss–Hermite, Monte Carlo and Gauss–Legendre rules.
//! - [`targets`]: target densities (Gaussian, banana, log-Gaussian Cox, beam).
//! - [`triangular`]: monotone triangular maps in a Hermite basis.
//! - [`lazy`]: lazy layers and their compositions.
//! - [`subspace`]: diagnostic matrix, subspace selection, variance diagnostic.
//! - [`optimizer`]: reverse-KL objective and BFGS.
//! - [`greedy`]: the layer-by-layer driver.
//! - [`mcmc`]: independence and pCN Metropolis–Hastings, ESS, de-biasing.

pub mod error;
pub mod greedy;
pub mod lazy;
pub mod linalg;
pub mod mcmc;
pub mod optimizer;
pub mod quadrature;
pub mod seed;
pub mod subspace;
pub mod targets;
pub mod triangular;

mod basis;

pub use error::{Error, Result};
pub use greedy::{layers_of_lazy_maps, GreedyConfig, GreedyResult, LayerSettings};
pub use lazy::{ComposedMap, LazyLayer};
pub use quadrature::Quadrature;
pub use targets::TargetDensity;
pub use triangular::{MapFamilySpec, TriangularMapParams};

/// Log-density of the standard normal reference `N(0, I_d)` at `z`.
pub fn log_reference(z: &nalgebra::DVector<f64>) -> f64 {
    let d = z.len() as f64;
    -0.5 * z.norm_squared() - 0.5 * d * (2.0 * std::f64::consts::PI).ln()
}
