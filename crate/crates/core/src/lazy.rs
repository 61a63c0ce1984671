//! Lazy layers `T(z) = U [τ(z_{1:r}); z_⊥]` and their compositions.
//!
//! A [`ComposedMap`] with layers `T_1, …, T_ℓ` evaluates
//! `𝔗_ℓ(z) = T_1(T_2(⋯T_ℓ(z)⋯))`, so appending a layer applies it first:
//! `𝔗_ℓ = 𝔗_{ℓ−1} ∘ T_ℓ`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::log_reference;
use crate::targets::TargetDensity;
use crate::triangular::TriangularMapParams;

pub const MAP_SCHEMA_VERSION: u32 = 1;
const ORTHONORMAL_TOL: f64 = 1e-10;

/// One lazy layer: an orthonormal basis `U = [U_r | U_⊥]` and a triangular
/// map `τ` acting on the first `r` rotated coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LazyLayer {
    u: DMatrix<f64>,
    tau: TriangularMapParams,
}

impl LazyLayer {
    pub fn new(u: DMatrix<f64>, tau: TriangularMapParams) -> Result<Self> {
        let d = u.nrows();
        if d == 0 || u.ncols() != d {
            return Err(Error::InvalidInput("U must be a non-empty square matrix".into()));
        }
        if tau.rank() > d {
            return Err(Error::InvalidInput(format!("rank {} exceeds dimension {d}", tau.rank())));
        }
        let defect = (u.tr_mul(&u) - DMatrix::<f64>::identity(d, d)).amax();
        if !(defect <= ORTHONORMAL_TOL) {
            return Err(Error::InvalidInput(format!("U is not orthonormal (max |UᵀU − I| = {defect:e})")));
        }
        Ok(LazyLayer { u, tau })
    }

    pub fn dim(&self) -> usize {
        self.u.nrows()
    }

    pub fn rank(&self) -> usize {
        self.tau.rank()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn tau(&self) -> &TriangularMapParams {
        &self.tau
    }

    fn check_dim(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: v.len() });
        }
        Ok(())
    }

    /// `x = T(z)` and `log det ∇T(z)`.
    pub fn forward(&self, z: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        self.check_dim(z)?;
        let r = self.rank();
        let head = &z.as_slice()[..r];
        let log_det = self.tau.log_det_jacobian(head)?;
        let (y, _) = self.tau.evaluate(head);
        let mut w = z.clone();
        w.as_mut_slice()[..r].copy_from_slice(&y);
        Ok((&self.u * w, log_det))
    }

    /// `z = T⁻¹(x) = [τ⁻¹(U_rᵀx); U_⊥ᵀx]`.
    pub fn inverse(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(x)?;
        let r = self.rank();
        let mut w = self.u.tr_mul(x);
        let head = self.tau.invert(&w.as_slice()[..r])?;
        w.as_mut_slice()[..r].copy_from_slice(&head);
        Ok(w)
    }
}

#[derive(Serialize, Deserialize)]
struct LayerRepr {
    rank: usize,
    /// row-major
    u: Vec<f64>,
    tau: TriangularMapParams,
}

#[derive(Serialize, Deserialize)]
struct MapRepr {
    schema_version: u32,
    dim: usize,
    layers: Vec<LayerRepr>,
}

/// Composition `𝔗_ℓ = T_1 ∘ ⋯ ∘ T_ℓ`; the empty composition is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedMap {
    dim: usize,
    layers: Vec<LazyLayer>,
}

impl ComposedMap {
    pub fn identity(dim: usize) -> Self {
        ComposedMap { dim, layers: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[LazyLayer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// `𝔗_ℓ ← 𝔗_ℓ ∘ T`.
    pub fn push(&mut self, layer: LazyLayer) -> Result<()> {
        if layer.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: layer.dim() });
        }
        self.layers.push(layer);
        Ok(())
    }

    /// The composition of the first `k` layers.
    pub fn prefix(&self, k: usize) -> ComposedMap {
        ComposedMap {
            dim: self.dim,
            layers: self.layers[..k.min(self.layers.len())].to_vec(),
        }
    }

    fn check_dim(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: v.len() });
        }
        Ok(())
    }

    /// `x = 𝔗_ℓ(z)` and `Σ_k log det ∇T_k` along the forward pass.
    pub fn forward(&self, z: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        self.check_dim(z)?;
        let mut x = z.clone();
        let mut log_det = 0.0;
        for layer in self.layers.iter().rev() {
            let (next, ld) = layer.forward(&x)?;
            x = next;
            log_det += ld;
        }
        Ok((x, log_det))
    }

    pub fn inverse(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(x)?;
        let mut z = x.clone();
        for layer in &self.layers {
            z = layer.inverse(&z)?;
        }
        Ok(z)
    }

    /// Unnormalized `log π_ℓ(z) = log π(𝔗_ℓ(z)) + log det ∇𝔗_ℓ(z)`.
    pub fn pullback_log_density<T: TargetDensity + ?Sized>(&self, target: &T, z: &DVector<f64>) -> Result<f64> {
        let (x, log_det) = self.forward(z)?;
        Ok(target.log_density(&x)? + log_det)
    }

    pub fn pullback_grad_log_density<T: TargetDensity + ?Sized>(
        &self,
        target: &T,
        z: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        Ok(self.pullback_log_density_and_grad(target, z)?.1)
    }

    /// `log π_ℓ(z)` and its gradient by a backward pass through the layers.
    pub fn pullback_log_density_and_grad<T: TargetDensity + ?Sized>(
        &self,
        target: &T,
        z: &DVector<f64>,
    ) -> Result<(f64, DVector<f64>)> {
        self.check_dim(z)?;
        // evaluations of each τ, innermost (last) layer first
        let mut evals = Vec::with_capacity(self.layers.len());
        let mut x = z.clone();
        let mut log_det = 0.0;
        for layer in self.layers.iter().rev() {
            let r = layer.rank();
            let full = layer.tau.evaluate_full(&x.as_slice()[..r])?;
            log_det += full.log_det;
            let mut w = x.clone();
            w.as_mut_slice()[..r].copy_from_slice(&full.y);
            evals.push(full);
            x = &layer.u * w;
        }
        let (lp, mut v) = target.log_density_and_grad(&x)?;
        for (layer, full) in self.layers.iter().zip(evals.iter().rev()) {
            let r = layer.rank();
            let mut u = layer.u.tr_mul(&v);
            let head = full.jacobian.tr_mul(&DVector::from_column_slice(&u.as_slice()[..r]));
            for i in 0..r {
                u[i] = head[i] + full.grad_log_det[i];
            }
            v = u;
        }
        Ok((lp + log_det, v))
    }

    /// Normalized `log (𝔗_ℓ)♯ρ(x) = log ρ(𝔗_ℓ⁻¹(x)) − Σ_k log det ∇T_k` along
    /// the inverse pass.
    pub fn pushforward_log_density(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_dim(x)?;
        let mut z = x.clone();
        let mut log_det = 0.0;
        for layer in &self.layers {
            z = layer.inverse(&z)?;
            log_det += layer.tau.log_det_jacobian(&z.as_slice()[..layer.rank()])?;
        }
        Ok(log_reference(&z) - log_det)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

impl Serialize for ComposedMap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerRepr {
                rank: l.rank(),
                u: l.u.transpose().as_slice().to_vec(),
                tau: l.tau.clone(),
            })
            .collect();
        MapRepr { schema_version: MAP_SCHEMA_VERSION, dim: self.dim, layers }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ComposedMap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = MapRepr::deserialize(d)?;
        if repr.schema_version != MAP_SCHEMA_VERSION {
            return Err(D::Error::custom(format!("unsupported map schema version {}", repr.schema_version)));
        }
        let mut map = ComposedMap::identity(repr.dim);
        for l in repr.layers {
            if l.u.len() != repr.dim * repr.dim || l.rank != l.tau.rank() {
                return Err(D::Error::custom("layer shape does not match the map dimension"));
            }
            let u = DMatrix::from_row_slice(repr.dim, repr.dim, &l.u);
            let layer = LazyLayer::new(u, l.tau).map_err(D::Error::custom)?;
            map.push(layer).map_err(D::Error::custom)?;
        }
        Ok(map)
    }
}

/// The pullback `π_ℓ = 𝔗_ℓ^♯ π` as a target density in its own right.
pub struct Pullback<'a, T: TargetDensity + ?Sized> {
    pub map: &'a ComposedMap,
    pub target: &'a T,
}

impl<'a, T: TargetDensity + ?Sized> Pullback<'a, T> {
    pub fn new(map: &'a ComposedMap, target: &'a T) -> Self {
        Pullback { map, target }
    }
}

impl<T: TargetDensity + ?Sized> TargetDensity for Pullback<'_, T> {
    fn dim(&self) -> usize {
        self.map.dim()
    }

    fn log_density(&self, z: &DVector<f64>) -> Result<f64> {
        self.map.pullback_log_density(self.target, z)
    }

    fn grad_log_density(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.map.pullback_grad_log_density(self.target, z)
    }

    fn log_density_and_grad(&self, z: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        self.map.pullback_log_density_and_grad(self.target, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{random_orthogonal, SymmetricMatrix};
    use crate::quadrature::gauss_hermite_tensor;
    use crate::targets::{gaussian_target, StandardNormal};
    use crate::triangular::MapFamilySpec;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn cubic_tau() -> TriangularMapParams {
        let mut p = TriangularMapParams::identity(MapFamilySpec::new(1, 2)).unwrap();
        p.h_coeffs_mut(0).copy_from_slice(&[0.0, 1.0]);
        p
    }

    fn random_layer(d: usize, r: usize, degree: usize, seed: u64) -> LazyLayer {
        let mut rng = crate::seed::rng_from_seed(seed);
        let tau = TriangularMapParams::identity(MapFamilySpec::new(r, degree)).unwrap();
        let a: Vec<f64> = tau.coefficients().iter().map(|v| v + rng.random_range(-0.15..0.15)).collect();
        LazyLayer::new(random_orthogonal(d, seed.wrapping_add(1)), tau.with_coefficients(&a)).unwrap()
    }

    fn random_map(d: usize, layers: usize, seed: u64) -> ComposedMap {
        let mut map = ComposedMap::identity(d);
        for k in 0..layers {
            let r = 1 + (seed as usize + k) % d;
            let degree = 1 + (seed as usize + 2 * k) % 2;
            map.push(random_layer(d, r, degree, seed * 31 + k as u64)).unwrap();
        }
        map
    }

    fn normal_point(d: usize, seed: u64) -> DVector<f64> {
        use rand_distr::{Distribution, StandardNormal as N};
        let mut rng = crate::seed::rng_from_seed(seed);
        DVector::from_iterator(d, (0..d).map(|_| Distribution::<f64>::sample(&N, &mut rng)))
    }

    #[test]
    fn identity_tau_is_a_rotation() {
        let tau = TriangularMapParams::identity(MapFamilySpec::new(2, 2)).unwrap();
        let u = random_orthogonal(4, 3);
        let layer = LazyLayer::new(u.clone(), tau.clone()).unwrap();
        let z = DVector::from_column_slice(&[0.3, -1.0, 2.0, 0.1]);
        let (x, ld) = layer.forward(&z).unwrap();
        assert!((x - &u * &z).amax() < 1e-14);
        assert_eq!(ld, 0.0);
        assert!((layer.inverse(&z).unwrap() - u.tr_mul(&z)).amax() < 1e-14);
        let plain = LazyLayer::new(DMatrix::identity(4, 4), tau).unwrap();
        assert_eq!(plain.forward(&z).unwrap().0, z);
    }

    #[test]
    fn cubic_layer_forward_and_inverse() {
        let layer = LazyLayer::new(DMatrix::identity(2, 2), cubic_tau()).unwrap();
        let (x, _) = layer.forward(&DVector::from_column_slice(&[1.5, 7.0])).unwrap();
        assert_abs_diff_eq!(x[0], 1.125, epsilon = 1e-14);
        assert_eq!(x[1], 7.0);
        let z = layer.inverse(&x).unwrap();
        assert_abs_diff_eq!(z[0], 1.5, epsilon = 1e-12);
        assert_eq!(z[1], 7.0);
    }

    #[test]
    fn rejects_non_orthonormal_basis() {
        let tau = TriangularMapParams::identity(MapFamilySpec::new(1, 1)).unwrap();
        assert!(LazyLayer::new(DMatrix::from_element(2, 2, 1.0), tau.clone()).is_err());
        let mut map = ComposedMap::identity(3);
        assert!(map.push(LazyLayer::new(DMatrix::identity(2, 2), tau).unwrap()).is_err());
    }

    #[test]
    fn lazy_structure_preserves_complement() {
        for seed in 0..50 {
            let d = 2 + seed as usize % 4;
            let r = 1 + seed as usize % d;
            let layer = random_layer(d, r, 2, seed);
            let z = normal_point(d, seed + 100);
            let (x, _) = layer.forward(&z).unwrap();
            let comp = layer.basis().columns(r, d - r).tr_mul(&x);
            for k in 0..d - r {
                assert!((comp[k] - z[r + k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_map_pullback_is_target() {
        let map = ComposedMap::identity(2);
        let t = StandardNormal { dim: 2 };
        let z = DVector::from_column_slice(&[0.4, -0.2]);
        assert_eq!(map.pullback_log_density(&t, &z).unwrap(), t.log_density(&z).unwrap());
        assert_eq!(map.pushforward_log_density(&z).unwrap(), log_reference(&z));
        assert_eq!(map.pullback_grad_log_density(&t, &z).unwrap(), t.grad_log_density(&z).unwrap());
    }

    fn doubling_map() -> ComposedMap {
        let mut tau = TriangularMapParams::identity(MapFamilySpec::new(1, 1)).unwrap();
        // h ≡ √2 gives τ(z) = 2z
        tau.h_coeffs_mut(0)[0] = 2f64.sqrt();
        let mut map = ComposedMap::identity(1);
        map.push(LazyLayer::new(DMatrix::identity(1, 1), tau).unwrap()).unwrap();
        map
    }

    #[test]
    fn scaling_layer_pullback_and_pushforward() {
        let map = doubling_map();
        let t = StandardNormal { dim: 1 };
        let z = DVector::from_column_slice(&[0.7]);
        let expected = -0.5 * (1.4f64).powi(2) + 2f64.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert_abs_diff_eq!(map.pullback_log_density(&t, &z).unwrap(), expected, epsilon = 1e-14);
        let x = DVector::from_column_slice(&[0.9]);
        let expected = log_reference(&DVector::from_column_slice(&[0.45])) - 2f64.ln();
        assert_abs_diff_eq!(map.pushforward_log_density(&x).unwrap(), expected, epsilon = 1e-14);
    }

    #[test]
    fn ridge_structure_of_pushforward() {
        for seed in 0..10 {
            let d = 4;
            let r = 1 + seed as usize % 3;
            let mut map = ComposedMap::identity(d);
            map.push(random_layer(d, r, 2, seed)).unwrap();
            let layer = &map.layers()[0];
            let x = normal_point(d, seed + 7);
            let w = normal_point(d - r, seed + 8);
            let x2 = &x + layer.basis().columns(r, d - r) * w;
            let a = map.pushforward_log_density(&x).unwrap() - log_reference(&x);
            let b = map.pushforward_log_density(&x2).unwrap() - log_reference(&x2);
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn linear_layer_gradient() {
        // τ(z) = A z with lower-triangular A: c₂ = 0.5 z₁, h₁ = √1.5, h₂ = √0.8
        let mut tau = TriangularMapParams::identity(MapFamilySpec::new(2, 1)).unwrap();
        tau.h_coeffs_mut(0)[0] = 1.5f64.sqrt();
        tau.c_coeffs_mut(1)[1] = 0.5;
        tau.h_coeffs_mut(1)[0] = 0.8f64.sqrt();
        let a = DMatrix::from_row_slice(2, 2, &[1.5, 0.0, 0.5, 0.8]);
        let u = random_orthogonal(3, 5);
        let mut map = ComposedMap::identity(3);
        map.push(LazyLayer::new(u.clone(), tau).unwrap()).unwrap();
        let mut block = DMatrix::identity(3, 3);
        block.view_mut((0, 0), (2, 2)).copy_from(&a);
        let a_tilde = &u * block;
        let cov = SymmetricMatrix::new(DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.0, 0.1, 0.0, 0.1, 0.5])).unwrap();
        let t = gaussian_target(DVector::from_column_slice(&[0.5, -1.0, 0.2]), &cov).unwrap();
        let z = DVector::from_column_slice(&[0.3, -0.6, 1.1]);
        let expected = a_tilde.tr_mul(&t.grad_log_density(&(&a_tilde * &z)).unwrap());
        let got = map.pullback_grad_log_density(&t, &z).unwrap();
        assert!((got - expected).amax() < 1e-12);
    }

    #[test]
    fn pullback_normalizes() {
        let cov = SymmetricMatrix::new(DMatrix::from_row_slice(2, 2, &[1.3, 0.4, 0.4, 0.8])).unwrap();
        let t = gaussian_target(DVector::from_column_slice(&[0.3, -0.2]), &cov).unwrap();
        let map = random_map(2, 2, 4);
        let q = gauss_hermite_tensor(40, 2).unwrap();
        let total = q.integrate(|z| {
            (map.pullback_log_density(&t, z).unwrap() + t.log_normalizer() - log_reference(z)).exp()
        });
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-3);
    }

    #[test]
    fn composition_matches_iterated_layers() {
        let map = random_map(4, 3, 9);
        let t = StandardNormal { dim: 4 };
        let z = normal_point(4, 1);
        // peel the innermost layer: π_3(z) = π_2(T_3 z) + log det ∇T_3(z)
        let (inner, ld) = map.layers()[2].forward(&z).unwrap();
        let a = map.pullback_log_density(&t, &z).unwrap();
        let b = map.prefix(2).pullback_log_density(&t, &inner).unwrap() + ld;
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let map = random_map(3, 3, 2);
        let back = ComposedMap::from_json(&map.to_json().unwrap()).unwrap();
        assert_eq!(back, map);
        let bad = map.to_json().unwrap().replace("\"schema_version\":1", "\"schema_version\":9");
        assert!(ComposedMap::from_json(&bad).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(60))]

        #[test]
        fn round_trip(d in 1usize..=5, layers in 0usize..=3, seed in 0u64..10_000) {
            let map = random_map(d, layers, seed);
            let z = normal_point(d, seed ^ 0xfeed);
            let (x, _) = map.forward(&z).unwrap();
            let back = map.inverse(&x).unwrap();
            proptest::prop_assert!((back - &z).amax() <= 1e-8);
        }

        #[test]
        fn pullback_gradient_matches_fd(d in 1usize..=5, layers in 1usize..=3, seed in 0u64..10_000) {
            let map = random_map(d, layers, seed);
            let mean = normal_point(d, seed + 3) * 0.5;
            let cov = SymmetricMatrix::from_diagonal(&(0..d).map(|i| 0.5 + 0.3 * i as f64).collect::<Vec<_>>()).unwrap();
            let t = gaussian_target(mean, &cov).unwrap();
            let z = normal_point(d, seed ^ 0xbeef);
            let grad = map.pullback_grad_log_density(&t, &z).unwrap();
            for j in 0..d {
                let h = 1e-5 * (1.0 + z[j].abs());
                let (mut zp, mut zm) = (z.clone(), z.clone());
                zp[j] += h;
                zm[j] -= h;
                let fd = (map.pullback_log_density(&t, &zp).unwrap() - map.pullback_log_density(&t, &zm).unwrap()) / (2.0 * h);
                proptest::prop_assert!((grad[j] - fd).abs() <= 1e-5 * grad[j].abs().max(fd.abs()).max(1.0), "{} vs {}", grad[j], fd);
            }
        }
    }
}
