//! Monotone lower-triangular maps `τ: R^r → R^r`.
//!
//! Component `i` has the integrated-squared form
//!
//! ```text
//! τ_i(x) = c_i(x_{1:i−1}) + ∫_0^{x_i} h_i(x_{1:i−1}, t)² dt
//! ```
//!
//! which is nondecreasing in `x_i` for any coefficients. Both `c_i` and `h_i`
//! are expanded in products of normalized probabilists' Hermite polynomials
//! `He_k/√k!` over a total-degree multi-index set. For a family of degree `p`
//! the set for `c_i` has total degree `≤ p` and the set for `h_i` has total
//! degree `≤ max(p − 1, 0)`, so degree 1 is exactly the affine triangular
//! family. The integral is computed with a Gauss–Legendre rule rescaled to
//! `[0, x_i]`.
//!
//! Coefficients are stored per component, `c` first, then `h`, each ordered by
//! the graded lexicographic multi-index order (total degree ascending, then
//! lexicographically descending with the first variable varying slowest; the
//! last variable of an `h` index is the integration variable `t`).

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::{hermite_values, hermite_values_and_derivs, total_degree_set};
use crate::error::{Error, Result};
use crate::quadrature::gauss_legendre_unit;

pub const DEFAULT_INTEGRATION_NODES: usize = 16;
const DEGENERATE_PARTIAL: f64 = 1e-300;
const INVERSION_LIMIT: f64 = 1e8;
const BISECTION_STEPS: usize = 60;
const NEWTON_STEPS: usize = 5;

fn default_integration_nodes() -> usize {
    DEFAULT_INTEGRATION_NODES
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapFamilySpec {
    pub rank: usize,
    pub degree: usize,
    #[serde(default = "default_integration_nodes")]
    pub integration_nodes: usize,
}

impl MapFamilySpec {
    pub fn new(rank: usize, degree: usize) -> Self {
        MapFamilySpec {
            rank,
            degree,
            integration_nodes: DEFAULT_INTEGRATION_NODES,
        }
    }

    /// Total degree of the `h` expansions.
    pub fn h_degree(&self) -> usize {
        self.degree.saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidConfig("map rank must be at least 1".into()));
        }
        if self.integration_nodes == 0 {
            return Err(Error::InvalidConfig("integration_nodes must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
struct Layout {
    c_index: Vec<Vec<Vec<usize>>>,
    h_index: Vec<Vec<Vec<usize>>>,
    offsets: Vec<usize>,
    total: usize,
    gl_nodes: Vec<f64>,
    gl_weights: Vec<f64>,
}

impl Layout {
    fn new(spec: &MapFamilySpec) -> Result<Self> {
        spec.validate()?;
        let c_index: Vec<_> = (0..spec.rank).map(|i| total_degree_set(i, spec.degree)).collect();
        let h_index: Vec<_> = (0..spec.rank)
            .map(|i| total_degree_set(i + 1, spec.h_degree()))
            .collect();
        let mut offsets = Vec::with_capacity(spec.rank + 1);
        let mut total = 0;
        for i in 0..spec.rank {
            offsets.push(total);
            total += c_index[i].len() + h_index[i].len();
        }
        offsets.push(total);
        let (gl_nodes, gl_weights) = gauss_legendre_unit(spec.integration_nodes)?;
        Ok(Layout { c_index, h_index, offsets, total, gl_nodes, gl_weights })
    }
}

/// Coefficients of a monotone triangular map together with its family.
#[derive(Debug, Clone)]
pub struct TriangularMapParams {
    spec: MapFamilySpec,
    layout: Arc<Layout>,
    coeffs: Vec<f64>,
}

impl PartialEq for TriangularMapParams {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.coeffs == other.coeffs
    }
}

#[derive(Serialize, Deserialize)]
struct ComponentRepr {
    c: Vec<f64>,
    h: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamsRepr {
    rank: usize,
    degree: usize,
    integration_nodes: usize,
    components: Vec<ComponentRepr>,
}

impl Serialize for TriangularMapParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let components = (0..self.rank())
            .map(|i| ComponentRepr {
                c: self.c_coeffs(i).to_vec(),
                h: self.h_coeffs(i).to_vec(),
            })
            .collect();
        ParamsRepr {
            rank: self.spec.rank,
            degree: self.spec.degree,
            integration_nodes: self.spec.integration_nodes,
            components,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for TriangularMapParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = ParamsRepr::deserialize(d)?;
        let spec = MapFamilySpec {
            rank: repr.rank,
            degree: repr.degree,
            integration_nodes: repr.integration_nodes,
        };
        let mut params = TriangularMapParams::identity(spec).map_err(D::Error::custom)?;
        if repr.components.len() != spec.rank {
            return Err(D::Error::custom("component count does not match rank"));
        }
        for (i, comp) in repr.components.into_iter().enumerate() {
            if comp.c.len() != params.layout.c_index[i].len() || comp.h.len() != params.layout.h_index[i].len() {
                return Err(D::Error::custom(format!("coefficient count mismatch in component {i}")));
            }
            params.c_coeffs_mut(i).copy_from_slice(&comp.c);
            params.h_coeffs_mut(i).copy_from_slice(&comp.h);
        }
        if params.coeffs.iter().any(|v| !v.is_finite()) {
            return Err(D::Error::custom("non-finite coefficient"));
        }
        Ok(params)
    }
}

/// Derivatives of the map output and log-determinant with respect to the
/// flat coefficient vector at one point.
#[derive(Debug, Clone)]
pub struct CoeffSensitivity {
    pub y: Vec<f64>,
    pub log_det: f64,
    /// `dy[i]` holds `∂y_i/∂a` for the coefficients of component `i` only
    /// (all other entries are zero).
    pub dy: Vec<Vec<f64>>,
    /// `∂ log det ∇τ / ∂a` over the full coefficient vector.
    pub dlog_det: Vec<f64>,
}

/// Map value, lower-triangular Jacobian and `∇_x log det ∇τ` at one point.
#[derive(Debug, Clone)]
pub struct FullEvaluation {
    pub y: Vec<f64>,
    pub log_det: f64,
    pub jacobian: DMatrix<f64>,
    pub grad_log_det: Vec<f64>,
}

/// Per-component scratch values of the Hermite bases at the conditioning
/// variables `x_{1:i−1}`.
struct Conditioning {
    /// `vals[j][k] = ψ_k(x_j)`
    vals: Vec<Vec<f64>>,
    ders: Vec<Vec<f64>>,
}

impl Conditioning {
    fn new(x: &[f64], upto: usize, degree: usize) -> Self {
        let mut vals = Vec::with_capacity(upto);
        let mut ders = Vec::with_capacity(upto);
        for &xj in &x[..upto] {
            let (mut v, mut d) = (Vec::new(), Vec::new());
            hermite_values_and_derivs(xj, degree, &mut v, &mut d);
            vals.push(v);
            ders.push(d);
        }
        Conditioning { vals, ders }
    }

    /// `Π_j ψ_{α_j}(x_j)` over the first `nvars` entries of `alpha`.
    fn product(&self, alpha: &[usize], nvars: usize) -> f64 {
        (0..nvars).map(|j| self.vals[j][alpha[j]]).product()
    }

    /// `∂/∂x_wrt Π_j ψ_{α_j}(x_j)`.
    fn product_deriv(&self, alpha: &[usize], nvars: usize, wrt: usize) -> f64 {
        (0..nvars)
            .map(|j| if j == wrt { self.ders[j][alpha[j]] } else { self.vals[j][alpha[j]] })
            .product()
    }
}

impl TriangularMapParams {
    /// `c ≡ 0`, `h ≡ 1`: the identity map.
    pub fn identity(spec: MapFamilySpec) -> Result<Self> {
        let layout = Arc::new(Layout::new(&spec)?);
        let mut coeffs = vec![0.0; layout.total];
        for i in 0..spec.rank {
            // constant term of h comes first in graded order
            coeffs[layout.offsets[i] + layout.c_index[i].len()] = 1.0;
        }
        Ok(TriangularMapParams { spec, layout, coeffs })
    }

    pub fn spec(&self) -> &MapFamilySpec {
        &self.spec
    }

    pub fn rank(&self) -> usize {
        self.spec.rank
    }

    pub fn num_coefficients(&self) -> usize {
        self.layout.total
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn set_coefficients(&mut self, a: &[f64]) {
        assert_eq!(a.len(), self.coeffs.len(), "coefficient vector length");
        self.coeffs.copy_from_slice(a);
    }

    pub fn with_coefficients(&self, a: &[f64]) -> Self {
        let mut out = self.clone();
        out.set_coefficients(a);
        out
    }

    /// Start of component `i`'s block in the flat coefficient vector.
    pub fn component_offset(&self, i: usize) -> usize {
        self.layout.offsets[i]
    }

    pub fn c_multi_indices(&self, i: usize) -> &[Vec<usize>] {
        &self.layout.c_index[i]
    }

    pub fn h_multi_indices(&self, i: usize) -> &[Vec<usize>] {
        &self.layout.h_index[i]
    }

    pub fn c_coeffs(&self, i: usize) -> &[f64] {
        let o = self.layout.offsets[i];
        &self.coeffs[o..o + self.layout.c_index[i].len()]
    }

    pub fn h_coeffs(&self, i: usize) -> &[f64] {
        let o = self.layout.offsets[i] + self.layout.c_index[i].len();
        &self.coeffs[o..self.layout.offsets[i + 1]]
    }

    pub fn c_coeffs_mut(&mut self, i: usize) -> &mut [f64] {
        let o = self.layout.offsets[i];
        let n = self.layout.c_index[i].len();
        &mut self.coeffs[o..o + n]
    }

    pub fn h_coeffs_mut(&mut self, i: usize) -> &mut [f64] {
        let o = self.layout.offsets[i] + self.layout.c_index[i].len();
        let end = self.layout.offsets[i + 1];
        &mut self.coeffs[o..end]
    }

    fn max_degree(&self) -> usize {
        self.spec.degree.max(self.spec.h_degree())
    }

    /// `h_i(x_{1:i−1}, t)` expanded in `t`: returns the coefficient of `ψ_k(t)`
    /// for each `k`.
    fn h_in_t(&self, i: usize, cond: &Conditioning) -> Vec<f64> {
        let mut by_t = vec![0.0; self.spec.h_degree() + 1];
        for (beta, coef) in self.layout.h_index[i].iter().zip(self.h_coeffs(i)) {
            by_t[beta[i]] += coef * cond.product(beta, i);
        }
        by_t
    }

    fn eval_poly_t(by_t: &[f64], t: f64, scratch: &mut Vec<f64>) -> f64 {
        hermite_values(t, by_t.len() - 1, scratch);
        by_t.iter().zip(scratch.iter()).map(|(a, b)| a * b).sum()
    }

    fn component_value(&self, xi: f64, c_val: f64, by_t: &[f64], scratch: &mut Vec<f64>) -> f64 {
        let integral: f64 = self
            .layout
            .gl_nodes
            .iter()
            .zip(&self.layout.gl_weights)
            .map(|(&tq, &wq)| wq * Self::eval_poly_t(by_t, xi * tq, scratch).powi(2))
            .sum();
        c_val + xi * integral
    }

    fn c_value(&self, i: usize, cond: &Conditioning) -> f64 {
        self.layout.c_index[i]
            .iter()
            .zip(self.c_coeffs(i))
            .map(|(alpha, coef)| coef * cond.product(alpha, i))
            .sum()
    }

    fn check_len(&self, x: &[f64]) {
        assert_eq!(x.len(), self.rank(), "point dimension must equal the map rank");
    }

    /// Map value `y = τ(x)` and diagonal partials `∂_{x_i} τ_i(x) = h_i(x)²`.
    pub fn evaluate(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        self.check_len(x);
        let r = self.rank();
        let cond = Conditioning::new(x, r, self.max_degree());
        let mut scratch = Vec::new();
        let mut y = Vec::with_capacity(r);
        let mut partials = Vec::with_capacity(r);
        for i in 0..r {
            let by_t = self.h_in_t(i, &cond);
            let c_val = self.c_value(i, &cond);
            y.push(self.component_value(x[i], c_val, &by_t, &mut scratch));
            partials.push(Self::eval_poly_t(&by_t, x[i], &mut scratch).powi(2));
        }
        (y, partials)
    }

    fn log_det_from_partials(partials: &[f64]) -> Result<f64> {
        let mut acc = 0.0;
        for (i, &p) in partials.iter().enumerate() {
            if !(p > DEGENERATE_PARTIAL) {
                return Err(Error::DegenerateJacobian { component: i, partial: p });
            }
            acc += p.ln();
        }
        Ok(acc)
    }

    /// `log det ∇τ(x) = Σ_i log ∂_{x_i} τ_i(x)`.
    pub fn log_det_jacobian(&self, x: &[f64]) -> Result<f64> {
        let (_, partials) = self.evaluate(x);
        Self::log_det_from_partials(&partials)
    }

    /// Value, log-determinant and their derivatives with respect to the
    /// coefficients.
    pub fn grad_coeff(&self, x: &[f64]) -> Result<CoeffSensitivity> {
        self.check_len(x);
        let r = self.rank();
        let cond = Conditioning::new(x, r, self.max_degree());
        let mut scratch = Vec::new();
        let mut y = Vec::with_capacity(r);
        let mut partials = Vec::with_capacity(r);
        let mut dy = Vec::with_capacity(r);
        let mut dlog_det = vec![0.0; self.num_coefficients()];
        let hd = self.spec.h_degree();
        let gl = &self.layout;
        for i in 0..r {
            let by_t = self.h_in_t(i, &cond);
            let c_val = self.c_value(i, &cond);
            y.push(self.component_value(x[i], c_val, &by_t, &mut scratch));
            let h_at = Self::eval_poly_t(&by_t, x[i], &mut scratch);
            partials.push(h_at * h_at);

            let nc = gl.c_index[i].len();
            let mut local = vec![0.0; nc + gl.h_index[i].len()];
            for (k, alpha) in gl.c_index[i].iter().enumerate() {
                local[k] = cond.product(alpha, i);
            }
            // Σ_q ω_q h(s_q) ψ_k(s_q), per power k of t
            let mut weighted = vec![0.0; hd + 1];
            for (&tq, &wq) in gl.gl_nodes.iter().zip(&gl.gl_weights) {
                let s = x[i] * tq;
                let h_s = Self::eval_poly_t(&by_t, s, &mut scratch);
                for k in 0..=hd {
                    weighted[k] += wq * h_s * scratch[k];
                }
            }
            let mut psi_at = Vec::new();
            hermite_values(x[i], hd, &mut psi_at);
            let off = gl.offsets[i] + nc;
            for (k, beta) in gl.h_index[i].iter().enumerate() {
                let pre = cond.product(beta, i);
                local[nc + k] = 2.0 * x[i] * pre * weighted[beta[i]];
                dlog_det[off + k] = 2.0 * pre * psi_at[beta[i]] / h_at;
            }
            dy.push(local);
        }
        let log_det = Self::log_det_from_partials(&partials)?;
        Ok(CoeffSensitivity { y, log_det, dy, dlog_det })
    }

    /// Value, Jacobian `∇τ(x)` (lower triangular) and `∇_x log det ∇τ(x)`.
    pub fn evaluate_full(&self, x: &[f64]) -> Result<FullEvaluation> {
        self.check_len(x);
        let r = self.rank();
        let cond = Conditioning::new(x, r, self.max_degree());
        let hd = self.spec.h_degree();
        let gl = &self.layout;
        let mut scratch = Vec::new();
        let mut dscratch = Vec::new();
        let mut y = Vec::with_capacity(r);
        let mut partials = Vec::with_capacity(r);
        let mut jac = DMatrix::zeros(r, r);
        let mut grad_log_det = vec![0.0; r];
        for i in 0..r {
            let by_t = self.h_in_t(i, &cond);
            let c_val = self.c_value(i, &cond);
            y.push(self.component_value(x[i], c_val, &by_t, &mut scratch));
            hermite_values_and_derivs(x[i], hd, &mut scratch, &mut dscratch);
            let h_at: f64 = by_t.iter().zip(&scratch).map(|(a, b)| a * b).sum();
            let dh_dt: f64 = by_t.iter().zip(&dscratch).map(|(a, b)| a * b).sum();
            partials.push(h_at * h_at);
            jac[(i, i)] = h_at * h_at;
            grad_log_det[i] += 2.0 * dh_dt / h_at;

            for j in 0..i {
                let dc: f64 = gl.c_index[i]
                    .iter()
                    .zip(self.c_coeffs(i))
                    .map(|(alpha, coef)| coef * cond.product_deriv(alpha, i, j))
                    .sum();
                // ∂h/∂x_j expanded in powers of t
                let mut dby_t = vec![0.0; hd + 1];
                for (beta, coef) in gl.h_index[i].iter().zip(self.h_coeffs(i)) {
                    dby_t[beta[i]] += coef * cond.product_deriv(beta, i, j);
                }
                let mut integral = 0.0;
                for (&tq, &wq) in gl.gl_nodes.iter().zip(&gl.gl_weights) {
                    hermite_values(x[i] * tq, hd, &mut scratch);
                    let h_s: f64 = by_t.iter().zip(&scratch).map(|(a, b)| a * b).sum();
                    let dh_s: f64 = dby_t.iter().zip(&scratch).map(|(a, b)| a * b).sum();
                    integral += wq * 2.0 * h_s * dh_s;
                }
                jac[(i, j)] = dc + x[i] * integral;
                hermite_values(x[i], hd, &mut scratch);
                let dh_at: f64 = dby_t.iter().zip(&scratch).map(|(a, b)| a * b).sum();
                grad_log_det[j] += 2.0 * dh_at / h_at;
            }
        }
        let log_det = Self::log_det_from_partials(&partials)?;
        Ok(FullEvaluation { y, log_det, jacobian: jac, grad_log_det })
    }

    /// `∇_x Σ_i log h_i(x_{1:i−1}, x_i)²`.
    pub fn grad_x_log_det(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.evaluate_full(x)?.grad_log_det)
    }

    /// Solves `τ(x) = y` one component at a time.
    pub fn invert(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_len(y);
        let r = self.rank();
        let mut x = vec![0.0; r];
        let mut scratch = Vec::new();
        for i in 0..r {
            let cond = Conditioning::new(&x, i, self.max_degree());
            let by_t = self.h_in_t(i, &cond);
            let c_val = self.c_value(i, &cond);
            let target = y[i];
            let mut f = |t: f64| self.component_value(t, c_val, &by_t, &mut scratch) - target;

            let mut width = 1.0;
            let (mut lo, mut hi) = (target - width, target + width);
            let (mut flo, mut fhi) = (f(lo), f(hi));
            while flo > 0.0 || fhi < 0.0 {
                width *= 2.0;
                if flo > 0.0 {
                    lo = target - width;
                    flo = f(lo);
                }
                if fhi < 0.0 {
                    hi = target + width;
                    fhi = f(hi);
                }
                if lo.abs() > INVERSION_LIMIT || hi.abs() > INVERSION_LIMIT {
                    return Err(Error::InversionOutOfRange { component: i });
                }
            }
            if flo > fhi {
                return Err(Error::DegenerateJacobian { component: i, partial: 0.0 });
            }
            for _ in 0..BISECTION_STEPS {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if f(mid) > 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let mut xi = 0.5 * (lo + hi);
            for _ in 0..NEWTON_STEPS {
                let resid = f(xi);
                let slope = Self::eval_poly_t(&by_t, xi, &mut Vec::new()).powi(2);
                if resid == 0.0 || !(slope > DEGENERATE_PARTIAL) {
                    break;
                }
                let next = xi - resid / slope;
                if !(next >= lo && next <= hi) {
                    break;
                }
                xi = next;
            }
            x[i] = xi;
        }
        Ok(x)
    }
}
