//! Diagnostic matrix `H̃`, subspace selection and the two convergence
//! diagnostics (trace bound and variance diagnostic).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lazy::ComposedMap;
use crate::linalg::{sym_eigh, SymmetricMatrix};
use crate::log_reference;
use crate::quadrature::Quadrature;
use crate::targets::TargetDensity;

/// How the quadrature weights enter `H̃`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Plain quadrature weights, i.e. an expectation under `ρ`.
    #[default]
    ReferenceBiased,
    /// Weights `∝ w_i π_ℓ(z_i)/ρ(z_i)`, normalized to one.
    SelfNormalizedImportance,
}

#[derive(Debug, Clone)]
pub struct DiagnosticMatrix {
    pub h: SymmetricMatrix,
    pub kind: EstimatorKind,
    pub sample_count: usize,
}

#[derive(Debug, Clone)]
pub struct SubspaceSelection {
    /// Columns ordered by descending eigenvalue; the first `rank` span the
    /// active subspace.
    pub u: DMatrix<f64>,
    pub rank: usize,
    pub eigenvalues: DVector<f64>,
    /// `½ Σ_{i>rank} λ_i`
    pub tail_bound: f64,
}

/// Pullback log-density and `∇ log(π_ℓ/ρ)` at every quadrature node.
#[derive(Debug, Clone)]
pub struct NodeEvaluations {
    pub log_pullback: Vec<f64>,
    pub log_reference: Vec<f64>,
    pub grad_log_ratio: Vec<DVector<f64>>,
}

/// Evaluates the pullback at all nodes in parallel; the output order matches
/// the node order.
pub fn evaluate_nodes<T: TargetDensity + ?Sized>(
    quad: &Quadrature,
    map: &ComposedMap,
    target: &T,
) -> Result<NodeEvaluations> {
    if quad.dim() != target.dim() || map.dim() != target.dim() {
        return Err(Error::DimensionMismatch { expected: target.dim(), got: quad.dim() });
    }
    let evals: Vec<Result<(f64, f64, DVector<f64>)>> = quad
        .nodes
        .par_iter()
        .map(|z| {
            let (lp, g) = map.pullback_log_density_and_grad(target, z)?;
            Ok((lp, log_reference(z), g + z))
        })
        .collect();
    let mut out = NodeEvaluations {
        log_pullback: Vec::with_capacity(quad.len()),
        log_reference: Vec::with_capacity(quad.len()),
        grad_log_ratio: Vec::with_capacity(quad.len()),
    };
    for e in evals {
        let (lp, lr, g) = e?;
        out.log_pullback.push(lp);
        out.log_reference.push(lr);
        out.grad_log_ratio.push(g);
    }
    Ok(out)
}

/// Self-normalized importance weights `∝ w_i exp(log π_ℓ − log ρ)`.
fn importance_weights(quad: &Quadrature, evals: &NodeEvaluations) -> Result<Vec<f64>> {
    let logw: Vec<f64> = quad
        .weights
        .iter()
        .zip(evals.log_pullback.iter().zip(&evals.log_reference))
        .map(|(w, (lp, lr))| w.ln() + lp - lr)
        .collect();
    let max = logw.iter().cloned().filter(|v| !v.is_nan()).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    let raw: Vec<f64> = logw.iter().map(|v| if v.is_nan() { 0.0 } else { (v - max).exp() }).collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// `H̃ = Σ_i ω_i g_i g_iᵀ` from precomputed node evaluations.
pub fn diagnostic_from_evaluations(
    quad: &Quadrature,
    evals: &NodeEvaluations,
    kind: EstimatorKind,
) -> Result<DiagnosticMatrix> {
    let weights = match kind {
        EstimatorKind::ReferenceBiased => quad.weights.clone(),
        EstimatorKind::SelfNormalizedImportance => importance_weights(quad, evals)?,
    };
    let d = quad.dim();
    let m = quad.len();
    let mut g = DMatrix::zeros(d, m);
    for (i, (gi, w)) in evals.grad_log_ratio.iter().zip(&weights).enumerate() {
        g.column_mut(i).copy_from(&(gi * w.sqrt()));
    }
    let h = &g * g.transpose();
    Ok(DiagnosticMatrix {
        h: SymmetricMatrix::new(h)?,
        kind,
        sample_count: m,
    })
}

/// `H̃` for the pullback `π_ℓ = 𝔗_ℓ^♯ π` on the given quadrature.
pub fn compute_h<T: TargetDensity + ?Sized>(
    quad: &Quadrature,
    map: &ComposedMap,
    target: &T,
    kind: EstimatorKind,
) -> Result<DiagnosticMatrix> {
    let evals = evaluate_nodes(quad, map, target)?;
    diagnostic_from_evaluations(quad, &evals, kind)
}

/// `r = min(r_max, smallest r ≥ 1 with ½ Σ_{i>r} λ_i ≤ eps)`.
pub fn compute_subspace(h: &SymmetricMatrix, eps: f64, r_max: usize) -> Result<SubspaceSelection> {
    if r_max == 0 {
        return Err(Error::InvalidConfig("r_max must be at least 1".into()));
    }
    let eig = sym_eigh(h)?;
    let d = h.dim();
    // tails[r] = ½ Σ_{i≥r} λ_i, negative rounding noise clipped
    let mut tails = vec![0.0; d + 1];
    for i in (0..d).rev() {
        tails[i] = tails[i + 1] + 0.5 * eig.values[i].max(0.0);
    }
    let first_ok = (0..=d).find(|&r| tails[r] <= eps).unwrap_or(d);
    let rank = first_ok.max(1).min(r_max).min(d);
    Ok(SubspaceSelection {
        u: eig.vectors,
        rank,
        eigenvalues: eig.values,
        tail_bound: tails[rank],
    })
}

/// `½ trace(H)`.
pub fn trace_bound(h: &SymmetricMatrix) -> f64 {
    0.5 * h.trace()
}

/// Variance diagnostic with an estimate of its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceDiagnostic {
    pub value: f64,
    pub std_error: f64,
}

/// `½ Var_w[log ρ − log π_ℓ]` over the nodes.
pub fn variance_from_evaluations(quad: &Quadrature, evals: &NodeEvaluations) -> VarianceDiagnostic {
    let v: Vec<f64> = evals
        .log_reference
        .iter()
        .zip(&evals.log_pullback)
        .map(|(lr, lp)| lr - lp)
        .collect();
    let w = &quad.weights;
    let mean: f64 = v.iter().zip(w).map(|(v, w)| w * v).sum();
    let sq: Vec<f64> = v.iter().map(|v| (v - mean).powi(2)).collect();
    let var: f64 = sq.iter().zip(w).map(|(s, w)| w * s).sum();
    let var_of_sq: f64 = sq.iter().zip(w).map(|(s, w)| w * (s - var).powi(2)).sum();
    let sum_w2: f64 = w.iter().map(|w| w * w).sum();
    VarianceDiagnostic {
        value: 0.5 * var,
        std_error: 0.5 * (var_of_sq * sum_w2).sqrt(),
    }
}

/// Standard error of `½ trace(H̃) = ½ Σ_i ω_i ‖g_i‖²` under the quadrature
/// weights, treating the nodes as independent draws.
pub fn trace_std_error(quad: &Quadrature, evals: &NodeEvaluations) -> f64 {
    let s: Vec<f64> = evals.grad_log_ratio.iter().map(|g| 0.5 * g.norm_squared()).collect();
    let w = &quad.weights;
    let mean: f64 = s.iter().zip(w).map(|(s, w)| w * s).sum();
    let var: f64 = s.iter().zip(w).map(|(s, w)| w * (s - mean).powi(2)).sum();
    let sum_w2: f64 = w.iter().map(|w| w * w).sum();
    (var * sum_w2).sqrt()
}

pub fn variance_diagnostic<T: TargetDensity + ?Sized>(
    quad: &Quadrature,
    map: &ComposedMap,
    target: &T,
) -> Result<VarianceDiagnostic> {
    let evals = evaluate_nodes(quad, map, target)?;
    Ok(variance_from_evaluations(quad, &evals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{gauss_hermite_tensor, monte_carlo};
    use crate::targets::{gaussian_target, StandardNormal};
    use approx::assert_abs_diff_eq;

    struct Shifted<T> {
        inner: T,
        shift: f64,
    }

    impl<T: TargetDensity> TargetDensity for Shifted<T> {
        fn dim(&self) -> usize {
            self.inner.dim()
        }
        fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
            Ok(self.inner.log_density(x)? + self.shift)
        }
        fn grad_log_density(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
            self.inner.grad_log_density(x)
        }
    }

    #[test]
    fn reference_target_has_zero_h() {
        let q = monte_carlo(50, 3, 1);
        let t = StandardNormal { dim: 3 };
        for kind in [EstimatorKind::ReferenceBiased, EstimatorKind::SelfNormalizedImportance] {
            let h = compute_h(&q, &ComposedMap::identity(3), &t, kind).unwrap();
            assert_eq!(h.h.matrix().amax(), 0.0);
        }
    }

    #[test]
    fn shifted_gaussian_gives_outer_product() {
        let t = gaussian_target(DVector::from_column_slice(&[1.0, 0.0]), &SymmetricMatrix::from_diagonal(&[1.0, 1.0]).unwrap()).unwrap();
        let q = monte_carlo(20, 2, 3);
        let h = compute_h(&q, &ComposedMap::identity(2), &t, EstimatorKind::ReferenceBiased).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!((h.h.matrix() - expected).amax() < 1e-14);
    }

    #[test]
    fn anisotropic_gaussian_closed_form() {
        let t = gaussian_target(DVector::zeros(2), &SymmetricMatrix::from_diagonal(&[4.0, 1.0]).unwrap()).unwrap();
        let q = gauss_hermite_tensor(10, 2).unwrap();
        let h = compute_h(&q, &ComposedMap::identity(2), &t, EstimatorKind::ReferenceBiased).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[9.0 / 16.0, 0.0, 0.0, 0.0]);
        assert!((h.h.matrix() - expected).amax() < 1e-10);
    }

    #[test]
    fn subspace_rank_selection() {
        let h = SymmetricMatrix::from_diagonal(&[4.0, 1.0, 0.01]).unwrap();
        let s = compute_subspace(&h, 0.1, 3).unwrap();
        assert_eq!(s.rank, 2);
        assert_abs_diff_eq!(s.tail_bound, 0.005, epsilon = 1e-15);
        assert_eq!(compute_subspace(&h, 0.0, 2).unwrap().rank, 2);
        let zero = SymmetricMatrix::zeros(3);
        assert_eq!(compute_subspace(&zero, 0.1, 3).unwrap().rank, 1);
        assert!(compute_subspace(&h, 0.1, 0).is_err());
        assert_eq!(s.u.column(0).amax(), 1.0);
    }

    #[test]
    fn trace_bounds() {
        let h = SymmetricMatrix::from_diagonal(&[4.0, 1.0, 0.01]).unwrap();
        assert_abs_diff_eq!(trace_bound(&h), 2.505, epsilon = 1e-15);
        assert_eq!(trace_bound(&SymmetricMatrix::zeros(2)), 0.0);
        let q = monte_carlo(5, 4, 2);
        let t = gaussian_target(DVector::from_column_slice(&[0.5, 0.1, -0.3, 1.0]), &SymmetricMatrix::from_diagonal(&[2.0, 1.0, 0.5, 3.0]).unwrap()).unwrap();
        let h = compute_h(&q, &ComposedMap::identity(4), &t, EstimatorKind::ReferenceBiased).unwrap();
        let eig = sym_eigh(&h.h).unwrap();
        assert_abs_diff_eq!(trace_bound(&h.h), 0.5 * eig.values.sum(), epsilon = 1e-10);
    }

    #[test]
    fn variance_diagnostic_examples() {
        let q = gauss_hermite_tensor(8, 2).unwrap();
        let id = ComposedMap::identity(2);
        let v = variance_diagnostic(&q, &id, &StandardNormal { dim: 2 }).unwrap();
        assert_abs_diff_eq!(v.value, 0.0, epsilon = 1e-14);

        let t = gaussian_target(DVector::from_column_slice(&[1.0, 0.0]), &SymmetricMatrix::from_diagonal(&[1.0, 1.0]).unwrap()).unwrap();
        let v = variance_diagnostic(&q, &id, &t).unwrap();
        assert_abs_diff_eq!(v.value, 0.5, epsilon = 1e-12);

        let shifted = Shifted { inner: t.clone(), shift: 123.4 };
        let w = variance_diagnostic(&q, &id, &shifted).unwrap();
        assert_abs_diff_eq!(v.value, w.value, epsilon = 1e-12);
    }

    #[test]
    fn monte_carlo_rank_bound() {
        let q = monte_carlo(3, 6, 8);
        let t = gaussian_target(DVector::zeros(6), &SymmetricMatrix::from_diagonal(&[0.5, 2.0, 3.0, 0.7, 1.5, 4.0]).unwrap()).unwrap();
        let h = compute_h(&q, &ComposedMap::identity(6), &t, EstimatorKind::ReferenceBiased).unwrap();
        let eig = sym_eigh(&h.h).unwrap();
        let tr = h.h.trace();
        for k in 3..6 {
            assert!(eig.values[k].abs() <= 1e-10 * tr);
        }
        assert!(eig.values.iter().all(|&v| v >= -1e-10 * tr));
    }

    #[test]
    fn trace_bound_dominates_gaussian_kl() {
        // π = N(0, diag(σ², 1)): ∇log(π/ρ) = (1 − 1/σ²) x₁ e₁, so tr H = (1 − 1/σ²)² σ² under π
        for s2 in [0.25f64, 4.0] {
            let kl = 0.5 * (s2 - 1.0 - s2.ln());
            let h = SymmetricMatrix::from_diagonal(&[(1.0 - 1.0 / s2).powi(2) * s2, 0.0]).unwrap();
            assert!(kl <= trace_bound(&h), "σ² = {s2}: {kl} > {}", trace_bound(&h));
        }
    }

    #[test]
    fn importance_weights_match_target_expectation() {
        // π = N(0.3, 1): weights ∝ π/ρ turn the ρ-rule into a π-expectation, H̃ = m²
        let t = gaussian_target(DVector::from_column_slice(&[0.3]), &SymmetricMatrix::from_diagonal(&[1.0]).unwrap()).unwrap();
        let q = gauss_hermite_tensor(30, 1).unwrap();
        let h = compute_h(&q, &ComposedMap::identity(1), &t, EstimatorKind::SelfNormalizedImportance).unwrap();
        assert_abs_diff_eq!(h.h.matrix()[(0, 0)], 0.09, epsilon = 1e-12);
    }

    #[test]
    fn thread_count_does_not_change_h() {
        let t = gaussian_target(DVector::from_column_slice(&[0.2, -0.4, 0.1]), &SymmetricMatrix::from_diagonal(&[2.0, 0.5, 1.5]).unwrap()).unwrap();
        let q = monte_carlo(200, 3, 4);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| compute_h(&q, &ComposedMap::identity(3), &t, EstimatorKind::ReferenceBiased).unwrap())
        };
        assert_eq!(run(1).h, run(4).h);
    }
}
