//! Discretized reverse-KL objective for the inner triangular map and a BFGS
//! minimizer with a strong-Wolfe line search.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::Quadrature;
use crate::targets::TargetDensity;
use crate::triangular::{MapFamilySpec, TriangularMapParams};

const MAX_LINE_SEARCH_EVALS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
    pub c1: f64,
    pub c2: f64,
    /// Weight of `½‖a − a_identity‖²` added to the objective.
    pub regularization: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            gradient_tolerance: 1e-4,
            max_iterations: 200,
            c1: 1e-4,
            c2: 0.9,
            regularization: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "line search needs 0 < c1 < c2 < 1, got c1 = {}, c2 = {}",
                self.c1, self.c2
            )));
        }
        if !(self.gradient_tolerance > 0.0) || !(self.regularization >= 0.0) {
            return Err(Error::InvalidConfig("gradient_tolerance must be positive and regularization nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerStatus {
    Converged,
    MaxIterations,
    LineSearchFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub value: f64,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: OptimizerStatus,
    pub history: Vec<IterationRecord>,
}

/// `𝒥[a] = −Σ_i w_i (log π̂(T[a](x_i)) + log det ∇T[a](x_i))` where `T[a]`
/// applies `τ` to the first `r` coordinates and the identity to the rest.
pub struct KlObjective<'a, T: TargetDensity + ?Sized> {
    target: &'a T,
    quad: &'a Quadrature,
    template: TriangularMapParams,
    regularization: f64,
}

impl<'a, T: TargetDensity + ?Sized> KlObjective<'a, T> {
    pub fn new(target: &'a T, quad: &'a Quadrature, spec: MapFamilySpec, regularization: f64) -> Result<Self> {
        if quad.dim() != target.dim() {
            return Err(Error::DimensionMismatch { expected: target.dim(), got: quad.dim() });
        }
        if spec.rank > target.dim() {
            return Err(Error::InvalidConfig(format!("rank {} exceeds dimension {}", spec.rank, target.dim())));
        }
        Ok(KlObjective {
            target,
            quad,
            template: TriangularMapParams::identity(spec)?,
            regularization,
        })
    }

    pub fn identity_coefficients(&self) -> &[f64] {
        self.template.coefficients()
    }

    pub fn params(&self, a: &[f64]) -> TriangularMapParams {
        self.template.with_coefficients(a)
    }

    /// Objective and gradient, or the first error met at any node.
    pub fn try_value_grad(&self, a: &[f64]) -> Result<(f64, Vec<f64>)> {
        let params = self.template.with_coefficients(a);
        let r = params.rank();
        let n = params.num_coefficients();
        let per_node: Vec<Result<(f64, Vec<f64>)>> = self
            .quad
            .nodes
            .par_iter()
            .map(|x| {
                let s = params.grad_coeff(&x.as_slice()[..r])?;
                let mut y = x.clone();
                y.as_mut_slice()[..r].copy_from_slice(&s.y);
                let (lp, g) = self.target.log_density_and_grad(&y)?;
                let mut grad = s.dlog_det;
                for i in 0..r {
                    let o = params.component_offset(i);
                    for (k, dyk) in s.dy[i].iter().enumerate() {
                        grad[o + k] += g[i] * dyk;
                    }
                }
                Ok((lp + s.log_det, grad))
            })
            .collect();
        let mut value = 0.0;
        let mut grad = vec![0.0; n];
        for (res, w) in per_node.into_iter().zip(&self.quad.weights) {
            let (v, g) = res?;
            value -= w * v;
            for (acc, gk) in grad.iter_mut().zip(&g) {
                *acc -= w * gk;
            }
        }
        if self.regularization > 0.0 {
            for ((acc, ak), a0) in grad.iter_mut().zip(a).zip(self.template.coefficients()) {
                value += 0.5 * self.regularization * (ak - a0).powi(2);
                *acc += self.regularization * (ak - a0);
            }
        }
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::SolverFailure("non-finite objective".into()));
        }
        Ok((value, grad))
    }

    /// Objective and gradient; any failure yields `+∞` so a line search
    /// backs off.
    pub fn value_grad(&self, a: &[f64]) -> (f64, Vec<f64>) {
        self.try_value_grad(a)
            .unwrap_or_else(|_| (f64::INFINITY, vec![0.0; a.len()]))
    }
}

pub fn kl_objective_value_grad<T: TargetDensity + ?Sized>(a: &[f64], ctx: &KlObjective<'_, T>) -> (f64, Vec<f64>) {
    ctx.value_grad(a)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(x: &[f64], alpha: f64, p: &[f64]) -> Vec<f64> {
    x.iter().zip(p).map(|(x, p)| x + alpha * p).collect()
}

struct Trial {
    alpha: f64,
    value: f64,
    grad: Vec<f64>,
    slope: f64,
}

/// Minimizer of the cubic interpolating two trial points, safeguarded to
/// the inner part of the bracket; bisection when the data are unusable.
fn interpolate(lo: &Trial, hi: &Trial) -> f64 {
    let (a, b) = (lo.alpha, hi.alpha);
    let mid = 0.5 * (a + b);
    if !hi.value.is_finite() {
        return mid;
    }
    let d1 = lo.slope + hi.slope - 3.0 * (lo.value - hi.value) / (a - b);
    let disc = d1 * d1 - lo.slope * hi.slope;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (hi.slope + d2 - d1) / (hi.slope - lo.slope + 2.0 * d2);
    let (left, right) = (a.min(b), a.max(b));
    let margin = 0.1 * (right - left);
    if t.is_finite() && t > left + margin && t < right - margin {
        t
    } else {
        mid
    }
}

/// Strong-Wolfe line search. Returns the accepted trial, or the best
/// sufficient-decrease point if curvature could not be met.
fn line_search<F: FnMut(&[f64]) -> (f64, Vec<f64>)>(
    f: &mut F,
    x: &[f64],
    value: f64,
    slope0: f64,
    p: &[f64],
    alpha0: f64,
    cfg: &OptimizerConfig,
    evals: &mut usize,
) -> Option<Trial> {
    let mut eval = |alpha: f64, evals: &mut usize| {
        *evals += 1;
        let (v, g) = f(&axpy(x, alpha, p));
        let slope = if v.is_finite() { dot(&g, p) } else { f64::NAN };
        Trial { alpha, value: v, grad: g, slope }
    };
    let armijo = |t: &Trial| t.value.is_finite() && t.value <= value + cfg.c1 * t.alpha * slope0;
    let curvature = |t: &Trial| t.slope.abs() <= -cfg.c2 * slope0;

    let mut prev = Trial { alpha: 0.0, value, grad: Vec::new(), slope: slope0 };
    let mut alpha = alpha0;
    let mut used = 0;
    let (mut lo, mut hi);
    loop {
        let t = eval(alpha, evals);
        used += 1;
        if !armijo(&t) || (used > 1 && t.value >= prev.value) {
            lo = prev;
            hi = t;
            break;
        }
        if curvature(&t) {
            return Some(t);
        }
        if t.slope >= 0.0 {
            lo = t;
            hi = prev;
            break;
        }
        if used >= MAX_LINE_SEARCH_EVALS {
            return Some(t);
        }
        alpha = 2.0 * t.alpha;
        prev = t;
    }
    // zoom
    while used < MAX_LINE_SEARCH_EVALS {
        let alpha = interpolate(&lo, &hi);
        if (hi.alpha - lo.alpha).abs() < 1e-16 * lo.alpha.abs().max(1.0) {
            break;
        }
        let t = eval(alpha, evals);
        used += 1;
        if !armijo(&t) || t.value >= lo.value {
            hi = t;
        } else {
            if curvature(&t) {
                return Some(t);
            }
            if t.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = t;
        }
    }
    (lo.alpha > 0.0).then_some(lo)
}

/// BFGS with a dense inverse-Hessian approximation.
pub fn bfgs_minimize<F: FnMut(&[f64]) -> (f64, Vec<f64>)>(
    mut f: F,
    a0: &[f64],
    config: &OptimizerConfig,
) -> Result<OptimizerResult> {
    config.validate()?;
    let n = a0.len();
    let mut x = a0.to_vec();
    let (mut value, mut grad) = f(&x);
    let mut evaluations = 1;
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::InvalidStart);
    }
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut history = Vec::new();
    let mut status = OptimizerStatus::MaxIterations;
    let mut iterations = 0;
    let mut first = true;
    loop {
        let gnorm = norm(&grad);
        if gnorm < config.gradient_tolerance {
            status = OptimizerStatus::Converged;
            break;
        }
        if iterations >= config.max_iterations {
            break;
        }
        let g = DVector::from_column_slice(&grad);
        let mut p: Vec<f64> = (-(&hinv * &g)).iter().cloned().collect();
        let mut slope0 = dot(&grad, &p);
        if !(slope0 < 0.0) {
            // lost positive definiteness; restart from steepest descent
            hinv = DMatrix::identity(n, n);
            p = grad.iter().map(|g| -g).collect();
            slope0 = -gnorm * gnorm;
            first = true;
        }
        let alpha0 = if first { (1.0 / norm(&p)).min(1.0) } else { 1.0 };
        let Some(t) = line_search(&mut f, &x, value, slope0, &p, alpha0, config, &mut evaluations) else {
            status = OptimizerStatus::LineSearchFailure;
            break;
        };
        let s: Vec<f64> = p.iter().map(|p| t.alpha * p).collect();
        let y: Vec<f64> = t.grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            let s = DVector::from_vec(s);
            let y = DVector::from_vec(y);
            if first {
                hinv = DMatrix::identity(n, n) * (sy / y.norm_squared());
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            // H ← H − ρ(H y sᵀ + s yᵀ H) + (ρ² yᵀHy + ρ) s sᵀ
            hinv -= (&hy * s.transpose() + &s * hy.transpose()) * rho;
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho);
            first = false;
        }
        x = axpy(&x, t.alpha, &p);
        value = t.value;
        grad = t.grad;
        iterations += 1;
        history.push(IterationRecord {
            iteration: iterations,
            value,
            grad_norm: norm(&grad),
            step: t.alpha,
        });
    }
    Ok(OptimizerResult {
        grad_norm: norm(&grad),
        x,
        value,
        iterations,
        evaluations,
        status,
        history,
    })
}

#[derive(Debug, Clone)]
pub struct MapFit {
    pub params: TriangularMapParams,
    pub result: OptimizerResult,
}

/// Identity-initialized BFGS on the KL objective for `π̂` (already in the
/// rotated coordinates).
pub fn compute_map<T: TargetDensity + ?Sized>(
    quad: &Quadrature,
    target: &T,
    spec: MapFamilySpec,
    config: &OptimizerConfig,
) -> Result<MapFit> {
    let objective = KlObjective::new(target, quad, spec, config.regularization)?;
    let a0 = objective.identity_coefficients().to_vec();
    let result = bfgs_minimize(|a| objective.value_grad(a), &a0, config)?;
    if result.status != OptimizerStatus::Converged {
        log::warn!(
            "map optimization stopped with {:?} after {} iterations (‖∇J‖ = {:.3e})",
            result.status,
            result.iterations,
            result.grad_norm
        );
    }
    Ok(MapFit { params: objective.params(&result.x), result })
}
