//! The greedy outer loop: one lazy layer per iteration, each built on the
//! current pullback `π_ℓ` and appended as `𝔗_{ℓ+1} = 𝔗_ℓ ∘ T_{ℓ+1}`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lazy::{ComposedMap, LazyLayer, Pullback};
use crate::linalg::SymmetricMatrix;
use crate::optimizer::{compute_map, MapFit, OptimizerConfig, OptimizerStatus};
use crate::quadrature::{Quadrature, QuadratureKind};
use crate::seed::derive_seed;
use crate::subspace::{
    compute_subspace, diagnostic_from_evaluations, evaluate_nodes, trace_bound, trace_std_error,
    variance_from_evaluations, EstimatorKind, SubspaceSelection,
};
use crate::targets::TargetDensity;
use crate::triangular::{MapFamilySpec, TriangularMapParams, DEFAULT_INTEGRATION_NODES};

fn one() -> usize {
    1
}

fn default_integration_nodes() -> usize {
    DEFAULT_INTEGRATION_NODES
}

fn default_patience() -> usize {
    3
}

/// Settings for a run of consecutive layers. The last entry of a schedule
/// repeats indefinitely.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSettings {
    pub rank: usize,
    pub degree: usize,
    pub quadrature: QuadratureKind,
    #[serde(default)]
    pub estimator: EstimatorKind,
    #[serde(default = "one")]
    pub layers: usize,
    #[serde(default = "default_integration_nodes")]
    pub integration_nodes: usize,
}

impl LayerSettings {
    pub fn new(rank: usize, degree: usize, quadrature: QuadratureKind) -> Self {
        LayerSettings {
            rank,
            degree,
            quadrature,
            estimator: EstimatorKind::default(),
            layers: 1,
            integration_nodes: DEFAULT_INTEGRATION_NODES,
        }
    }

    pub fn family(&self, rank: usize) -> MapFamilySpec {
        MapFamilySpec {
            rank,
            degree: self.degree,
            integration_nodes: self.integration_nodes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyConfig {
    /// Stop once `½ trace(H̃) < eps`.
    pub eps: f64,
    /// Maximum number of layers in the final map.
    pub ell_max: usize,
    pub schedule: Vec<LayerSettings>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Stop after this many consecutive layers that fail to lower the
    /// variance diagnostic by more than its standard error; 0 disables.
    #[serde(default = "default_patience")]
    pub stagnation_patience: usize,
}

impl GreedyConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(Error::InvalidConfig("schedule must not be empty".into()));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::InvalidConfig("eps must be nonnegative".into()));
        }
        for (k, s) in self.schedule.iter().enumerate() {
            if s.rank == 0 || s.rank > dim {
                return Err(Error::InvalidConfig(format!(
                    "schedule entry {k}: rank {} not in 1..={dim}",
                    s.rank
                )));
            }
            if s.layers == 0 || s.integration_nodes == 0 {
                return Err(Error::InvalidConfig(format!("schedule entry {k}: layers and integration_nodes must be positive")));
            }
            match s.quadrature {
                QuadratureKind::GaussHermite { nodes_per_dim: 0 } | QuadratureKind::MonteCarlo { m: 0 } => {
                    return Err(Error::InvalidConfig(format!("schedule entry {k}: empty quadrature")));
                }
                _ => {}
            }
        }
        self.optimizer.validate()
    }

    /// Settings for the layer with 0-based global index `k`.
    pub fn settings_for(&self, k: usize) -> &LayerSettings {
        let mut start = 0;
        for s in &self.schedule {
            if k < start + s.layers {
                return s;
            }
            start += s.layers;
        }
        self.schedule.last().expect("validated schedule")
    }
}

/// Convergence diagnostics of one composed map on one quadrature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub layers: usize,
    pub trace_bound: f64,
    pub trace_std_error: f64,
    pub variance_diagnostic: f64,
    pub variance_std_error: f64,
    /// Spectrum of `H̃`, descending.
    pub eigenvalues: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSummary {
    pub status: OptimizerStatus,
    pub iterations: usize,
    pub evaluations: usize,
    pub objective: f64,
    pub grad_norm: f64,
}

/// Record of the layer `T_ℓ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub rank: usize,
    pub degree: usize,
    pub quadrature_nodes: usize,
    /// Spectrum of `H̃` at `𝔗_{ℓ−1}` that selected `U_ℓ`.
    pub eigenvalues: Vec<f64>,
    /// `½ trace(H̃)` at `𝔗_{ℓ−1}`.
    pub trace_bound_before: f64,
    /// `½ trace(H̃)` at `𝔗_ℓ`.
    pub trace_bound: f64,
    pub variance_diagnostic: f64,
    pub variance_std_error: f64,
    pub optimizer: OptimizerSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GreedyStatus {
    Converged,
    MaxLayers,
    Stagnated,
    Failed,
}

#[derive(Debug, Clone)]
pub struct GreedyResult {
    pub map: ComposedMap,
    /// Diagnostics of every intermediate map, from the starting map to the
    /// final one.
    pub diagnostics: Vec<Diagnostics>,
    pub trace: Vec<IterationRecord>,
    pub status: GreedyStatus,
    /// Set when `status == Failed`.
    pub error: Option<Error>,
    pub wall_times_s: Vec<f64>,
}

impl GreedyResult {
    pub fn initial(&self) -> &Diagnostics {
        &self.diagnostics[0]
    }

    pub fn last(&self) -> &Diagnostics {
        self.diagnostics.last().expect("at least the starting map is evaluated")
    }
}

struct Evaluated {
    diagnostics: Diagnostics,
    h: SymmetricMatrix,
    quad: Quadrature,
}

fn evaluate<T: TargetDensity + ?Sized>(
    map: &ComposedMap,
    target: &T,
    settings: &LayerSettings,
    seed: u64,
    index: usize,
) -> Result<Evaluated> {
    let quad = settings
        .quadrature
        .build(map.dim(), derive_seed(seed, "quadrature", index as u64))?;
    let evals = evaluate_nodes(&quad, map, target)?;
    let diag = diagnostic_from_evaluations(&quad, &evals, settings.estimator)?;
    let var = variance_from_evaluations(&quad, &evals);
    let eig = crate::linalg::sym_eigh(&diag.h)?;
    Ok(Evaluated {
        diagnostics: Diagnostics {
            layers: map.len(),
            trace_bound: trace_bound(&diag.h),
            trace_std_error: trace_std_error(&quad, &evals),
            variance_diagnostic: var.value,
            variance_std_error: var.std_error,
            eigenvalues: eig.values.iter().cloned().collect(),
        },
        h: diag.h,
        quad,
    })
}

/// Builds one lazy layer for the residual `π_ℓ = 𝔗_ℓ^♯ π` from its
/// diagnostic matrix.
pub fn lazy_map_construction<T: TargetDensity + ?Sized>(
    map: &ComposedMap,
    target: &T,
    h: &SymmetricMatrix,
    eps_r: f64,
    r_max: usize,
    quad: &Quadrature,
    settings: &LayerSettings,
    optimizer: &OptimizerConfig,
) -> Result<(LazyLayer, MapFit, SubspaceSelection)> {
    let selection = compute_subspace(h, eps_r, r_max)?;
    let family = settings.family(selection.rank);
    // π̂(x) = π_ℓ(U x) is the pullback through 𝔗_ℓ ∘ (U ·)
    let mut rotated = map.clone();
    rotated.push(LazyLayer::new(selection.u.clone(), TriangularMapParams::identity(family)?)?)?;
    let fit = compute_map(quad, &Pullback::new(&rotated, target), family, optimizer)?;
    let layer = LazyLayer::new(selection.u.clone(), fit.params.clone())?;
    Ok((layer, fit, selection))
}

/// Runs the greedy construction from the identity map.
pub fn layers_of_lazy_maps<T: TargetDensity + ?Sized>(target: &T, config: &GreedyConfig) -> Result<GreedyResult> {
    layers_of_lazy_maps_from(target, config, ComposedMap::identity(target.dim()), |_| {})
}

/// Runs the greedy construction starting from `initial`, calling
/// `on_layer` after each completed layer. Per-layer failures end the run
/// with status `Failed` and the layers completed so far.
pub fn layers_of_lazy_maps_from<T, F>(
    target: &T,
    config: &GreedyConfig,
    initial: ComposedMap,
    mut on_layer: F,
) -> Result<GreedyResult>
where
    T: TargetDensity + ?Sized,
    F: FnMut(&IterationRecord),
{
    let d = target.dim();
    if initial.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: initial.dim() });
    }
    config.validate(d)?;
    let mut map = initial;
    let start_layers = map.len();
    let mut current = evaluate(&map, target, config.settings_for(map.len()), config.seed, map.len())?;
    let mut result = GreedyResult {
        map: map.clone(),
        diagnostics: vec![current.diagnostics.clone()],
        trace: Vec::new(),
        status: GreedyStatus::MaxLayers,
        error: None,
        wall_times_s: Vec::new(),
    };
    let mut best = current.diagnostics.variance_diagnostic;
    let mut stalls = 0;
    while map.len() < config.ell_max {
        if current.diagnostics.trace_bound < config.eps {
            result.status = GreedyStatus::Converged;
            break;
        }
        let clock = Instant::now();
        let index = map.len();
        let settings = *config.settings_for(index);
        let step = lazy_map_construction(
            &map,
            target,
            &current.h,
            0.0,
            settings.rank,
            &current.quad,
            &settings,
            &config.optimizer,
        )
        .and_then(|(layer, fit, selection)| {
            let mut next = map.clone();
            next.push(layer)?;
            let evaluated = evaluate(&next, target, config.settings_for(next.len()), config.seed, next.len())?;
            Ok((next, fit, selection, evaluated))
        });
        let (next, fit, selection, evaluated) = match step {
            Ok(v) => v,
            Err(e) => {
                log::error!("layer {} failed: {e}", index + 1);
                result.status = GreedyStatus::Failed;
                result.error = Some(Error::Iteration { layer: index + 1, source: Box::new(e) });
                break;
            }
        };
        let record = IterationRecord {
            iteration: index + 1,
            rank: selection.rank,
            degree: settings.degree,
            quadrature_nodes: current.quad.len(),
            eigenvalues: current.diagnostics.eigenvalues.clone(),
            trace_bound_before: current.diagnostics.trace_bound,
            trace_bound: evaluated.diagnostics.trace_bound,
            variance_diagnostic: evaluated.diagnostics.variance_diagnostic,
            variance_std_error: evaluated.diagnostics.variance_std_error,
            optimizer: OptimizerSummary {
                status: fit.result.status,
                iterations: fit.result.iterations,
                evaluations: fit.result.evaluations,
                objective: fit.result.value,
                grad_norm: fit.result.grad_norm,
            },
        };
        log::info!(
            "layer {}: rank {}, ½tr H̃ {:.4e} → {:.4e}, variance diagnostic {:.4e} ± {:.1e}",
            record.iteration,
            record.rank,
            record.trace_bound_before,
            record.trace_bound,
            record.variance_diagnostic,
            record.variance_std_error
        );
        on_layer(&record);
        map = next;
        current = evaluated;
        result.map = map.clone();
        result.diagnostics.push(current.diagnostics.clone());
        result.wall_times_s.push(clock.elapsed().as_secs_f64());

        let vd = record.variance_diagnostic;
        let se = record.variance_std_error;
        result.trace.push(record);
        if vd < best - se {
            best = vd;
            stalls = 0;
        } else {
            stalls += 1;
            best = best.min(vd);
        }
        if config.stagnation_patience > 0 && stalls >= config.stagnation_patience {
            result.status = GreedyStatus::Stagnated;
            break;
        }
    }
    if result.status == GreedyStatus::MaxLayers && current.diagnostics.trace_bound < config.eps {
        result.status = GreedyStatus::Converged;
    }
    debug_assert_eq!(result.map.len(), start_layers + result.trace.len());
    Ok(result)
}
