use lazymaps::greedy::{layers_of_lazy_maps, GreedyConfig, LayerSettings};
use lazymaps::lazy::{ComposedMap, LazyLayer, Pullback};
use lazymaps::linalg::SymmetricMatrix;
use lazymaps::mcmc::{debias, effective_sample_size, mh_independence};
use lazymaps::optimizer::OptimizerConfig;
use lazymaps::quadrature::QuadratureKind;
use lazymaps::seed::rng_from_seed;
use lazymaps::targets::{
    banana_target, gaussian_target, log_cox_target, simulate_beam_data, simulate_log_cox_data, BeamGeometry,
    BeamTarget, LogCoxParams, StandardNormal, BANANA_MEAN1, BANANA_VAR1, DEFAULT_N_ELEMENTS, PAPER_E_TRUE_GPA,
};
use lazymaps::triangular::{MapFamilySpec, TriangularMapParams};
use lazymaps::TargetDensity;
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal as Normal};

fn fd_gradient(t: &dyn TargetDensity, x: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        x.len(),
        (0..x.len()).map(|j| {
            let h = 1e-3 * (1.0 + x[j].abs());
            let at = |d: f64| {
                let mut y = x.clone();
                y[j] += d;
                t.log_density(&y).unwrap()
            };
            (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h)
        }),
    )
}

#[test]
fn target_gradients_match_finite_differences() {
    let beam_data = simulate_beam_data(&PAPER_E_TRUE_GPA, Some(2), DEFAULT_N_ELEMENTS, &BeamGeometry::default()).unwrap();
    let cox_data = simulate_log_cox_data(LogCoxParams::reference_values(5), 6, 4).unwrap();
    let cov = SymmetricMatrix::new(DMatrix::from_row_slice(2, 2, &[1.2, -0.3, -0.3, 0.6])).unwrap();
    let targets: Vec<Box<dyn TargetDensity>> = vec![
        Box::new(banana_target(Some(8))),
        Box::new(gaussian_target(DVector::from_column_slice(&[0.2, -0.7]), &cov).unwrap()),
        Box::new(BeamTarget::from_data(&beam_data).unwrap()),
        Box::new(log_cox_target(cox_data.params, &cox_data.obs_cells, &cox_data.counts).unwrap()),
    ];
    let mut rng = rng_from_seed(12);
    for t in &targets {
        for _ in 0..20 {
            let x = DVector::from_iterator(t.dim(), (0..t.dim()).map(|_| 0.8 * Distribution::<f64>::sample(&Normal, &mut rng)));
            let an = t.grad_log_density(&x).unwrap();
            let fd = fd_gradient(t.as_ref(), &x);
            let err = (&an - &fd).amax() / fd.amax().max(1.0);
            assert!(err < 1e-5, "dim {}: relative error {err:e}", t.dim());
        }
    }
}

fn banana_run() -> (lazymaps::GreedyResult, lazymaps::targets::BananaTarget) {
    let target = banana_target(Some(31));
    let cfg = GreedyConfig {
        eps: 0.0,
        ell_max: 8,
        schedule: vec![LayerSettings::new(1, 3, QuadratureKind::GaussHermite { nodes_per_dim: 11 })],
        optimizer: OptimizerConfig::default(),
        seed: 31,
        stagnation_patience: 0,
    };
    (layers_of_lazy_maps(&target, &cfg).unwrap(), target)
}

#[test]
fn pushed_banana_chain_recovers_conditional_mean() {
    let (res, target) = banana_run();
    let pullback = Pullback::new(&res.map, &target);
    let chain = mh_independence(&pullback, 20_000, 5, None).unwrap();
    let pushed = debias(&chain, &res.map).unwrap();
    // undo the rotation; x̃₂ has mean E[X₁²] = 0.5² + 0.8
    let x2: Vec<f64> = pushed.states.iter().map(|x| (target.rotation().transpose() * x)[1]).collect();
    let n = x2.len() as f64;
    let mean = x2.iter().sum::<f64>() / n;
    let sd = (x2.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let se = sd / effective_sample_size(&x2).unwrap().ess.sqrt();
    let expected = BANANA_MEAN1 * BANANA_MEAN1 + BANANA_VAR1;
    assert!((mean - expected).abs() < 4.0 * se, "mean {mean} vs {expected}, se {se}");
}

#[test]
fn saved_map_reproduces_pullback() {
    let (res, target) = banana_run();
    let loaded = ComposedMap::from_json(&res.map.to_json().unwrap()).unwrap();
    assert_eq!(loaded.len(), res.map.len());
    let mut rng = rng_from_seed(3);
    for _ in 0..20 {
        let z = DVector::from_iterator(2, (0..2).map(|_| Normal.sample(&mut rng)));
        assert_eq!(
            loaded.pullback_log_density(&target, &z).unwrap(),
            res.map.pullback_log_density(&target, &z).unwrap()
        );
    }
}

#[test]
fn debias_scales_reference_chain() {
    // τ(z) = 2z on both coordinates: c = 0, h ≡ √2
    let mut tau = TriangularMapParams::identity(MapFamilySpec::new(2, 1)).unwrap();
    tau.h_coeffs_mut(0)[0] = 2f64.sqrt();
    tau.h_coeffs_mut(1)[0] = 2f64.sqrt();
    let mut map = ComposedMap::identity(2);
    map.push(LazyLayer::new(DMatrix::identity(2, 2), tau).unwrap()).unwrap();
    let chain = mh_independence(&StandardNormal { dim: 2 }, 20_000, 8, None).unwrap();
    let pushed = debias(&chain, &map).unwrap();
    for j in 0..2 {
        let v = pushed.coordinate(j);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 4.0).abs() < 0.4, "coordinate {j}: variance {var}");
    }
}
