use meanfield::fixed_point::{
    algorithm_i, algorithm_i_with, basin_scan, certify, default_recipes, initial_vector, metastability_report,
    perturbation_returns, AlgorithmOptions, CommutationConfig, LimitKind, Recipe, ScanConfig, Stability,
};
use meanfield::matrix_analytic::{qbd_mean_drift, rg_factorize, stationary_from_rg};
use meanfield::model::{BistableParams, GeneratorSpec, StructuredBlocks, SupermarketParams};
use meanfield::state_space::{l1_distance, BlockGenerator, LevelPhaseLayout, ProbabilityVector};
use nalgebra::DMatrix;

fn recipe_seeds(layout: &LevelPhaseLayout) -> Vec<(String, ProbabilityVector)> {
    default_recipes()
        .into_iter()
        .map(|r| (r.to_string(), initial_vector(&r, layout).unwrap()))
        .collect()
}

#[test]
fn mm1_from_every_recipe() {
    let spec = GeneratorSpec::birth_death(1.0, 2.0, 200).unwrap();
    for recipe in ["uniform:4", "geometric:0.5", "poisson:1"] {
        let q = initial_vector(&recipe.parse().unwrap(), spec.layout()).unwrap();
        let r = algorithm_i(&spec, &q, 1e-12, 100).unwrap();
        assert!(r.converged && r.certificate.pass, "{recipe}");
        for k in 0..=40 {
            let exact = 0.5 * 0.5f64.powi(k as i32);
            assert!((r.pi.as_slice()[k] - exact).abs() <= 1e-8, "{recipe} k={k}");
        }
    }
}

#[test]
fn linear_iteration_matches_direct_stationary_vector() {
    let layout = LevelPhaseLayout::uniform(3, 2).unwrap();
    let d = layout.dim();
    let q = DMatrix::from_fn(d, d, |i, j| if i == j { 0.0 } else { ((i * 5 + j * 3) % 7) as f64 * 0.3 + 0.1 });
    let g = BlockGenerator::from_off_diagonal(layout.clone(), q).unwrap();
    let spec = GeneratorSpec::linear(&g);
    let direct = stationary_from_rg(&rg_factorize(&g).unwrap()).unwrap();
    for recipe in default_recipes() {
        let r = algorithm_i(&spec, &initial_vector(&recipe, &layout).unwrap(), 1e-12, 10).unwrap();
        assert_eq!(r.iterations, 1);
        assert!(l1_distance(&r.pi, &direct).unwrap() < 1e-13);
    }
}

#[test]
fn supermarket_iteration_matches_recursion() {
    let spec = GeneratorSpec::supermarket(SupermarketParams { d: 2, lambda: 0.9, mu: 1.0 }, 32).unwrap();
    let q = initial_vector(&Recipe::Geometric(0.5), spec.layout()).unwrap();
    let r = algorithm_i(&spec, &q, 1e-12, 5000).unwrap();
    assert!(r.converged, "{:?}", r.notes);
    assert!(r.residual <= 1e-9);
    // s_k = λ s_{k-1}^2 from s_0 = 1
    let mut s = 1.0f64;
    for k in 1..=8 {
        s = 0.9 * s * s;
        assert!((r.pi.tail_mass(k).unwrap() - s).abs() <= 1e-6, "k={k}");
    }
}

#[test]
fn certificate_needs_small_drift() {
    let spec = GeneratorSpec::birth_death(1.0, 2.0, 200).unwrap();
    let u = initial_vector(&Recipe::Uniform(4), spec.layout()).unwrap();
    assert!(!certify(&spec, &u, 1e-8, 1e-6).pass);
    let r = algorithm_i(&spec, &u, 1e-12, 10).unwrap();
    assert!(certify(&spec, &r.pi, 1e-8, 1e-6).pass);
}

#[test]
fn damping_reaches_the_same_point() {
    let spec = GeneratorSpec::supermarket(SupermarketParams { d: 2, lambda: 0.7, mu: 1.0 }, 20).unwrap();
    let q = initial_vector(&Recipe::Uniform(3), spec.layout()).unwrap();
    let plain = algorithm_i(&spec, &q, 1e-12, 5000).unwrap();
    let opts = AlgorithmOptions {
        damping: 0.5,
        ..AlgorithmOptions::default()
    };
    let damped = algorithm_i_with(&spec, &q, 1e-12, 5000, &opts).unwrap();
    assert!(plain.converged && damped.converged);
    assert!(l1_distance(&plain.pi, &damped.pi).unwrap() < 1e-9);
}

#[test]
fn linear_scan_has_one_stable_limit() {
    let spec = GeneratorSpec::birth_death(1.0, 2.0, 15).unwrap();
    let cfg = ScanConfig {
        t_transient: 200.0,
        t_window: 20.0,
        ..ScanConfig::default()
    };
    let scan = basin_scan(&spec, &recipe_seeds(spec.layout()), &cfg).unwrap();
    assert_eq!(scan.limits.len(), 1);
    assert_eq!(scan.limits[0].stability, Stability::LocallyStable);
    assert!(!scan.metastable);
    let commutation = CommutationConfig {
        n_small: 20,
        t_long: 3000.0,
        burn_in: 50.0,
        n_large: 2000,
        t_large: 30.0,
        replications: 10,
        seed: 4,
    };
    let m = metastability_report(&spec, &scan, Some(&commutation)).unwrap();
    assert_eq!(m.count_stable, 1);
    let c = m.limit_commutation.unwrap();
    assert!(c.pass, "max z {}", c.max_z);
}

#[test]
fn supermarket_scan_has_one_limit() {
    let spec = GeneratorSpec::supermarket(SupermarketParams { d: 2, lambda: 0.9, mu: 1.0 }, 20).unwrap();
    let scan = basin_scan(&spec, &recipe_seeds(spec.layout()), &ScanConfig::default()).unwrap();
    let fixed: Vec<_> = scan.limits.iter().filter(|l| l.kind == LimitKind::FixedPoint).collect();
    assert_eq!(fixed.len(), 1, "{:?}", scan.seeds);
    assert_eq!(scan.limits.len(), 1);
}

#[test]
fn bistable_scan_is_metastable() {
    let spec = GeneratorSpec::bistable(BistableParams::default(), 20).unwrap();
    let cfg = ScanConfig::default();
    let scan = basin_scan(&spec, &recipe_seeds(spec.layout()), &cfg).unwrap();
    let stable: Vec<_> = scan.stable_limits().collect();
    assert_eq!(stable.len(), 2, "{:?}", scan.seeds);
    assert!(scan.metastable);
    for l in &stable {
        assert!(l.drift_norm <= cfg.epsilon);
        assert!(l.certificate.as_ref().unwrap().pass);
        assert_eq!(perturbation_returns(&spec, &l.point, 10, &cfg, 99).unwrap(), 10);
    }
    let m = metastability_report(&spec, &scan, None).unwrap();
    assert_eq!(m.count_stable, 2);
    assert!(m.separations[0].2 > 0.1);
    let t1: Vec<f64> = stable.iter().map(|l| l.point.tail_mass(1).unwrap()).collect();
    assert!(t1.iter().any(|t| (t - 0.11).abs() < 0.03), "{t1:?}");
    assert!(t1.iter().any(|t| (t - 0.79).abs() < 0.03), "{t1:?}");
}

#[test]
fn reports_round_trip_through_json() {
    let spec = GeneratorSpec::birth_death(1.0, 2.0, 10).unwrap();
    let q = initial_vector(&Recipe::Geometric(0.3), spec.layout()).unwrap();
    let r = algorithm_i(&spec, &q, 1e-12, 10).unwrap();
    let text = serde_json::to_string(&r).unwrap();
    let back: meanfield::fixed_point::FixedPointReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, r);
}

#[test]
fn unstable_qbd_piles_up_at_the_top() {
    let spec = qbd(2.0, 1.0, 200);
    let drift = qbd_mean_drift(&spec, &initial_vector(&Recipe::Uniform(1), spec.layout()).unwrap()).unwrap();
    assert!(!drift.stable);
    let q = initial_vector(&Recipe::Geometric(0.5), spec.layout()).unwrap();
    let r = algorithm_i(&spec, &q, 1e-12, 50).unwrap();
    assert!(r.truncation_flag);
    assert!(r.boundary_mass > 0.4);
    // the same chain given as a plain finite generator is not flagged
    let finite = GeneratorSpec::birth_death(2.0, 1.0, 200).unwrap();
    assert!(!algorithm_i(&finite, &q, 1e-12, 50).unwrap().truncation_flag);
}

#[test]
fn stable_qbd_is_not_flagged() {
    let spec = qbd(1.0, 2.0, 200);
    let q = initial_vector(&Recipe::Uniform(4), spec.layout()).unwrap();
    assert!(qbd_mean_drift(&spec, &q).unwrap().stable);
    let r = algorithm_i(&spec, &q, 1e-12, 50).unwrap();
    assert!(r.converged && !r.truncation_flag);
}

fn qbd(up: f64, down: f64, top: usize) -> GeneratorSpec {
    let m = |v: f64| DMatrix::from_element(1, 1, v);
    let blocks = StructuredBlocks::constant(&[m(up), m(0.0), m(down)], &[m(up), m(0.0), m(down)]);
    GeneratorSpec::qbd(LevelPhaseLayout::uniform(top, 1).unwrap(), blocks).unwrap()
}
