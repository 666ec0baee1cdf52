use dacctl::comparators::{best_linear_comparator, coordinate_descent, grid_search, minimize_over_class, offline_best_dac, aggregate_surrogate};
use dacctl::config::ComparatorSpec;
use dacctl_core::lds::{CostFunction, LinearSystem, NoiseModel};
use dacctl_core::policy::{DacPolicy, PolicyClass};
use dacctl_core::rng::substream;
use dacctl_core::stability::{certify, dare_gain};
use dacctl_core::surrogate::SurrogateModel;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn noises(model: &NoiseModel, n: usize, t: usize, seed: u64) -> Vec<Vec<DVector<f64>>> {
    (0..n)
        .map(|r| {
            let mut rng = substream(seed, "noise", r as u64);
            (0..t).map(|_| model.sample(&mut rng)).collect()
        })
        .collect()
}

fn unit_costs(t: usize) -> Vec<CostFunction> {
    (0..t).map(|_| CostFunction::spherical(1.0, 1, 1, 1.0, 1.0).unwrap()).collect()
}

#[test]
fn grid_argmin_near_riccati_gain() {
    let sys = LinearSystem::scalar(0.9, 1.0);
    let model = NoiseModel::scaled_rademacher(1, 1.0).unwrap();
    let costs = unit_costs(4096);
    let ns = noises(&model, 8, 4096, 11);
    let spec = ComparatorSpec {
        refine: false,
        ..ComparatorSpec::default()
    };
    let grid = grid_search(&sys, &ns, &costs, &spec).unwrap();
    let k_dare = dare_gain(&sys, &DMatrix::identity(1, 1), &DMatrix::identity(1, 1)).unwrap()[(0, 0)];
    // scalar search interval is (a -+ (1 - min_gamma)) / b
    let cell = 2.0 * (1.0 - spec.min_gamma) / (spec.grid_points - 1) as f64;
    assert!((grid.k[0][0] - k_dare).abs() <= cell, "grid {} vs {k_dare}", grid.k[0][0]);
}

#[test]
fn grid_and_coordinate_descent_agree() {
    let model = NoiseModel::scaled_rademacher(1, 1.0).unwrap();
    let costs: Vec<_> = (0..2048)
        .map(|t| CostFunction::spherical(if t % 2 == 0 { 1.0 } else { 2.0 }, 1, 1, 1.0, 2.0).unwrap())
        .collect();
    let spec = ComparatorSpec::default();
    for (a, b) in [(0.9, 1.0), (1.1, 0.5), (-0.5, 2.0)] {
        let sys = LinearSystem::scalar(a, b);
        let ns = noises(&model, 4, 2048, 3);
        let grid = grid_search(&sys, &ns, &costs, &spec).unwrap();
        let cd = coordinate_descent(&sys, &ns, &costs, &spec).unwrap();
        let rel = (grid.mean_total - cd.mean_total).abs() / grid.mean_total;
        assert!(rel <= 5e-3, "a = {a}: grid {} cd {}", grid.mean_total, cd.mean_total);
    }
}

#[test]
fn larger_systems_use_coordinate_descent() {
    let sys = LinearSystem::new(
        DMatrix::from_row_slice(2, 2, &[0.9, 0.2, 0.0, 0.7]),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
        None,
    )
    .unwrap();
    let model = NoiseModel::sphere_uniform(2, 1.0).unwrap();
    let costs: Vec<_> = (0..512).map(|_| CostFunction::spherical(1.0, 2, 2, 1.0, 1.0).unwrap()).collect();
    let ns = noises(&model, 2, 512, 5);
    let best = best_linear_comparator(&sys, &ns, &costs, &ComparatorSpec::default()).unwrap();
    assert_eq!(best.method, dacctl::comparators::SearchMethod::CoordinateDescent);
    assert!(certify(&sys, &best.gain(), None).unwrap().gamma >= 0.02);
}

fn scalar_model(k: f64, h: usize) -> (LinearSystem, DMatrix<f64>, SurrogateModel) {
    let sys = LinearSystem::scalar(0.9, 1.0);
    let k = DMatrix::from_element(1, 1, k);
    let noise = NoiseModel::scaled_rademacher(1, 1.0).unwrap();
    let model = SurrogateModel::new(&sys, &k, &noise, h).unwrap();
    (sys, k, model)
}

fn wide_class(h: usize) -> PolicyClass {
    PolicyClass::from_radii(vec![100.0; h], 1, 1).unwrap()
}

#[test]
fn offline_dac_is_zero_at_riccati_gain() {
    let sys = LinearSystem::scalar(0.9, 1.0);
    let k = dare_gain(&sys, &DMatrix::identity(1, 1), &DMatrix::identity(1, 1)).unwrap();
    let cert = certify(&sys, &k, None).unwrap();
    let h = 10;
    let noise = NoiseModel::scaled_rademacher(1, 1.0).unwrap();
    let model = SurrogateModel::new(&sys, &k, &noise, h).unwrap();
    let class = PolicyClass::from_certificate(h, cert.kappa, cert.gamma, sys.kappa_b(), 1, 1).unwrap();
    let best = offline_best_dac(&model, &unit_costs(64), &class).unwrap();
    assert!(best.policy.vectorize().norm() <= 1e-3, "{:?}", best.policy);
}

#[test]
fn single_step_matches_linear_solve() {
    let (_, _, model) = scalar_model(0.4, 4);
    let costs = vec![CostFunction::spherical(1.5, 1, 1, 1.0, 2.0).unwrap()];
    let f = aggregate_surrogate(&model, &costs).unwrap();
    let class = wide_class(4);
    let best = minimize_over_class(&f, &class, &DacPolicy::zeros(4, 1, 1)).unwrap();
    let direct = f.quad.clone().cholesky().unwrap().solve(&(-&f.lin));
    assert!(class.contains(&DacPolicy::devectorize(&direct, 4, 1, 1).unwrap(), 0.0));
    let err = (best.policy.vectorize() - &direct).norm() / direct.norm();
    assert!(err <= 1e-6, "relative error {err}");
}

#[test]
fn restarts_reach_same_minimum() {
    let (_, _, model) = scalar_model(1.4, 6);
    let costs: Vec<_> = (0..40)
        .map(|t| CostFunction::spherical(if t % 2 == 0 { 1.0 } else { 2.0 }, 1, 1, 1.0, 2.0).unwrap())
        .collect();
    let f = aggregate_surrogate(&model, &costs).unwrap();
    let class = PolicyClass::from_radii(vec![0.3; 6], 1, 1).unwrap();
    let base = minimize_over_class(&f, &class, &DacPolicy::zeros(6, 1, 1)).unwrap();
    let mut rng = substream(1, "restarts", 0);
    for _ in 0..5 {
        let blocks = (0..6).map(|_| DMatrix::from_element(1, 1, rng.random_range(-0.3..0.3))).collect();
        let start = DacPolicy::from_blocks(blocks).unwrap();
        let other = minimize_over_class(&f, &class, &start).unwrap();
        assert!((other.mean_surrogate - base.mean_surrogate).abs() <= 1e-6);
        assert!((other.policy.vectorize() - base.policy.vectorize()).norm() <= 1e-6);
    }
}
