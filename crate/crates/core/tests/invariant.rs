use std::f64::consts::PI;

use kolmo_core::density::{normalize_to_mass, ClosedForm};
use kolmo_core::invariant::{
    asymptotic_limit, extract_canonical_systems, fit_combination, inner_l1_distance, invariance_residual_generator,
    invariance_residual_semigroup, test_battery, CanonicalBundle, InvariantSystem, SystemProvenance,
};
use kolmo_core::operator::presets;
use kolmo_core::solver::{DiscreteOperator, EvolveOptions};
use kolmo_core::{parse, Boundary, Grid, Scope, VectorField};

fn line(l: f64, n: usize) -> Grid {
    Grid::new(1, l, n, Boundary::Neumann).unwrap()
}

fn bundle(spec: &kolmo_core::OperatorSpec, g: &Grid, horizon: f64) -> CanonicalBundle {
    let op = DiscreteOperator::assemble(spec, g).unwrap();
    let opts = EvolveOptions { dt: 1e-2, ..Default::default() };
    extract_canonical_systems(&op, &[0.0], horizon, &opts).unwrap()
}

fn case1_canonical(g: &Grid) -> Vec<InvariantSystem> {
    (0..2)
        .map(|i| {
            let mut e = vec![0.0; 2];
            e[i] = 1.0;
            InvariantSystem::from_profile(g, &normalize_to_mass(&presets::case1(), g, &e).unwrap()).unwrap()
        })
        .collect()
}

#[test]
fn decoupled_ornstein_uhlenbeck_gives_gaussians() {
    let g = line(8.0, 513);
    let b = bundle(&presets::decoupled_ou(), &g, 20.0);
    let gauss: Vec<f64> = g
        .points()
        .iter()
        .map(|p| (-p[0] * p[0] / 2.0).exp() / (2.0 * PI).sqrt())
        .collect();
    for i in 0..2 {
        let mut h = vec![vec![0.0; g.len()]; 2];
        h[i] = gauss.clone();
        let exact = InvariantSystem::new(&g, h, SystemProvenance::Manual).unwrap();
        let d = inner_l1_distance(&g, &b.rows[i], &exact).unwrap();
        assert!(d <= 5e-2, "row {i}: {d}");
        for j in 0..2 {
            let target = if i == j { 1.0 } else { 0.0 };
            assert!((b.masses[i][j] - target).abs() <= 1e-10);
        }
    }
}

#[test]
fn case1_bundle_matches_closed_form() {
    let g = line(8.0, 513);
    let b = bundle(&presets::case1(), &g, 20.0);
    assert_eq!(b.x0, vec![0.0]);
    let exact = case1_canonical(&g);
    for i in 0..2 {
        let d = inner_l1_distance(&g, &b.rows[i], &exact[i]).unwrap();
        assert!(d <= 5e-2, "row {i}: {d}");
        for j in 0..2 {
            let target = if i == j { 1.0 } else { 0.0 };
            assert!((b.masses[i][j] - target).abs() <= 1e-3, "{:?}", b.masses);
        }
        assert!(b.mass_drift[i] <= 1e-8, "{}", b.mass_drift[i]);
        // doubling the horizon from T/2 to T shrinks the tail diagnostic
        assert!(b.tail_diagnostic_half[i] >= 1.5 * b.tail_diagnostic[i], "{:?} {:?}", b.tail_diagnostic_half, b.tail_diagnostic);
    }
    // the closed form is the canonical profile at x0 = 0
    let e = (-0.5f64).exp();
    let cf = ClosedForm::Case1 { a: [e / 2.0, e / 2.0] };
    let x = 0.7;
    let v = cf.eval(x);
    assert!((v[0] - e * x.cosh()).abs() < 1e-12 && (v[1] + e * x.sinh()).abs() < 1e-12);
}

#[test]
fn generator_residual_separates_invariant_from_perturbed() {
    let g = line(8.0, 513);
    let spec = presets::case1();
    let exact = case1_canonical(&g);
    let battery = test_battery(&g, 2, 12, 7).unwrap();
    assert_eq!(battery.len(), 12);
    let r = invariance_residual_generator(&spec, &g, &exact[0], &battery).unwrap();
    assert!(r.worst <= 1e-6, "{}", r.worst);

    let peak = exact[0].h[0].iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut h = exact[0].h.clone();
    for (n, p) in g.points().iter().enumerate() {
        h[0][n] += 0.1 * peak * (-(p[0] - 0.5).powi(2)).exp();
    }
    let perturbed = InvariantSystem::new(&g, h, SystemProvenance::Manual).unwrap();
    let rp = invariance_residual_generator(&spec, &g, &perturbed, &battery).unwrap();
    assert!(rp.worst >= 10.0 * r.worst.max(1e-9), "{} vs {}", rp.worst, r.worst);

    // the scalar invariant measure alone is not invariant once B couples
    let gauss: Vec<f64> = g.points().iter().map(|p| (-p[0] * p[0] / 2.0).exp() / (2.0 * PI).sqrt()).collect();
    let lone = InvariantSystem::new(&g, vec![gauss, vec![0.0; g.len()]], SystemProvenance::Manual).unwrap();
    let rl = invariance_residual_generator(&spec, &g, &lone, &battery).unwrap();
    assert!(rl.worst > 1e-3, "{}", rl.worst);
}

#[test]
fn semigroup_residual_agrees_with_generator_residual() {
    let g = line(8.0, 257);
    let spec = presets::case1();
    let op = DiscreteOperator::assemble(&spec, &g).unwrap();
    let exact = case1_canonical(&g);
    let battery = test_battery(&g, 2, 10, 3).unwrap();
    let fields: Vec<VectorField> = battery
        .iter()
        .map(|f| VectorField::from_exprs(&g, f, spec.params()).unwrap())
        .collect();
    let opts = EvolveOptions { dt: 1e-2, ..Default::default() };
    let r = invariance_residual_semigroup(&op, &exact[1], &fields, 1.0, &opts).unwrap();
    assert!(r.worst <= 1e-4, "{}", r.worst);

    let gauss: Vec<f64> = g.points().iter().map(|p| (-p[0] * p[0] / 2.0).exp() / (2.0 * PI).sqrt()).collect();
    let lone = InvariantSystem::new(&g, vec![gauss, vec![0.0; g.len()]], SystemProvenance::Manual).unwrap();
    let rs = invariance_residual_semigroup(&op, &lone, &fields, 1.0, &opts).unwrap();
    let rg = invariance_residual_generator(&spec, &g, &lone, &battery).unwrap();
    assert!(rs.worst > 100.0 * r.worst && rg.worst > 1e-3);
}

#[test]
fn fits_on_the_bundle() {
    let g = line(8.0, 513);
    let b = bundle(&presets::case1(), &g, 20.0);
    for i in 0..2 {
        let fit = fit_combination(&g, &b, &b.rows[i]).unwrap();
        for (k, c) in fit.coefficients.iter().enumerate() {
            let target = if k == i { 1.0 } else { 0.0 };
            assert!((c - target).abs() <= 1e-8, "{:?}", fit.coefficients);
        }
    }
    let ode = InvariantSystem::from_profile(&g, &normalize_to_mass(&presets::case1(), &g, &[2.0, 3.0]).unwrap()).unwrap();
    let fit = fit_combination(&g, &b, &ode).unwrap();
    assert!((fit.coefficients[0] - 2.0).abs() <= 1e-2, "{:?}", fit);
    assert!((fit.coefficients[1] - 3.0).abs() <= 1e-2, "{:?}", fit);
    assert!(fit.reliable, "{fit:?}");
}

#[test]
fn case1_long_time_limit() {
    let g = line(8.0, 513);
    let spec = presets::case1();
    let op = DiscreteOperator::assemble(&spec, &g).unwrap();
    let f = VectorField::from_exprs(
        &g,
        &[parse("cos(x)", &Scope::new(1)).unwrap(), parse("0", &Scope::new(1)).unwrap()],
        spec.params(),
    )
    .unwrap();
    let opts = EvolveOptions { dt: 1e-2, ..Default::default() };
    let r = asymptotic_limit(&op, &case1_canonical(&g), &f, &[vec![0.0]], 10.0, &opts).unwrap();
    let ell = (-0.5f64).exp() * 1f64.cos();
    assert!((r.predicted[0] - ell).abs() <= 1e-6, "{:?}", r.predicted);
    assert!((ell - 0.3277099).abs() < 1e-7);
    assert!((r.probes[0].at_full[0] - ell).abs() <= 1e-2, "{:?}", r.probes);
    assert!(r.probes[0].error_full <= 0.5 * r.probes[0].error_half, "{:?}", r.probes);
}

#[test]
fn csv_exports() {
    let g = line(4.0, 33);
    let b = bundle(&presets::decoupled_ou(), &g, 1.0);
    let csv = b.to_csv(&g);
    assert!(csv.starts_with("x1,h11,h12,h21,h22\n"));
    assert_eq!(csv.lines().count(), 34);
    assert!(b.mass_table_csv().starts_with("i,mass_1,mass_2\n"));
}
