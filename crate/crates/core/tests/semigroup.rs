use std::f64::consts::PI;

use kolmo_core::operator::{apply_vector_operator, presets};
use kolmo_core::solver::{
    cesaro_average, duhamel_check, evolve, kernel_row, resolvent, DiscreteOperator, EvolveOptions, Scheme,
    Startup, Trajectory,
};
use kolmo_core::{Boundary, Grid, VectorField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn periodic(n: usize) -> Grid {
    Grid::with_axes(&[PI], &[PI], &[n], Boundary::Periodic).unwrap()
}

fn eigenfield(g: &Grid) -> VectorField {
    let x: Vec<f64> = g.points().iter().map(|p| p[0]).collect();
    VectorField::from_components(&[
        x.iter().map(|v| v.cos()).collect(),
        x.iter().map(|v| 2.0 * v.sin() + v.cos()).collect(),
    ])
    .unwrap()
}

fn relative_error_at_one(n: usize, dt: f64) -> f64 {
    let g = periodic(n);
    let op = DiscreteOperator::assemble(&presets::periodic_growth(), &g).unwrap();
    let f = eigenfield(&g);
    let opts = EvolveOptions { dt, snapshot_every: 100_000, ..Default::default() };
    let u = evolve(&op, &f, 1.0, &opts).unwrap();
    let exact = f.scaled(1f64.exp());
    u.last().max_abs_diff(&exact) / exact.norm_inf()
}

#[test]
fn exponential_growth_is_reproduced() {
    let err = relative_error_at_one(256, 1e-3);
    assert!(err <= 1e-3, "{err}");
    let ratio = relative_error_at_one(128, 1e-3) / err;
    assert!((3.5..=4.5).contains(&ratio), "{ratio}");
}

#[test]
fn crank_nicolson_is_second_order_in_time() {
    let g = periodic(64);
    let op = DiscreteOperator::assemble(&presets::periodic_growth(), &g).unwrap();
    let f = eigenfield(&g);
    let run = |dt: f64| {
        let opts = EvolveOptions { dt, snapshot_every: 1_000_000, startup: Startup::Never, ..Default::default() };
        evolve(&op, &f, 1.0, &opts).unwrap().last().clone()
    };
    let reference = run(0.1 / 64.0);
    let e1 = run(0.1).max_abs_diff(&reference);
    let e2 = run(0.05).max_abs_diff(&reference);
    let ratio = e1 / e2;
    assert!((3.5..=4.5).contains(&ratio), "{ratio}");
}

#[test]
fn operator_reproduces_eigenfunction() {
    let g = periodic(256);
    let f = eigenfield(&g);
    let af = apply_vector_operator(&presets::periodic_growth(), &g, &f).unwrap();
    let h = g.spacing(0);
    assert!(af.max_abs_diff(&f) <= 3.0 * h * h);
}

#[test]
fn constants_are_preserved() {
    for (spec, g) in [
        (presets::case1(), Grid::new(1, 8.0, 257, Boundary::Neumann).unwrap()),
        (presets::case2(), Grid::new(1, 8.0, 257, Boundary::Neumann).unwrap()),
        (presets::periodic_growth(), periodic(64)),
    ] {
        let op = DiscreteOperator::assemble(&spec, &g).unwrap();
        let f = VectorField::constant(g.len(), &[1.0, 0.0]);
        let opts = EvolveOptions { dt: 1e-2, snapshot_every: 1, ..Default::default() };
        let traj = evolve(&op, &f, 1.0, &opts).unwrap();
        for s in &traj.states {
            assert!(s.max_abs_diff(&f) < 1e-13);
        }
    }
}

#[test]
fn mehler_oracle_for_linear_and_quadratic_data() {
    let g = Grid::new(1, 8.0, 513, Boundary::Neumann).unwrap();
    let op = DiscreteOperator::assemble(&presets::ornstein_uhlenbeck(), &g).unwrap();
    let x: Vec<f64> = g.points().iter().map(|p| p[0]).collect();
    let opts = EvolveOptions::default();
    let lin = evolve(&op, &VectorField::from_data(1, x.clone()).unwrap(), 1.0, &opts).unwrap();
    let node = g.node_at(&[0.5]).unwrap();
    assert!((lin.last().get(node, 0) - 0.5 * (-1f64).exp()).abs() <= 1e-4);

    let phi: Vec<f64> = x.iter().map(|v| 1.0 + v * v).collect();
    let t = 1.0;
    let quad = evolve(&op, &VectorField::from_data(1, phi).unwrap(), t, &opts).unwrap();
    let inner = g.inner_mask(0.5);
    let e = (-2.0 * t).exp();
    for n in (0..g.len()).filter(|&n| inner[n]) {
        let exact = 1.0 + (1.0 - e) + e * x[n] * x[n];
        assert!((quad.last().get(n, 0) - exact).abs() <= 1e-4);
    }
}

#[test]
fn kernel_row_conserves_mass_and_dualises() {
    let g = Grid::new(1, 8.0, 257, Boundary::Neumann).unwrap();
    let op = DiscreteOperator::assemble(&presets::case1(), &g).unwrap();
    let opts = EvolveOptions { dt: 1e-2, snapshot_every: 1, startup: Startup::Always, ..Default::default() };
    let row = kernel_row(&op, &[0.0], 0, 2.0, &opts, false).unwrap();
    for m in &row.total_mass {
        assert!((m - 1.0).abs() < 1e-12);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = g.weights();
    for _ in 0..3 {
        let f = VectorField::from_data(2, (0..2 * g.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let u = evolve(&op, &f, 2.0, &opts).unwrap();
        let v = row.densities.last();
        let pairing: f64 = (0..g.len())
            .map(|n| w[n] * (v.get(n, 0) * f.get(n, 0) + v.get(n, 1) * f.get(n, 1)))
            .sum();
        assert!((pairing - u.last().get(row.node, 0)).abs() < 1e-8);
    }
}

#[test]
fn decoupled_kernel_stays_in_its_component() {
    let g = Grid::new(1, 8.0, 129, Boundary::Neumann).unwrap();
    let op = DiscreteOperator::assemble(&presets::decoupled_ou(), &g).unwrap();
    let row = kernel_row(&op, &[0.3], 1, 1.0, &EvolveOptions::default(), false).unwrap();
    assert!(row.snapped);
    for s in &row.densities.states {
        assert!(s.component(0).iter().all(|v| *v == 0.0));
    }
}

#[test]
fn cesaro_average_of_exponential_decay() {
    let dt = 1e-3;
    let n = 10_000;
    let traj = Trajectory {
        times: (0..=n).map(|k| k as f64 * dt).collect(),
        states: (0..=n)
            .map(|k| VectorField::constant(1, &[(-(k as f64) * dt).exp()]))
            .collect(),
        dt,
        scheme: Scheme::CrankNicolson,
        smoothed_startup: false,
    };
    let avg = cesaro_average(&traj).unwrap().get(0, 0);
    assert!((avg - (1.0 - (-10f64).exp()) / 10.0).abs() < 1e-7);
}

#[test]
fn resolvent_identities() {
    let g = periodic(128);
    let op = DiscreteOperator::assemble(&presets::periodic_growth(), &g).unwrap();
    let f = eigenfield(&g);
    let lambda = 27.0;
    let r = resolvent(&op, &f, lambda, 25.0, 1e-3).unwrap();
    let h = g.spacing(0);
    let expected = f.scaled(1.0 / (lambda - 1.0));
    assert!(r.value.max_abs_diff(&expected) < h * h);
    assert!(r.residual <= 1e-6, "{}", r.residual);

    let c = VectorField::constant(g.len(), &[2.0, -1.0]);
    let rc = resolvent(&op, &c, lambda, 25.0, 1e-3).unwrap();
    assert!(rc.value.max_abs_diff(&c.scaled(1.0 / lambda)) < 1e-9);
    assert!(resolvent(&op, &c, 20.0, 25.0, 1e-3).is_err());
}

#[test]
fn duhamel_formula_holds() {
    let g = Grid::new(1, 8.0, 257, Boundary::Neumann).unwrap();
    let x: Vec<f64> = g.points().iter().map(|p| p[0]).collect();
    let f = VectorField::from_components(&[x.iter().map(|v| v.cos()).collect(), vec![0.0; g.len()]]).unwrap();
    let rep = duhamel_check(&presets::decoupled_ou(), &g, &f, 1.0, 1e-2).unwrap();
    assert!(rep.residual <= 1e-10);
    let rep = duhamel_check(&presets::case1(), &g, &f, 1.0, 1e-2).unwrap();
    assert!(rep.residual <= 5e-3, "{}", rep.residual);
}
