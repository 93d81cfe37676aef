//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use kolmo_cli::{run, Config, Experiment, Selection};
use kolmo_core::audit::{
    audit, check_lyapunov, check_polynomial_class, AuditOptions, Auditor, PolynomialClass, SampleSet, Verdict,
};
use kolmo_core::density::{normalize_to_mass, solve_density_system, ClosedForm};
use kolmo_core::estimates::{gradient_constants, Estimator, HypothesisConstants};
use kolmo_core::invariant::{
    asymptotic_limit, extract_canonical_systems, inner_l1_distance, invariance_residual_generator, test_battery,
    InvariantSystem, SystemProvenance,
};
use kolmo_core::operator::presets;
use kolmo_core::solver::{evolve, kernel_row, DiscreteOperator, EvolveOptions};
use kolmo_core::{parse, Boundary, Expr, Grid, OperatorSpec, Scope, VectorField};

// Pinned tolerances.
const GROWTH_ORACLE_TOL: f64 = 1e-3;
const REFINEMENT_RANGE: (f64, f64) = (3.5, 4.5);
const GROWTH_RUNTIME: f64 = 5.0;
const MEHLER_TOL: f64 = 1e-4;
const CASE1_ODE_TOL: f64 = 1e-8;
const CASE2_ODE_TOL: f64 = 1e-7;
const GENERATOR_TOL: f64 = 1e-6;
const PERTURBATION_FACTOR: f64 = 10.0;
const BUNDLE_L1_TOL: f64 = 5e-2;
const MASS_TOL: f64 = 1e-3;
const TAIL_SHRINK: f64 = 1.5;
const LIMIT_TOL: f64 = 1e-2;
const LIMIT_RUNTIME: f64 = 60.0;
const CASE2_SIGMA_MAX: f64 = -0.9;
const MARGINAL_TOL: f64 = 1e-9;
const DUALITY_TOL: f64 = 1e-12;
const CONSTANT_TOL: f64 = 1e-13;
const MASS_DRIFT_TOL: f64 = 1e-8;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn exprs(src: &[&str]) -> Vec<Expr> {
    src.iter().map(|s| parse(s, &Scope::new(1)).unwrap()).collect()
}

fn line(l: f64, n: usize) -> Grid {
    Grid::new(1, l, n, Boundary::Neumann).unwrap()
}

fn periodic(n: usize) -> Grid {
    Grid::with_axes(&[PI], &[PI], &[n], Boundary::Periodic).unwrap()
}

fn growth_error(n: usize) -> f64 {
    let g = periodic(n);
    let op = DiscreteOperator::assemble(&presets::periodic_growth(), &g).unwrap();
    let f = VectorField::from_exprs(&g, &exprs(&["cos(x)", "2*sin(x) + cos(x)"]), &Default::default()).unwrap();
    let opts = EvolveOptions { dt: 1e-3, snapshot_every: usize::MAX, ..Default::default() };
    let u = evolve(&op, &f, 1.0, &opts).unwrap();
    let exact = f.scaled(1f64.exp());
    u.last().max_abs_diff(&exact) / exact.norm_inf()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let fine = growth_error(256);
    let elapsed = start.elapsed().as_secs_f64();
    let ratio = growth_error(128) / fine;
    let pass = fine <= GROWTH_ORACLE_TOL
        && (REFINEMENT_RANGE.0..=REFINEMENT_RANGE.1).contains(&ratio)
        && elapsed <= GROWTH_RUNTIME;
    outcome(
        pass,
        format!("relative error {fine:.3e} (tol {GROWTH_ORACLE_TOL:e}), refinement ratio {ratio:.3}, runtime {elapsed:.2} s"),
    )
}

fn criterion_2() -> Outcome {
    let g = line(8.0, 513);
    let spec = presets::ornstein_uhlenbeck();
    let op = DiscreteOperator::assemble(&spec, &g).unwrap();
    let opts = EvolveOptions { dt: 1e-3, snapshot_every: usize::MAX, ..Default::default() };
    let x = VectorField::from_exprs(&g, &exprs(&["x"]), &Default::default()).unwrap();
    let u = evolve(&op, &x, 1.0, &opts).unwrap();
    let at = g.node_at(&[0.5]).unwrap();
    let mehler_x = (u.last().get(at, 0) - 0.5 * (-1f64).exp()).abs();

    let phi = VectorField::from_exprs(&g, &exprs(&["1 + x^2"]), &Default::default()).unwrap();
    let inner = g.inner_mask(0.5);
    let mut mehler_phi = 0.0f64;
    let mut state = phi.clone();
    let mut t = 0.0;
    for dt in [0.25, 0.25, 0.5, 1.0] {
        state = evolve(&op, &state, dt, &opts).unwrap().last().clone();
        t += dt;
        let decay = (-2.0 * t).exp();
        for n in (0..g.len()).filter(|&n| inner[n]) {
            let xn = g.coord(n, 0);
            let exact = 1.0 + (1.0 - decay) + decay * xn * xn;
            mehler_phi = mehler_phi.max((state.get(n, 0) - exact).abs() / exact);
        }
    }
    let lyap = check_lyapunov(
        &Auditor::new(&spec).unwrap(),
        &exprs(&["1 + x^2"])[0],
        Some((4.0, 2.0)),
        &SampleSet::new(&g),
    )
    .unwrap();
    let ratio = lyap.a_star / lyap.c_star;
    let pass = mehler_x <= MEHLER_TOL && mehler_phi <= MEHLER_TOL && lyap.verdict == Verdict::Pass && ratio == 2.0;
    outcome(
        pass,
        format!(
            "|T(1)x(0.5) - e^-1/2| = {mehler_x:.2e}, T(t)(1+x^2) relative error {mehler_phi:.2e} (|x| <= 4, t <= 2), A phi <= 4 - 2 phi holds: {}, a*/c* = {ratio}",
            lyap.verdict == Verdict::Pass
        ),
    )
}

fn criterion_3() -> Outcome {
    let g = line(6.0, 241);
    let mut case1 = 0.0f64;
    for a in [[1.0, 0.0], [0.0, 1.0], [0.7, -1.3], [-2.0, 0.25], [1.5, 1.5]] {
        let cf = ClosedForm::Case1 { a };
        let p = solve_density_system(&presets::case1(), &cf.rho0(), &g).unwrap();
        for (k, &x) in p.x.iter().enumerate() {
            let e = cf.eval(x);
            case1 = case1.max((p.rho[0][k] - e[0]).abs()).max((p.rho[1][k] - e[1]).abs());
        }
    }
    let mut case2 = 0.0f64;
    let draws: [([[f64; 2]; 2], [f64; 2], f64); 4] = [
        ([[0.1, 0.1], [-0.1, 0.3]], [1.0, 0.5], 3.0),
        ([[0.3, -0.2], [0.2, -0.1]], [-1.0, 2.0], 2.5),
        ([[0.2, 0.3], [0.1, 0.4]], [1.5, -0.5], 4.0),
        ([[-0.1, 0.4], [0.25, 0.05]], [0.3, 1.1], 3.5),
    ];
    for (b, c, b0) in draws {
        let cf = if (b[0][1] + b[1][0]).abs() < 1e-12 {
            ClosedForm::Case2Antisymmetric { b, c }
        } else {
            ClosedForm::Case2General { b, c }
        };
        let spec = presets::case2_with(b0, b);
        let p = solve_density_system(&spec, &cf.rho0(), &g).unwrap();
        for (k, &x) in p.x.iter().enumerate() {
            let e = cf.eval(x);
            case2 = case2.max((p.rho[0][k] - e[0]).abs()).max((p.rho[1][k] - e[1]).abs());
        }
    }
    outcome(
        case1 <= CASE1_ODE_TOL && case2 <= CASE2_ODE_TOL,
        format!("Case 1 sup error {case1:.2e} (tol {CASE1_ODE_TOL:e}), Case 2 sup error {case2:.2e} (tol {CASE2_ODE_TOL:e})"),
    )
}

fn case1_canonical(g: &Grid) -> Vec<InvariantSystem> {
    (0..2)
        .map(|i| {
            let mut e = [0.0; 2];
            e[i] = 1.0;
            InvariantSystem::from_profile(g, &normalize_to_mass(&presets::case1(), g, &e).unwrap()).unwrap()
        })
        .collect()
}

fn criterion_4() -> Outcome {
    let g = line(8.0, 512);
    let spec = presets::case1();
    let battery = test_battery(&g, 2, 10, 2024).unwrap();
    let mut exact = 0.0f64;
    let canonical = case1_canonical(&g);
    for s in &canonical {
        exact = exact.max(invariance_residual_generator(&spec, &g, s, &battery).unwrap().worst);
    }
    let peak = canonical[0].h[0].iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut h = canonical[0].h.clone();
    for (n, p) in g.points().iter().enumerate() {
        h[0][n] += 0.1 * peak * (-(p[0] - 0.5).powi(2)).exp();
    }
    let perturbed = InvariantSystem::new(&g, h, SystemProvenance::Manual).unwrap();
    let off = invariance_residual_generator(&spec, &g, &perturbed, &battery).unwrap().worst;
    outcome(
        exact <= GENERATOR_TOL && off >= PERTURBATION_FACTOR * exact,
        format!("closed-form residual {exact:.2e} (tol {GENERATOR_TOL:e}), perturbed residual {off:.2e} ({:.1e}x)", off / exact),
    )
}

fn criterion_5() -> Outcome {
    let g = line(8.0, 512);
    let op = DiscreteOperator::assemble(&presets::case1(), &g).unwrap();
    let opts = EvolveOptions { dt: 1e-2, ..Default::default() };
    let bundle = extract_canonical_systems(&op, &[0.0], 20.0, &opts).unwrap();
    let canonical = case1_canonical(&g);
    let l1 = bundle
        .rows
        .iter()
        .zip(&canonical)
        .map(|(a, b)| inner_l1_distance(&g, a, b).unwrap())
        .fold(0.0, f64::max);
    let mut mass = 0.0f64;
    for (i, row) in bundle.masses.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            mass = mass.max((v - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    let shrink = bundle
        .tail_diagnostic_half
        .iter()
        .zip(&bundle.tail_diagnostic)
        .map(|(h, f)| h / f)
        .fold(f64::INFINITY, f64::min);
    outcome(
        l1 <= BUNDLE_L1_TOL && mass <= MASS_TOL && shrink >= TAIL_SHRINK,
        format!(
            "inner L1 distance {l1:.4} (tol {BUNDLE_L1_TOL:e}), mass matrix - I = {mass:.1e}, tail shrink T=10 -> 20: {shrink:.3} (x0 = {:?})",
            bundle.x0
        ),
    )
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let g = line(8.0, 512);
    let spec = presets::case1();
    let op = DiscreteOperator::assemble(&spec, &g).unwrap();
    let f = VectorField::from_exprs(&g, &exprs(&["cos(x)", "0"]), spec.params()).unwrap();
    let opts = EvolveOptions { dt: 1e-2, ..Default::default() };
    let r = asymptotic_limit(&op, &case1_canonical(&g), &f, &[vec![0.0]], 10.0, &opts).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let ell = (-0.5f64).exp() * 1f64.cos();
    let p = &r.probes[0];
    let err = (p.at_full[0] - ell).abs().max(p.at_full[1].abs());
    let pass = err <= LIMIT_TOL && p.error_full <= 0.5 * p.error_half && elapsed <= LIMIT_RUNTIME;
    outcome(
        pass,
        format!(
            "(T(10)f)(0) = ({:.7}, {:.1e}), limit ({ell:.7}, 0), error {err:.2e}; error at T=5 {:.2e}, at T=10 {:.2e}; runtime {elapsed:.2} s",
            p.at_full[0], p.at_full[1], p.error_half, p.error_full
        ),
    )
}

fn estimate_suite(spec: &OperatorSpec, g: &Grid, dt: f64, seed: u64) -> (bool, String, HypothesisConstants) {
    let opts = AuditOptions { p0: vec![2.0], ..Default::default() };
    let constants = HypothesisConstants::from_audit(&audit(spec, &SampleSet::new(g), &opts).unwrap()).unwrap();
    let est = Estimator::new(spec, g, EvolveOptions { dt, ..Default::default() }, constants).unwrap();
    let times = [0.1, 0.5, 1.0];
    let mut fields = vec![exprs(&["cos(x)", "0"]), exprs(&["sin(x)", "cos(x)"])];
    fields.extend(test_battery(g, 2, 3, seed).unwrap());
    let mut violations = 0;
    let mut runs = 0;
    let mut c_disc = 0.0f64;
    for f in &fields {
        for r in [
            est.check_pointwise_bound(f, &times).unwrap(),
            est.check_gradient_smooth(f, 2.0, &times).unwrap(),
            est.check_gradient_rough(f, 2.0, &times).unwrap(),
        ] {
            runs += 1;
            if !r.pass {
                violations += 1;
            }
            c_disc = c_disc.max(r.discretization.c_disc.unwrap_or(0.0));
        }
    }
    (violations == 0, format!("{violations}/{runs} violations, C = {c_disc:.2e}"), constants)
}

fn criterion_7() -> Outcome {
    let g = line(8.0, 257);
    let (p1, d1, c1) = estimate_suite(&presets::case1(), &g, 1e-2, 7);
    let (p2, d2, _) = estimate_suite(&presets::case2(), &g, 1e-3, 8);
    let (p3, d3, _) = estimate_suite(&presets::decoupled_ou(), &g, 1e-2, 9);
    let k2 = gradient_constants(2.0, 1, 2, &c1).unwrap().k_p;
    let echoed = c1.beta == 1.0 && c1.sigma.abs() <= MARGINAL_TOL && !c1.strict && k2 == 4.0;
    outcome(
        p1 && p2 && p3 && echoed,
        format!(
            "Case 1: {d1}; Case 2: {d2}; decoupled OU: {d3}; Case 1 beta = {}, sigma_2 = {} (marginal: {}), k_2 = {k2}",
            c1.beta, c1.sigma, !c1.strict
        ),
    )
}

fn criterion_8() -> Outcome {
    let g = line(8.0, 257);
    let samples = SampleSet::new(&g);
    let phi = parse("(1 + x^2)^2", &Scope::new(1)).unwrap();
    let opts = AuditOptions {
        p0: vec![2.0],
        phi: Some(phi),
        gamma: Some(3.0),
        ..Default::default()
    };
    let spec2 = presets::case2_with(3.0, [[0.1, 0.1], [-0.1, 0.3]]);
    let a2 = audit(&spec2, &samples, &opts).unwrap();
    let s2 = a2.best_sigma().unwrap().sigma;
    let case2_ok = a2.verdicts.all_pass() && s2 <= CASE2_SIGMA_MAX;

    let opts1 = AuditOptions {
        p0: vec![2.0],
        phi: Some(parse("1 + x^2", &Scope::new(1)).unwrap()),
        gamma: Some(3.0),
        ..Default::default()
    };
    let a1 = audit(&presets::case1(), &samples, &opts1).unwrap();
    let s1 = a1.best_sigma().unwrap().sigma;
    let case1_ok = a1.verdicts.dissipativity == Verdict::Marginal && s1.abs() <= MARGINAL_TOL;

    let base = PolynomialClass {
        p: 1.0,
        r: 2.0,
        s: vec![0.5],
        b0: 0.0,
        lambda1: 1.0,
        c0: 2.0,
        b_norms: vec![0.3],
        db_norms: vec![vec![0.3]],
        m: 2,
        p0: 2.0,
    };
    let threshold = check_polynomial_class(&base).unwrap().lhs;
    let above = check_polynomial_class(&PolynomialClass { b0: threshold * 1.01, ..base.clone() }).unwrap();
    let below = check_polynomial_class(&PolynomialClass { b0: threshold * 0.99, ..base.clone() }).unwrap();
    let flat = check_polynomial_class(&PolynomialClass { b0: threshold * 2.0, r: 1.0, ..base }).unwrap();
    let poly_ok = above.verdict.passed() && !below.verdict.passed() && !flat.verdict.passed();
    outcome(
        case2_ok && case1_ok && poly_ok,
        format!(
            "Case 2 all hypotheses pass: {}, sigma_2 = {s2:.4}; Case 1 sigma_2 = {s1:e} ({:?}); polynomial class threshold b0 = {threshold:.4}: 1.01x accepted {}, 0.99x rejected {}, r = p rejected {}",
            a2.verdicts.all_pass(),
            a1.verdicts.dissipativity,
            above.verdict.passed(),
            !below.verdict.passed(),
            !flat.verdict.passed()
        ),
    )
}

fn criterion_9() -> Outcome {
    let mut duality = 0.0f64;
    let mut constants = 0.0f64;
    for (spec, g) in [
        (presets::case1(), line(8.0, 257)),
        (presets::case2(), line(8.0, 257)),
        (presets::periodic_growth(), periodic(128)),
    ] {
        let op = DiscreteOperator::assemble(&spec, &g).unwrap();
        let f = VectorField::from_exprs(&g, &exprs(&["sin(x)", "cos(2*x)"]), spec.params()).unwrap();
        let v = VectorField::from_exprs(&g, &exprs(&["exp(-x^2)", "x*exp(-x^2)"]), spec.params()).unwrap();
        let af = op.matrix().matvec(f.as_slice());
        let atv = op.transpose().matvec(v.as_slice());
        let lhs: f64 = v.as_slice().iter().zip(&af).map(|(a, b)| a * b).sum();
        let rhs: f64 = atv.iter().zip(f.as_slice()).map(|(a, b)| a * b).sum();
        duality = duality.max((lhs - rhs).abs() / lhs.abs().max(1.0));
        let one = VectorField::constant(g.len(), &[1.0, -2.0]);
        let opts = EvolveOptions { dt: 1e-2, snapshot_every: usize::MAX, ..Default::default() };
        constants = constants.max(evolve(&op, &one, 1.0, &opts).unwrap().last().max_abs_diff(&one));
    }

    let g = line(8.0, 257);
    let op = DiscreteOperator::assemble(&presets::case1(), &g).unwrap();
    let opts = EvolveOptions { dt: 1e-2, snapshot_every: 1, ..Default::default() };
    let row = kernel_row(&op, &[0.0], 0, 20.0, &opts, false).unwrap();
    let w = g.weights();
    let drift = row
        .densities
        .states
        .iter()
        .map(|s| {
            let total: f64 = (0..g.len()).map(|n| w[n] * (s.get(n, 0) + s.get(n, 1))).sum();
            (total - 1.0).abs()
        })
        .fold(0.0, f64::max);

    let deterministic = determinism();
    outcome(
        duality <= DUALITY_TOL && constants <= CONSTANT_TOL && drift <= MASS_DRIFT_TOL && deterministic,
        format!(
            "duality {duality:.1e}, constant preservation {constants:.1e}, kernel-row mass drift on [0, 20] {drift:.1e}, byte-identical reruns: {deterministic}"
        ),
    )
}

fn determinism() -> bool {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/case1.toml");
    let mut config = Config::load(&path).unwrap();
    config.experiments = vec![Experiment::Estimates, Experiment::Invariant, Experiment::OdeDensities];
    config.estimates.times = vec![0.5];
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run(&config, Selection::All, a.path()).unwrap();
    run(&config, Selection::All, b.path()).unwrap();
    ra.manifest.experiments.iter().flat_map(|e| &e.artifacts).all(|art| {
        std::fs::read(a.path().join(&art.file)).unwrap() == std::fs::read(b.path().join(&art.file)).unwrap()
    })
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("exponential growth oracle (periodic system)", criterion_1),
        ("Ornstein-Uhlenbeck oracle", criterion_2),
        ("density ODE closed forms", criterion_3),
        ("generator invariance residual", criterion_4),
        ("canonical extraction", criterion_5),
        ("long-time limit", criterion_6),
        ("estimate suites", criterion_7),
        ("hypothesis audit", criterion_8),
        ("structural invariants", criterion_9),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!("{} criterion {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, k + 1, o.detail);
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
