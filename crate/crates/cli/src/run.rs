//! Experiment dispatch.

use std::fmt::Write as _;
use std::path::Path;

use kolmo_core::audit::{audit, AuditOptions, AuditReport, SampleSet, Verdict};
use kolmo_core::density::{normalize_to_mass, scalar_invariant_density, solve_density_system};
use kolmo_core::estimates::{gradient_constants, Estimator, HypothesisConstants, GROWTH_LIMIT};
use kolmo_core::invariant::{
    asymptotic_limit, default_base_point, extract_canonical_systems, fit_combination, inner_l1_distance,
    invariance_residual_generator, systems_csv, test_battery, InvariantSystem, SystemProvenance,
};
use kolmo_core::solver::{evolve, DiscreteOperator, EvolveOptions};
use kolmo_core::{Boundary, Expr, Grid, OperatorSpec, VectorField};
use serde::Serialize;

use crate::config::{AuditExpectation, Config, EstimateCheck, Experiment};
use crate::error::{CliError, Context, Result};
use crate::report::{ArtifactWriter, Check, ExperimentEntry, Manifest, Report};

/// Kernel-row total mass may drift by at most this much.
pub const MASS_DRIFT_LIMIT: f64 = 1e-8;
/// A perturbed system must raise the generator residual by this factor.
pub const PERTURBATION_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    One(Experiment),
    All,
}

impl Selection {
    pub fn name(self) -> &'static str {
        match self {
            Selection::One(e) => e.name(),
            Selection::All => "all",
        }
    }
}

#[derive(Debug)]
pub struct Outcome {
    pub manifest: Manifest,
    pub reports: Vec<Report>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.manifest.passed
    }
}

struct Session<'a> {
    config: &'a Config,
    spec: OperatorSpec,
    grid: Grid,
    sha: String,
}

impl Session<'_> {
    fn report(&self, e: Experiment) -> Report {
        Report::new(e.name(), &self.sha, self.config.seed)
    }

    fn audit(&self) -> Result<AuditReport> {
        let a = &self.config.audit;
        let opts = AuditOptions {
            p0: a.p0.clone(),
            phi: self.config.phi()?,
            lyapunov_constants: a.lyapunov.map(|[x, y]| (x, y)),
            gamma: a.gamma,
        };
        audit(&self.spec, &SampleSet::new(&self.grid), &opts).context("audit")
    }

    fn field(&self, exprs: &[Expr]) -> Result<VectorField> {
        VectorField::from_exprs(&self.grid, exprs, self.spec.params()).context("evaluating the datum")
    }

    fn operator(&self) -> Result<DiscreteOperator> {
        DiscreteOperator::assemble(&self.spec, &self.grid).context("assembling the operator")
    }

    fn needs_line(&self, e: Experiment) -> Result<()> {
        if self.grid.dim() != 1 {
            return Err(CliError::Invalid {
                key: "experiments".into(),
                message: format!("{e} needs d = 1"),
            });
        }
        Ok(())
    }

    /// Canonical systems from the density ODE, `canonical[i]` with masses `e_i`.
    fn ode_canonical(&self) -> Result<Vec<InvariantSystem>> {
        let m = self.spec.components();
        (0..m)
            .map(|i| {
                let mut e = vec![0.0; m];
                e[i] = 1.0;
                let p = normalize_to_mass(&self.spec, &self.grid, &e).context("normalising the density system")?;
                InvariantSystem::from_profile(&self.grid, &p).context("density profile")
            })
            .collect()
    }
}

/// Runs the selection, writing every artefact under `out` and
/// `out/manifest.json`.
pub fn run(config: &Config, selection: Selection, out: &Path) -> Result<Outcome> {
    let ctx = Session {
        config,
        spec: config.operator_spec()?,
        grid: config.grid()?,
        sha: config.sha256(),
    };
    let list: Vec<Experiment> = match selection {
        Selection::One(e) => vec![e],
        Selection::All => config.experiments.clone(),
    };
    let mut reports = Vec::new();
    let mut entries = Vec::new();
    for e in list {
        log::info!("running {e}");
        let mut writer = ArtifactWriter::new(out, e.name())?;
        let mut report = ctx.report(e);
        match e {
            Experiment::Audit => run_audit(&ctx, &mut report)?,
            Experiment::Evolve => run_evolve(&ctx, &mut report, &mut writer)?,
            Experiment::Estimates => run_estimates(&ctx, &mut report, &mut writer)?,
            Experiment::Invariant => run_invariant(&ctx, &mut report, &mut writer)?,
            Experiment::OdeDensities => run_ode(&ctx, &mut report, &mut writer)?,
            Experiment::Asymptotics => run_asymptotics(&ctx, &mut report, &mut writer)?,
        }
        writer.write_json("report.json", &report)?;
        for c in report.failed_checks() {
            log::warn!("{e}: {} = {:e} fails ({:?} {:e})", c.name, c.value, c.relation, c.threshold);
        }
        entries.push(ExperimentEntry {
            experiment: e.name().into(),
            passed: report.passed,
            failed_checks: report.failed_checks().map(|c| c.name.clone()).collect(),
            artifacts: writer.written,
        });
        reports.push(report);
    }
    let manifest = Manifest {
        tool: "kolmo".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: selection.name().into(),
        config_sha256: ctx.sha.clone(),
        config: serde_json::from_str(&config.canonical_json())?,
        passed: entries.iter().all(|e| e.passed),
        experiments: entries,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    let path = out.join("manifest.json");
    std::fs::write(&path, text).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(Outcome { manifest, reports })
}

fn run_audit(ctx: &Session, report: &mut Report) -> Result<()> {
    let a = ctx.audit()?;
    report.check(Check::info("lambda0", a.ellipticity.lambda0));
    report.check(Check::info("xi", a.xi.xi));
    report.check(Check::info("beta", a.beta));
    for s in &a.sigma {
        report.check(Check::info(&format!("sigma_{}", s.p0), s.sigma));
    }
    let v = &a.verdicts;
    let expect = ctx.config.audit.expect;
    if expect != AuditExpectation::Report {
        report.check(Check::flag("ellipticity", v.ellipticity.passed()));
        report.check(Check::flag("coupling growth", v.coupling_growth.passed()));
        report.check(Check::flag("lyapunov", v.lyapunov.passed()));
        let dissipative = match expect {
            AuditExpectation::Marginal => v.dissipativity == Verdict::Marginal,
            _ => v.dissipativity.passed(),
        };
        report.check(Check::flag("dissipativity", dissipative));
        if ctx.config.audit.gamma.is_some() {
            report.check(Check::flag("domination", v.domination.passed()));
        }
    }
    report.insert("audit", &a)
}

fn relative_error(ctx: &Session, u: &VectorField, exact: &[Expr], t: f64) -> Result<f64> {
    let mut params = ctx.spec.params().clone();
    params.insert("t".into(), t);
    let reference = VectorField::from_exprs(&ctx.grid, exact, &params).context("evaluating the exact solution")?;
    let mask = if ctx.grid.boundary() == Boundary::Periodic {
        vec![true; ctx.grid.len()]
    } else {
        ctx.grid.inner_mask(0.5)
    };
    let m = u.components();
    let (mut err, mut scale) = (0.0f64, 0.0f64);
    for n in (0..ctx.grid.len()).filter(|&n| mask[n]) {
        for j in 0..m {
            err = err.max((u.get(n, j) - reference.get(n, j)).abs());
            scale = scale.max(reference.get(n, j).abs());
        }
    }
    Ok(if scale > 0.0 { err / scale } else { err })
}

#[derive(Serialize)]
struct EvolveSummary {
    horizon: f64,
    dt: f64,
    steps: usize,
    smoothed_startup: bool,
    upwind_nodes: usize,
    max_peclet: f64,
    relative_error: Option<f64>,
    coarse_relative_error: Option<f64>,
    refinement_ratio: Option<f64>,
}

fn run_evolve(ctx: &Session, report: &mut Report, writer: &mut ArtifactWriter) -> Result<()> {
    let cfg = ctx.config;
    let f = cfg.fields("evolve.f", &cfg.evolve.f, false)?;
    let exact = cfg.evolve.exact.as_ref().map(|e| cfg.fields("evolve.exact", e, true)).transpose()?;
    let op = ctx.operator()?;
    let opts = cfg.solver.options();
    let traj = evolve(&op, &ctx.field(&f)?, cfg.solver.horizon, &opts).context("evolve")?;
    writer.write("trajectory.csv", traj.to_csv(&ctx.grid).as_bytes())?;
    let mut summary = EvolveSummary {
        horizon: traj.final_time(),
        dt: traj.dt,
        steps: (traj.final_time() / traj.dt).round() as usize,
        smoothed_startup: traj.smoothed_startup,
        upwind_nodes: op.upwind_nodes().len(),
        max_peclet: op.max_peclet(),
        relative_error: None,
        coarse_relative_error: None,
        refinement_ratio: None,
    };
    if let Some(exact) = &exact {
        let err = relative_error(ctx, traj.last(), exact, traj.final_time())?;
        summary.relative_error = Some(err);
        report.check(Check::at_most("relative sup error", err, cfg.evolve.tolerance));
        if cfg.evolve.refinement {
            let mut coarse_cfg = cfg.clone();
            coarse_cfg.grid.nodes = match cfg.grid.bc {
                Boundary::Periodic => cfg.grid.nodes / 2,
                _ => (cfg.grid.nodes - 1) / 2 + 1,
            };
            let coarse = Session {
                config: cfg,
                spec: ctx.spec.clone(),
                grid: coarse_cfg.grid()?,
                sha: ctx.sha.clone(),
            };
            let op = coarse.operator()?;
            let t = evolve(&op, &coarse.field(&f)?, cfg.solver.horizon, &opts).context("evolve (coarse)")?;
            let coarse_err = relative_error(&coarse, t.last(), exact, t.final_time())?;
            let ratio = coarse_err / err;
            summary.coarse_relative_error = Some(coarse_err);
            summary.refinement_ratio = Some(ratio);
            let [lo, hi] = cfg.evolve.refinement_range;
            for c in Check::within("refinement ratio", ratio, lo, hi) {
                report.check(c);
            }
        }
    }
    report.insert("evolve", &summary)
}

fn run_estimates(ctx: &Session, report: &mut Report, writer: &mut ArtifactWriter) -> Result<()> {
    let cfg = ctx.config;
    let est_cfg = &cfg.estimates;
    let a = ctx.audit()?;
    let constants = HypothesisConstants::from_audit(&a).context("hypothesis constants")?;
    let estimator = Estimator::new(&ctx.spec, &ctx.grid, cfg.solver.options(), constants).context("estimator")?;
    let gradient = gradient_constants(est_cfg.p, ctx.grid.dim(), ctx.spec.components(), &constants)
        .context("gradient constants")?;
    report.check(Check::info("beta", constants.beta));
    report.check(Check::info(&format!("sigma_{}", constants.p0), constants.sigma));
    report.check(Check::info(&format!("k_{}", est_cfg.p), gradient.k_p));
    report.check(Check::info(&format!("C_{}", est_cfg.p), gradient.c_p));
    report.insert("constants", &constants)?;
    report.insert("gradient_constants", &gradient)?;

    let mut fields = Vec::new();
    for (k, f) in est_cfg.fields.iter().enumerate() {
        fields.push(cfg.fields(&format!("estimates.fields[{k}]"), f, false)?);
    }
    fields.extend(
        test_battery(&ctx.grid, ctx.spec.components(), est_cfg.battery, cfg.seed).context("test battery")?,
    );
    let phi = cfg.phi()?;
    let mut reports = Vec::new();
    let mut globals = Vec::new();
    for check in &est_cfg.checks {
        match check {
            EstimateCheck::Pointwise | EstimateCheck::GradientSmooth | EstimateCheck::GradientRough => {
                for (k, f) in fields.iter().enumerate() {
                    let (label, r) = match check {
                        EstimateCheck::Pointwise => ("pointwise", estimator.check_pointwise_bound(f, &est_cfg.times)),
                        EstimateCheck::GradientSmooth => {
                            ("gradient-smooth", estimator.check_gradient_smooth(f, est_cfg.p, &est_cfg.times))
                        }
                        _ => ("gradient-rough", estimator.check_gradient_rough(f, est_cfg.p, &est_cfg.times)),
                    };
                    let r = r.context(label)?;
                    writer.write(&format!("{label}_{k}.csv"), r.to_csv(&ctx.grid).as_bytes())?;
                    report.check(Check::at_most(&format!("{label}[{k}] worst margin"), r.worst_margin, r.slack));
                    reports.push(r);
                }
            }
            EstimateCheck::Lyapunov => {
                let phi = phi.as_ref().expect("validated");
                let l = a.lyapunov.as_ref().expect("phi configured");
                let mut times = vec![0.0];
                times.extend(&est_cfg.times);
                let r = estimator
                    .check_lyapunov_semigroup_bound(phi, l.a_star, l.c_star, &times)
                    .context("lyapunov bound")?;
                writer.write("lyapunov.csv", r.to_csv(&ctx.grid).as_bytes())?;
                report.check(Check::at_most("lyapunov worst margin", r.worst_margin, r.slack));
                reports.push(r);
            }
            EstimateCheck::Global => {
                let phi = phi.as_ref().expect("validated");
                let gamma = cfg.audit.gamma.expect("validated");
                for (k, f) in fields.iter().enumerate() {
                    let g = estimator
                        .check_global_bound(f, phi, gamma, est_cfg.global_horizon)
                        .context("global bound")?;
                    report.check(Check::at_most(&format!("global[{k}] growth"), g.growth, GROWTH_LIMIT));
                    globals.push(g);
                }
            }
        }
    }
    report.insert("estimates", &reports)?;
    report.insert("global", &globals)
}

fn run_invariant(ctx: &Session, report: &mut Report, writer: &mut ArtifactWriter) -> Result<()> {
    let cfg = ctx.config;
    let inv = &cfg.invariant;
    let x0 = match &inv.x0 {
        Some(x) => x.clone(),
        None => default_base_point(&ctx.grid, cfg.phi()?.as_ref(), ctx.spec.params()).context("base point")?,
    };
    let op = ctx.operator()?;
    let opts = EvolveOptions {
        dt: inv.dt.unwrap_or(cfg.solver.dt),
        ..cfg.solver.options()
    };
    let bundle = extract_canonical_systems(&op, &x0, inv.horizon, &opts).context("canonical extraction")?;
    writer.write("bundle.csv", bundle.to_csv(&ctx.grid).as_bytes())?;
    writer.write("masses.csv", bundle.mass_table_csv().as_bytes())?;
    let m = bundle.rows.len();
    let mut mass_err = 0.0f64;
    for (i, row) in bundle.masses.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            mass_err = mass_err.max((v - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    report.check(Check::at_most("mass matrix - identity", mass_err, inv.mass_tolerance));
    let drift = bundle.mass_drift.iter().fold(0.0f64, |a, v| a.max(*v));
    report.check(Check::at_most("total mass drift", drift, MASS_DRIFT_LIMIT));
    let shrink = bundle
        .tail_diagnostic_half
        .iter()
        .zip(&bundle.tail_diagnostic)
        .map(|(h, f)| h / f)
        .fold(f64::INFINITY, f64::min);
    report.check(Check::at_least("tail shrink T/2 -> T", shrink, inv.tail_shrink));
    for (i, t) in bundle.tail_diagnostic.iter().enumerate() {
        report.check(Check::info(&format!("tail diagnostic[{}]", i + 1), *t));
    }
    report.insert("bundle", &bundle)?;

    if ctx.grid.dim() == 1 {
        let canonical = ctx.ode_canonical()?;
        let csv = systems_csv(&ctx.grid, &canonical);
        writer.write("ode_canonical.csv", csv.as_bytes())?;

        let mut l1 = 0.0f64;
        for (row, exact) in bundle.rows.iter().zip(&canonical) {
            l1 = l1.max(inner_l1_distance(&ctx.grid, row, exact).context("L1 distance")?);
        }
        report.check(Check::at_most("L1 distance to ODE canonical systems", l1, inv.l1_tolerance));

        let battery = test_battery(&ctx.grid, m, inv.battery, cfg.seed).context("test battery")?;
        let mut residual = 0.0f64;
        for s in &canonical {
            let r = invariance_residual_generator(&ctx.spec, &ctx.grid, s, &battery).context("generator residual")?;
            residual = residual.max(r.worst);
        }
        report.check(Check::at_most("generator residual (ODE systems)", residual, inv.residual_tolerance));
        let perturbed = perturb(&ctx.grid, &canonical[0])?;
        let rp = invariance_residual_generator(&ctx.spec, &ctx.grid, &perturbed, &battery)
            .context("generator residual")?;
        report.check(Check::at_least(
            "perturbed / exact residual",
            rp.worst / residual.max(1e-15),
            PERTURBATION_FACTOR,
        ));
        let target = normalize_to_mass(&ctx.spec, &ctx.grid, &cfg.ode_densities.masses).context("density system")?;
        let target = InvariantSystem::from_profile(&ctx.grid, &target).context("density profile")?;
        let fit = fit_combination(&ctx.grid, &bundle, &target).context("fit")?;
        for (i, c) in fit.coefficients.iter().enumerate() {
            report.check(Check::info(&format!("fit c[{}]", i + 1), *c));
        }
        report.insert("fit", &fit)?;
    }
    Ok(())
}

/// Adds a Gaussian bump of 10% of its peak to the first density.
fn perturb(grid: &Grid, system: &InvariantSystem) -> Result<InvariantSystem> {
    let peak = system.h[0].iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut h = system.h.clone();
    let width = 0.25 * grid.axes()[0].half_width;
    for (n, p) in grid.points().iter().enumerate() {
        let r2: f64 = p
            .iter()
            .zip(grid.axes())
            .map(|(x, a)| ((x - a.center - 0.1 * a.half_width) / width).powi(2))
            .sum();
        h[0][n] += 0.1 * peak * (-r2).exp();
    }
    InvariantSystem::new(grid, h, SystemProvenance::Manual).context("perturbed system")
}

fn run_ode(ctx: &Session, report: &mut Report, writer: &mut ArtifactWriter) -> Result<()> {
    ctx.needs_line(Experiment::OdeDensities)?;
    let cfg = &ctx.config.ode_densities;
    let scalar = scalar_invariant_density(&ctx.spec, &ctx.grid).context("scalar invariant density")?;
    report.check(Check::info("normalisation", scalar.normalization));
    report.check(Check::info("relative tail mass", scalar.tail_relative));
    let profile = normalize_to_mass(&ctx.spec, &ctx.grid, &cfg.masses).context("density system")?;
    let mass_err = profile
        .masses
        .iter()
        .zip(&cfg.masses)
        .fold(0.0f64, |a, (x, t)| a.max((x - t).abs()));
    report.check(Check::at_most("mass mismatch", mass_err, 1e-8 * (1.0 + cfg.masses.iter().fold(0.0f64, |a, v| a.max(v.abs())))));
    writer.write("profile.csv", profile.to_csv().as_bytes())?;
    report.insert("profile", &serde_json::json!({
        "rho0": profile.rho0,
        "masses": profile.masses,
        "sign_changes": profile.sign_changes(),
        "normalization": profile.normalization,
    }))?;
    if let Some(cf) = &ctx.config.ode_densities.closed_form {
        let ode = solve_density_system(&ctx.spec, &cf.rho0(), &ctx.grid).context("density system")?;
        let mut err = 0.0f64;
        for (k, &x) in ode.x.iter().enumerate() {
            let e = cf.eval(x);
            for i in 0..2 {
                err = err.max((ode.rho[i][k] - e[i]).abs());
            }
        }
        report.check(Check::at_most("closed form sup error", err, cfg.tolerance));
        report.insert("closed_form", cf)?;
    }
    Ok(())
}

fn run_asymptotics(ctx: &Session, report: &mut Report, writer: &mut ArtifactWriter) -> Result<()> {
    let cfg = ctx.config;
    let asy = &cfg.asymptotics;
    let op = ctx.operator()?;
    let opts = EvolveOptions {
        snapshot_every: usize::MAX,
        ..cfg.solver.options()
    };
    let (canonical, source) = if ctx.grid.dim() == 1 {
        (ctx.ode_canonical()?, "ode")
    } else {
        let x0 = match &cfg.invariant.x0 {
            Some(x) => x.clone(),
            None => default_base_point(&ctx.grid, cfg.phi()?.as_ref(), ctx.spec.params()).context("base point")?,
        };
        let inv_opts = EvolveOptions {
            dt: cfg.invariant.dt.unwrap_or(cfg.solver.dt),
            ..opts
        };
        let b = extract_canonical_systems(&op, &x0, cfg.invariant.horizon, &inv_opts).context("canonical extraction")?;
        (b.rows, "extracted")
    };
    let f = ctx.field(&cfg.fields("asymptotics.f", &asy.f, false)?)?;
    let r = asymptotic_limit(&op, &canonical, &f, &asy.probes, asy.horizon, &opts).context("asymptotic limit")?;
    let mut csv = String::from("probe,component,predicted,at_half,at_full\n");
    for (k, p) in r.probes.iter().enumerate() {
        for (i, l) in r.predicted.iter().enumerate() {
            let _ = writeln!(csv, "{k},{},{l:e},{:e},{:e}", i + 1, p.at_half[i], p.at_full[i]);
        }
    }
    writer.write("limits.csv", csv.as_bytes())?;
    for (i, l) in r.predicted.iter().enumerate() {
        report.check(Check::info(&format!("predicted limit[{}]", i + 1), *l));
    }
    report.check(Check::at_most("worst error at T", r.worst_error, asy.tolerance));
    let half = r.probes.iter().fold(0.0f64, |a, p| a.max(p.error_half));
    report.check(Check::at_most(
        "error at T against decay x error at T/2",
        r.worst_error,
        (asy.decay * half).max(asy.floor),
    ));
    report.insert("source", &source)?;
    report.insert("asymptotics", &r)
}
