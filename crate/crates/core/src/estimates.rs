//! Pointwise, gradient and Lyapunov estimates checked as inequalities
//! between discretised fields.
//!
//! Margins are `lhs - rhs` (negative means satisfied) taken over inner nodes
//! only. The discretisation slack comes from repeating each check on the
//! nested coarse grid.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::audit::AuditReport;
use crate::expr::Expr;
use crate::grid::{Boundary, Grid};
use crate::operator::{OperatorSpec, VectorField};
use crate::solver::{evolve, DiscreteOperator, EvolveOptions, Scheme};
use crate::{Error, Result};

/// Checks use nodes with `|x - c| <= 0.75 L`, i.e. at distance `>= L/4`
/// from the boundary.
pub const INNER_FRACTION: f64 = 0.75;
pub const ABSOLUTE_SLACK: f64 = 1e-6;
/// Relative growth of `rho(T)` between `T/2` and `T` accepted as bounded.
pub const GROWTH_LIMIT: f64 = 1e-3;

/// Constants taken from an audit.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct HypothesisConstants {
    pub beta: f64,
    pub sigma: f64,
    pub p0: f64,
    pub xi: f64,
    pub lambda0: f64,
    /// `sigma < 0` with margin.
    pub strict: bool,
}

impl HypothesisConstants {
    pub fn from_audit(report: &AuditReport) -> Result<Self> {
        let s = report
            .best_sigma()
            .ok_or_else(|| Error::InvalidArgument("the audit computed no sigma_p0".into()))?;
        Ok(Self {
            beta: report.beta,
            sigma: s.sigma,
            p0: s.p0,
            xi: report.xi.xi,
            lambda0: report.ellipticity.lambda0,
            strict: s.verdict.passed(),
        })
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GradientConstants {
    pub p: f64,
    pub k_p: f64,
    pub c_p: f64,
    /// `k_p` came from the proof's own bound because the printed one vanishes.
    pub k_p_from_proof: bool,
}

/// `k_p = p d m^2 xi^2 / (2 (min(p,2) - 1))` and `C_p = k_p e^{p |sigma|}`.
pub fn gradient_constants(p: f64, d: usize, m: usize, c: &HypothesisConstants) -> Result<GradientConstants> {
    if !(p > 1.0) {
        return Err(Error::InvalidArgument(format!("p must exceed 1, got {p}")));
    }
    let h = p * d as f64 * (m * m) as f64 * c.xi * c.xi / 2.0;
    let printed = h / (p.min(2.0) - 1.0);
    let (k_p, from_proof) = if printed > 0.0 {
        (printed, false)
    } else {
        let gamma = if p >= 2.0 { c.lambda0 } else { (p - 1.0) / c.lambda0 };
        (gamma.powf(-p / 2.0) * h.exp(), true)
    };
    Ok(GradientConstants {
        p,
        k_p,
        c_p: k_p * (p * c.sigma.abs()).exp(),
        k_p_from_proof: from_proof,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Discretization {
    pub nodes: Vec<usize>,
    pub spacing: Vec<f64>,
    pub dt: f64,
    pub scheme: Scheme,
    pub coarse_nodes: Option<Vec<usize>>,
    /// Richardson estimate of the margin error on the fine grid.
    pub eps_disc: Option<f64>,
    /// `eps_disc / dx^2`.
    pub c_disc: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimeMargin {
    pub t: f64,
    pub margin: f64,
    pub at: Vec<f64>,
    pub lhs: f64,
    pub rhs: f64,
    /// Largest right-hand side over inner nodes.
    pub rhs_max: f64,
}

/// Both sides of an inequality at one time, on every node.
#[derive(Debug, Clone)]
pub struct Sides {
    pub t: f64,
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub id: String,
    pub times: Vec<f64>,
    pub per_time: Vec<TimeMargin>,
    pub worst_margin: f64,
    pub worst_time: f64,
    pub worst_point: Vec<f64>,
    pub lhs_at_worst: f64,
    pub rhs_at_worst: f64,
    pub slack: f64,
    /// Inner nodes satisfy `|x_a - c_a| <= inner_fraction L_a`.
    pub inner_fraction: f64,
    pub hypothesis: Option<HypothesisConstants>,
    pub gradient: Option<GradientConstants>,
    pub discretization: Discretization,
    pub warnings: Vec<String>,
    pub pass: bool,
    #[serde(skip)]
    pub sides: Vec<Sides>,
    #[serde(skip)]
    pub inner: Vec<bool>,
}

impl EstimateReport {
    /// CSV with header `t,x1..xd,lhs,rhs,inner`.
    pub fn to_csv(&self, grid: &Grid) -> String {
        let mut out = String::from("t");
        for a in 0..grid.dim() {
            let _ = write!(out, ",x{}", a + 1);
        }
        out.push_str(",lhs,rhs,inner\n");
        let points = grid.points();
        for s in &self.sides {
            for (n, p) in points.iter().enumerate() {
                let _ = write!(out, "{:e}", s.t);
                for x in p {
                    let _ = write!(out, ",{x:e}");
                }
                let _ = writeln!(out, ",{:e},{:e},{}", s.lhs[n], s.rhs[n], u8::from(self.inner[n]));
            }
        }
        out
    }
}

/// Operators assembled on one grid.
struct Level {
    grid: Grid,
    vector: DiscreteOperator,
    scalar: DiscreteOperator,
    inner: Vec<bool>,
}

impl Level {
    fn new(spec: &OperatorSpec, grid: Grid, fraction: f64) -> Result<Self> {
        Ok(Self {
            vector: DiscreteOperator::assemble(spec, &grid)?,
            scalar: DiscreteOperator::assemble(&spec.scalar_part(), &grid)?,
            inner: grid.inner_mask(fraction),
            grid,
        })
    }
}

/// Solution at each of the sorted `times`, evolving segment by segment.
fn evolve_at(op: &DiscreteOperator, f: &VectorField, times: &[f64], opts: &EvolveOptions) -> Result<Vec<VectorField>> {
    let mut out = Vec::with_capacity(times.len());
    let mut state = f.clone();
    let mut now = 0.0;
    let opts = EvolveOptions {
        snapshot_every: usize::MAX,
        ..*opts
    };
    for &t in times {
        if t > now {
            state = evolve(op, &state, t - now, &opts)?.last().clone();
            now = t;
        }
        out.push(state.clone());
    }
    Ok(out)
}

fn sorted_times(times: &[f64]) -> Result<Vec<f64>> {
    if times.is_empty() || times.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
        return Err(Error::InvalidArgument("times must be non-empty, finite and non-negative".into()));
    }
    let mut t = times.to_vec();
    t.sort_by(f64::total_cmp);
    t.dedup();
    Ok(t)
}

/// Frobenius norm of the Jacobian by central differences; zero on nodes
/// outside `mask`.
fn jacobian_norm(grid: &Grid, u: &VectorField, mask: &[bool]) -> Vec<f64> {
    let m = u.components();
    (0..grid.len())
        .map(|n| {
            if !mask[n] {
                return 0.0;
            }
            let mut acc = 0.0;
            for a in 0..grid.dim() {
                let (p, q) = (grid.neighbor(n, a, 1), grid.neighbor(n, a, -1));
                let h = 2.0 * grid.spacing(a);
                for j in 0..m {
                    acc += ((u.get(p, j) - u.get(q, j)) / h).powi(2);
                }
            }
            acc.sqrt()
        })
        .collect()
}

/// Validates estimates for one operator on one grid.
pub struct Estimator {
    spec: OperatorSpec,
    fine: Level,
    coarse: Option<(Level, Vec<usize>)>,
    opts: EvolveOptions,
    constants: HypothesisConstants,
}

impl Estimator {
    pub fn new(spec: &OperatorSpec, grid: &Grid, opts: EvolveOptions, constants: HypothesisConstants) -> Result<Self> {
        let fine = Level::new(spec, grid.clone(), INNER_FRACTION)?;
        let coarse = match grid.coarsen() {
            Some((g, map)) => Level::new(spec, g, INNER_FRACTION).ok().map(|l| (l, map)),
            None => None,
        };
        Ok(Self {
            spec: spec.clone(),
            fine,
            coarse,
            opts,
            constants,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.fine.grid
    }

    pub fn constants(&self) -> &HypothesisConstants {
        &self.constants
    }

    fn field(&self, grid: &Grid, exprs: &[Expr]) -> Result<VectorField> {
        VectorField::from_exprs(grid, exprs, self.spec.params())
    }

    fn norm_pow(&self, grid: &Grid, exprs: &[Expr], p: f64) -> Result<VectorField> {
        let f = self.field(grid, exprs)?;
        Ok(VectorField::from_data(1, f.pointwise_norm_sq().iter().map(|s| s.powf(p / 2.0)).collect())?)
    }

    /// Runs `sides` on the fine and coarse levels and assembles the report.
    fn check<F>(&self, id: &str, times: &[f64], opts: &EvolveOptions, sides: F) -> Result<EstimateReport>
    where
        F: Fn(&Level) -> Result<Vec<Sides>> + Sync,
    {
        let (fine, coarse) = rayon::join(
            || sides(&self.fine),
            || self.coarse.as_ref().map(|(l, _)| sides(l)),
        );
        let fine = fine?;
        let coarse = coarse.transpose()?;
        self.report(id, times, opts, fine, coarse, &self.fine.inner, self.coarse.as_ref().map(|(l, m)| (&l.inner, m)))
    }

    #[allow(clippy::too_many_arguments)]
    fn report(
        &self,
        id: &str,
        times: &[f64],
        opts: &EvolveOptions,
        fine: Vec<Sides>,
        coarse: Option<Vec<Sides>>,
        inner: &[bool],
        coarse_map: Option<(&Vec<bool>, &Vec<usize>)>,
    ) -> Result<EstimateReport> {
        let grid = &self.fine.grid;
        let mut per_time = Vec::with_capacity(fine.len());
        for s in &fine {
            let mut best: Option<usize> = None;
            let mut rhs_max = f64::NEG_INFINITY;
            for n in (0..grid.len()).filter(|&n| inner[n]) {
                rhs_max = rhs_max.max(s.rhs[n]);
                let mg = s.lhs[n] - s.rhs[n];
                if best.is_none_or(|b| mg > s.lhs[b] - s.rhs[b]) {
                    best = Some(n);
                }
            }
            let n = best.ok_or_else(|| Error::GridTooCoarse("no inner nodes".into()))?;
            per_time.push(TimeMargin {
                t: s.t,
                margin: s.lhs[n] - s.rhs[n],
                at: grid.point(n),
                lhs: s.lhs[n],
                rhs: s.rhs[n],
                rhs_max,
            });
        }
        let eps = match (&coarse, coarse_map) {
            (Some(c), Some((cinner, map))) => {
                let mut e: f64 = 0.0;
                for (sf, sc) in fine.iter().zip(c) {
                    for (nc, &nf) in map.iter().enumerate() {
                        if cinner[nc] && inner[nf] {
                            let df = sf.lhs[nf] - sf.rhs[nf];
                            let dc = sc.lhs[nc] - sc.rhs[nc];
                            e = e.max((df - dc).abs());
                        }
                    }
                }
                Some(e / 3.0)
            }
            _ => None,
        };
        let worst = per_time
            .iter()
            .max_by(|a, b| a.margin.total_cmp(&b.margin))
            .cloned()
            .ok_or_else(|| Error::InvalidArgument("no times".into()))?;
        let slack = ABSOLUTE_SLACK + eps.unwrap_or(0.0);
        let dx = grid.spacing(0);
        let mut warnings = Vec::new();
        if !self.constants.strict {
            warnings.push(format!(
                "hypothesis not strictly satisfied (sigma_{} = {:e})",
                self.constants.p0, self.constants.sigma
            ));
        }
        if eps.is_none() {
            warnings.push("no nested coarse grid: discretisation slack not estimated".into());
        }
        Ok(EstimateReport {
            id: id.to_string(),
            times: times.to_vec(),
            worst_margin: worst.margin,
            worst_time: worst.t,
            worst_point: worst.at.clone(),
            lhs_at_worst: worst.lhs,
            rhs_at_worst: worst.rhs,
            per_time,
            slack,
            inner_fraction: INNER_FRACTION,
            hypothesis: Some(self.constants),
            gradient: None,
            discretization: Discretization {
                nodes: grid.axes().iter().map(|a| a.nodes).collect(),
                spacing: (0..grid.dim()).map(|a| grid.spacing(a)).collect(),
                dt: opts.dt,
                scheme: opts.scheme,
                coarse_nodes: self.coarse.as_ref().map(|(l, _)| l.grid.axes().iter().map(|a| a.nodes).collect()),
                eps_disc: eps,
                c_disc: eps.map(|e| e / (dx * dx)),
            },
            warnings,
            pass: worst.margin <= slack,
            sides: fine,
            inner: inner.to_vec(),
        })
    }

    /// `|T(t) f|^2 <= e^{2 beta t} T(t)|f|^2`.
    pub fn check_pointwise_bound(&self, f: &[Expr], times: &[f64]) -> Result<EstimateReport> {
        let times = sorted_times(times)?;
        let beta = self.constants.beta;
        self.check("pointwise", &times, &self.opts, |lvl| {
            let u = evolve_at(&lvl.vector, &self.field(&lvl.grid, f)?, &times, &self.opts)?;
            let s = evolve_at(&lvl.scalar, &self.norm_pow(&lvl.grid, f, 2.0)?, &times, &self.opts)?;
            Ok(times
                .iter()
                .zip(u.iter().zip(&s))
                .map(|(&t, (u, s))| Sides {
                    t,
                    lhs: u.pointwise_norm_sq(),
                    rhs: s.as_slice().iter().map(|v| (2.0 * beta * t).exp() * v).collect(),
                })
                .collect())
        })
    }

    /// `|J T(t) f|^p <= e^{p sigma t} T(t)|J f|^p` for differentiable `f`.
    pub fn check_gradient_smooth(&self, f: &[Expr], p: f64, times: &[f64]) -> Result<EstimateReport> {
        let times = sorted_times(times)?;
        if !(p >= self.constants.p0) {
            return Err(Error::InvalidArgument(format!("p = {p} is below p0 = {}", self.constants.p0)));
        }
        let d = self.spec.dim();
        let grads = f
            .iter()
            .map(|e| (0..d).map(|a| e.differentiate(a)).collect::<std::result::Result<Vec<_>, _>>())
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let flat: Vec<Expr> = grads.into_iter().flatten().collect();
        let sigma = self.constants.sigma;
        self.check("gradient-smooth", &times, &self.opts, |lvl| {
            let u = evolve_at(&lvl.vector, &self.field(&lvl.grid, f)?, &times, &self.opts)?;
            let g = evolve_at(&lvl.scalar, &self.norm_pow(&lvl.grid, &flat, p)?, &times, &self.opts)?;
            Ok(times
                .iter()
                .zip(u.iter().zip(&g))
                .map(|(&t, (u, g))| Sides {
                    t,
                    lhs: jacobian_norm(&lvl.grid, u, &lvl.inner).iter().map(|v| v.powf(p)).collect(),
                    rhs: g.as_slice().iter().map(|v| (p * sigma * t).exp() * v).collect(),
                })
                .collect())
        })
    }

    /// `|J T(t) f|^p <= C_p e^{p sigma t} max(1, t^{-p/2}) T(t)|f|^p`.
    pub fn check_gradient_rough(&self, f: &[Expr], p: f64, times: &[f64]) -> Result<EstimateReport> {
        let times = sorted_times(times)?;
        if times[0] <= 0.0 {
            return Err(Error::InvalidArgument("rough-data gradient bound needs t > 0".into()));
        }
        if !(p >= self.constants.p0) {
            return Err(Error::InvalidArgument(format!("p = {p} is below p0 = {}", self.constants.p0)));
        }
        let gc = gradient_constants(p, self.spec.dim(), self.spec.components(), &self.constants)?;
        let opts = EvolveOptions {
            dt: self.opts.dt.min(times[0] / 20.0),
            ..self.opts
        };
        let sigma = self.constants.sigma;
        let mut report = self.check("gradient-rough", &times, &opts, |lvl| {
            let u = evolve_at(&lvl.vector, &self.field(&lvl.grid, f)?, &times, &opts)?;
            let s = evolve_at(&lvl.scalar, &self.norm_pow(&lvl.grid, f, p)?, &times, &opts)?;
            Ok(times
                .iter()
                .zip(u.iter().zip(&s))
                .map(|(&t, (u, s))| {
                    let factor = gc.c_p * (p * sigma * t).exp() * t.powf(-p / 2.0).max(1.0);
                    Sides {
                        t,
                        lhs: jacobian_norm(&lvl.grid, u, &lvl.inner).iter().map(|v| v.powf(p)).collect(),
                        rhs: s.as_slice().iter().map(|v| factor * v).collect(),
                    }
                })
                .collect())
        })?;
        if gc.k_p_from_proof {
            report
                .warnings
                .push("printed k_p vanishes (xi = 0); using the constant from the proof".into());
        }
        report.gradient = Some(gc);
        Ok(report)
    }

    /// `T(t) phi <= a/c + phi` on the inner half of a Dirichlet box with
    /// `phi` frozen on the boundary.
    pub fn check_lyapunov_semigroup_bound(
        &self,
        phi: &Expr,
        a_star: f64,
        c_star: f64,
        times: &[f64],
    ) -> Result<EstimateReport> {
        if !(c_star > 0.0) {
            return Err(Error::InvalidArgument(format!("c* must be positive, got {c_star}")));
        }
        let times = sorted_times(times)?;
        let scalar = self.spec.scalar_part();
        let build = |g: &Grid| -> Result<(Grid, DiscreteOperator, Vec<bool>)> {
            let centers: Vec<f64> = g.axes().iter().map(|a| a.center).collect();
            let widths: Vec<f64> = g.axes().iter().map(|a| a.half_width).collect();
            let nodes: Vec<usize> = g.axes().iter().map(|a| a.nodes).collect();
            let dg = Grid::with_axes(&centers, &widths, &nodes, Boundary::Dirichlet)?;
            let op = DiscreteOperator::assemble(&scalar, &dg)?;
            let inner = dg.inner_mask(0.5);
            Ok((dg, op, inner))
        };
        let fine = build(&self.fine.grid)?;
        let coarse = match &self.coarse {
            Some((l, map)) => Some((build(&l.grid)?, map)),
            None => None,
        };
        let bound = a_star / c_star;
        let run = |(g, op, _): &(Grid, DiscreteOperator, Vec<bool>)| -> Result<Vec<Sides>> {
            let f = VectorField::from_exprs(g, std::slice::from_ref(phi), self.spec.params())?;
            let u = evolve_at(op, &f, &times, &self.opts)?;
            Ok(times
                .iter()
                .zip(&u)
                .map(|(&t, u)| Sides {
                    t,
                    lhs: u.as_slice().to_vec(),
                    rhs: f.as_slice().iter().map(|v| bound + v).collect(),
                })
                .collect())
        };
        let (sf, sc) = rayon::join(|| run(&fine), || coarse.as_ref().map(|(c, _)| run(c)));
        let mut r = self.report(
            "lyapunov-semigroup",
            &times,
            &self.opts,
            sf?,
            sc.transpose()?,
            &fine.2,
            coarse.as_ref().map(|((_, _, inner), map)| (inner, *map)),
        )?;
        r.inner_fraction = 0.5;
        r.warnings.retain(|w| !w.starts_with("hypothesis"));
        Ok(r)
    }

    /// `rho(T) = sup_{t <= T, x inner} |T(t) f(x)| / (||f|| phi(x)^{1/gamma})`
    /// at `T/2` and `T`.
    pub fn check_global_bound(&self, f: &[Expr], phi: &Expr, gamma: f64, horizon: f64) -> Result<GlobalBoundReport> {
        if !(horizon > 0.0) || !(gamma > 0.0) {
            return Err(Error::InvalidArgument("horizon and gamma must be positive".into()));
        }
        let lvl = &self.fine;
        let u0 = self.field(&lvl.grid, f)?;
        let norm = u0.norm_inf();
        let phis = VectorField::from_exprs(&lvl.grid, std::slice::from_ref(phi), self.spec.params())?;
        let weight: Vec<f64> = phis.as_slice().iter().map(|p| p.powf(1.0 / gamma)).collect();
        let every = ((0.05 / self.opts.dt).round() as usize).max(1);
        let traj = evolve(
            &lvl.vector,
            &u0,
            horizon,
            &EvolveOptions {
                snapshot_every: every,
                ..self.opts
            },
        )?;
        let ratios: Vec<(f64, f64, usize)> = traj
            .times
            .par_iter()
            .zip(&traj.states)
            .map(|(&t, u)| {
                let sq = u.pointwise_norm_sq();
                let mut best = (0.0, 0);
                for n in (0..lvl.grid.len()).filter(|&n| lvl.inner[n]) {
                    let r = if norm == 0.0 { 0.0 } else { sq[n].sqrt() / (norm * weight[n]) };
                    if r > best.0 {
                        best = (r, n);
                    }
                }
                (t, best.0, best.1)
            })
            .collect();
        let sup_until = |t_end: f64| {
            ratios
                .iter()
                .filter(|(t, _, _)| *t <= t_end + 1e-9)
                .fold((0.0, 0.0, 0), |acc, r| if r.1 > acc.1 { *r } else { acc })
        };
        let half = sup_until(horizon / 2.0);
        let full = sup_until(horizon);
        let growth = if half.1 > 0.0 { (full.1 - half.1) / half.1 } else { 0.0 };
        Ok(GlobalBoundReport {
            horizon,
            gamma,
            rho_half: half.1,
            rho_full: full.1,
            growth,
            attained_at_time: full.0,
            attained_at: lvl.grid.point(full.2),
            inner_fraction: INNER_FRACTION,
            pass: growth <= GROWTH_LIMIT,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GlobalBoundReport {
    pub horizon: f64,
    pub gamma: f64,
    pub rho_half: f64,
    pub rho_full: f64,
    /// `(rho(T) - rho(T/2)) / rho(T/2)`.
    pub growth: f64,
    pub attained_at_time: f64,
    pub attained_at: Vec<f64>,
    pub inner_fraction: f64,
    pub pass: bool,
}
