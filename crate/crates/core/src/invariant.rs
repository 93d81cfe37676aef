//! Systems of invariant measures: canonical systems from time-averaged
//! kernel rows, invariance residuals, linear-combination fits and long-time
//! limits.
//!
//! All densities are with respect to Lebesgue measure and live on the nodes
//! of one grid; integrals use the trapezoid weights of that grid.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::density::{DensityProfile, Provenance};
use crate::expr::{parse, Expr, Scope};
use crate::grid::Grid;
use crate::operator::{OperatorSpec, VectorField};
use crate::solver::{evolve, DiscreteOperator, Direction, EvolveOptions, Propagator, Scheme, Startup};
use crate::{Error, Result};

/// L1 comparisons skip the outer quarter of the box.
pub const INNER_FRACTION: f64 = 0.75;
/// Tail diagnostic above which an extraction is flagged as not converged.
pub const TAIL_TOLERANCE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemProvenance {
    Extracted,
    Ode,
    ClosedForm,
    Manual,
}

/// `m` Lebesgue densities `h[j][node]` of one system `{mu_j}`.
#[derive(Debug, Clone, Serialize)]
pub struct InvariantSystem {
    #[serde(skip)]
    pub h: Vec<Vec<f64>>,
    pub masses: Vec<f64>,
    pub provenance: SystemProvenance,
}

impl InvariantSystem {
    pub fn new(grid: &Grid, h: Vec<Vec<f64>>, provenance: SystemProvenance) -> Result<Self> {
        if h.is_empty() || h.iter().any(|c| c.len() != grid.len()) {
            return Err(Error::DimensionMismatch(format!(
                "densities must have {} nodes each",
                grid.len()
            )));
        }
        let masses = h.iter().map(|c| grid.integrate(c)).collect();
        Ok(Self { h, masses, provenance })
    }

    /// Lebesgue densities `rho_i rho_mu` of a one-dimensional profile on
    /// the same nodes as `grid`.
    pub fn from_profile(grid: &Grid, profile: &DensityProfile) -> Result<Self> {
        if grid.dim() != 1 || profile.x.len() != grid.len() {
            return Err(Error::DimensionMismatch("profile does not live on this grid".into()));
        }
        let provenance = match profile.provenance {
            Provenance::Ode => SystemProvenance::Ode,
            Provenance::ClosedForm => SystemProvenance::ClosedForm,
        };
        Self::new(grid, profile.lebesgue(), provenance)
    }

    pub fn components(&self) -> usize {
        self.h.len()
    }

    /// `sum_j ||h_j||_{L1}`.
    pub fn total_variation(&self, grid: &Grid) -> f64 {
        self.h
            .iter()
            .map(|c| grid.integrate(&c.iter().map(|v| v.abs()).collect::<Vec<_>>()))
            .sum()
    }

    /// `sum_j int f_j h_j dx`.
    pub fn pair(&self, grid: &Grid, f: &VectorField) -> f64 {
        let w = grid.weights();
        let m = self.h.len();
        (0..grid.len())
            .map(|n| w[n] * (0..m).map(|j| f.get(n, j) * self.h[j][n]).sum::<f64>())
            .sum()
    }

    /// CSV with header `x1..xd,h1..hm`.
    pub fn to_csv(&self, grid: &Grid) -> String {
        let mut out = String::new();
        let names: Vec<String> = (1..=grid.dim())
            .map(|a| format!("x{a}"))
            .chain((1..=self.h.len()).map(|j| format!("h{j}")))
            .collect();
        out.push_str(&names.join(","));
        out.push('\n');
        for (n, p) in grid.points().iter().enumerate() {
            let row: Vec<String> = p
                .iter()
                .map(|x| format!("{x:e}"))
                .chain(self.h.iter().map(|c| format!("{:e}", c[n])))
                .collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }
}

/// The canonical systems `{mu^i_j}`: `rows[i]` is the system generated by
/// the kernel row of component `i`.
#[derive(Debug, Clone, Serialize)]
pub struct CanonicalBundle {
    pub x0: Vec<f64>,
    pub snapped: bool,
    pub horizon: f64,
    pub dt: f64,
    pub rows: Vec<InvariantSystem>,
    /// `masses[i][j] = mu^i_j(R^d)`.
    pub masses: Vec<Vec<f64>>,
    /// `||avg(T) - avg(T/2)||_{L1}` per row (summed over `j`).
    pub tail_diagnostic: Vec<f64>,
    /// The same at horizon `T/2`.
    pub tail_diagnostic_half: Vec<f64>,
    /// Mass of `|h[i][j]|` outside the inner box, per row.
    pub excluded_tail_mass: Vec<f64>,
    /// `max_t |total mass - 1|` along each kernel row.
    pub mass_drift: Vec<f64>,
    pub converged: bool,
}

impl CanonicalBundle {
    pub fn mass_table_csv(&self) -> String {
        let m = self.masses.len();
        let mut out = String::from("i");
        for j in 1..=m {
            let _ = write!(out, ",mass_{j}");
        }
        out.push('\n');
        for (i, row) in self.masses.iter().enumerate() {
            let _ = write!(out, "{}", i + 1);
            for v in row {
                let _ = write!(out, ",{v:e}");
            }
            out.push('\n');
        }
        out
    }

    /// CSV with header `x1..xd,h11,h12,..,hmm`.
    pub fn to_csv(&self, grid: &Grid) -> String {
        systems_csv(grid, &self.rows)
    }
}

/// CSV of systems `rows[i]` with header `x1..xd,h11,h12,..,hmm`.
pub fn systems_csv(grid: &Grid, rows: &[InvariantSystem]) -> String {
    let mut names: Vec<String> = (1..=grid.dim()).map(|a| format!("x{a}")).collect();
    for (i, r) in rows.iter().enumerate() {
        for j in 1..=r.h.len() {
            names.push(format!("h{}{j}", i + 1));
        }
    }
    let mut out = names.join(",");
    out.push('\n');
    for (n, p) in grid.points().iter().enumerate() {
        let mut row: Vec<String> = p.iter().map(|x| format!("{x:e}")).collect();
        for r in rows {
            for c in &r.h {
                row.push(format!("{:e}", c[n]));
            }
        }
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

/// `x0` for the extraction: the node minimising `phi`, or the box centre.
pub fn default_base_point(grid: &Grid, phi: Option<&Expr>, params: &crate::Params) -> Result<Vec<f64>> {
    let Some(phi) = phi else {
        return Ok(grid.axes().iter().map(|a| a.center).collect());
    };
    let mut best = (f64::INFINITY, 0);
    for (n, p) in grid.points().iter().enumerate() {
        let v = phi.eval(p, params).map_err(|source| Error::Eval {
            what: "phi".into(),
            point: p.clone(),
            source,
        })?;
        if v < best.0 {
            best = (v, n);
        }
    }
    Ok(grid.point(best.1))
}

struct AveragedRow {
    /// Cesaro averages of nodal masses at `T/4`, `T/2`, `T`.
    averages: [Vec<f64>; 3],
    drift: f64,
    snapped: bool,
    point: Vec<f64>,
}

/// Evolves the delta mass at `x0` in component `i` under `A^T`,
/// accumulating the trapezoid time average on the fly.
fn averaged_row(op: &DiscreteOperator, x0: &[f64], i: usize, horizon: f64, opts: &EvolveOptions) -> Result<AveragedRow> {
    let grid = op.grid();
    let m = op.components();
    let node = grid.nearest_node(x0);
    let steps = ((horizon / opts.dt) - 1e-9).ceil().max(4.0) as usize;
    let steps = steps.div_ceil(4) * 4;
    let dt = horizon / steps as f64;
    let prop = Propagator::new(op, Direction::Forward, opts.scheme, dt, opts.solver)?;
    let mut u = vec![0.0; op.unknowns()];
    u[node * m + i] = 1.0;
    let smooth = opts.scheme == Scheme::CrankNicolson && opts.startup != Startup::Never;
    let mut acc: Vec<f64> = u.iter().map(|v| 0.5 * dt * v).collect();
    let mut averages: [Vec<f64>; 3] = Default::default();
    let mut drift: f64 = 0.0;
    for k in 1..=steps {
        u = if k == 1 && smooth { prop.smoothing_step(&u)? } else { prop.step(&u)? };
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteStep { step: k, time: k as f64 * dt });
        }
        drift = drift.max((u.iter().sum::<f64>() - 1.0).abs());
        for (a, v) in acc.iter_mut().zip(&u) {
            *a += dt * v;
        }
        for (slot, quarter) in [1usize, 2, 4].iter().enumerate() {
            if k == steps / 4 * quarter {
                let t = k as f64 * dt;
                averages[slot] = acc.iter().zip(&u).map(|(a, v)| (a - 0.5 * dt * v) / t).collect();
            }
        }
    }
    Ok(AveragedRow {
        averages,
        drift,
        snapped: grid.node_at(x0).is_none(),
        point: grid.point(node),
    })
}

fn split_densities(grid: &Grid, masses: &[f64], m: usize) -> Vec<Vec<f64>> {
    let w = grid.weights();
    (0..m)
        .map(|j| (0..grid.len()).map(|n| masses[n * m + j] / w[n]).collect())
        .collect()
}

fn l1_diff(grid: &Grid, a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| grid.integrate(&x.iter().zip(y).map(|(p, q)| (p - q).abs()).collect::<Vec<_>>()))
        .sum()
}

/// Time-averaged kernel rows at `x0` for every component, in parallel.
///
/// The Crank-Nicolson start-up is always smoothed here since the initial
/// datum is a point mass (unless `opts.startup` is `Never`).
pub fn extract_canonical_systems(
    op: &DiscreteOperator,
    x0: &[f64],
    horizon: f64,
    opts: &EvolveOptions,
) -> Result<CanonicalBundle> {
    if !(horizon > 0.0) {
        return Err(Error::InvalidArgument(format!("averaging horizon must be positive, got {horizon}")));
    }
    if x0.len() != op.grid().dim() {
        return Err(Error::DimensionMismatch("x0 dimension".into()));
    }
    let grid = op.grid();
    let m = op.components();
    let rows = (0..m)
        .into_par_iter()
        .map(|i| averaged_row(op, x0, i, horizon, opts))
        .collect::<Result<Vec<_>>>()?;
    let inner = grid.inner_mask(INNER_FRACTION);
    let w = grid.weights();
    let mut systems = Vec::with_capacity(m);
    let mut tail = Vec::with_capacity(m);
    let mut tail_half = Vec::with_capacity(m);
    let mut excluded = Vec::with_capacity(m);
    for r in &rows {
        let full = split_densities(grid, &r.averages[2], m);
        let half = split_densities(grid, &r.averages[1], m);
        let quarter = split_densities(grid, &r.averages[0], m);
        tail.push(l1_diff(grid, &full, &half));
        tail_half.push(l1_diff(grid, &half, &quarter));
        excluded.push(
            full.iter()
                .map(|c| (0..grid.len()).filter(|&n| !inner[n]).map(|n| w[n] * c[n].abs()).sum::<f64>())
                .sum(),
        );
        systems.push(InvariantSystem::new(grid, full, SystemProvenance::Extracted)?);
    }
    let masses = systems.iter().map(|s| s.masses.clone()).collect();
    let steps = (((horizon / opts.dt) - 1e-9).ceil().max(4.0) as usize).div_ceil(4) * 4;
    Ok(CanonicalBundle {
        x0: rows[0].point.clone(),
        snapped: rows[0].snapped,
        horizon,
        dt: horizon / steps as f64,
        converged: tail.iter().all(|t| *t <= TAIL_TOLERANCE),
        mass_drift: rows.iter().map(|r| r.drift).collect(),
        rows: systems,
        masses,
        tail_diagnostic: tail,
        tail_diagnostic_half: tail_half,
        excluded_tail_mass: excluded,
    })
}

/// L1 distance on the inner box between two systems on the same grid,
/// maximised over components.
pub fn inner_l1_distance(grid: &Grid, a: &InvariantSystem, b: &InvariantSystem) -> Result<f64> {
    if a.components() != b.components() || a.h[0].len() != b.h[0].len() {
        return Err(Error::DimensionMismatch("systems differ in shape".into()));
    }
    let inner = grid.inner_mask(INNER_FRACTION);
    let w = grid.weights();
    Ok(a.h
        .iter()
        .zip(&b.h)
        .map(|(x, y)| {
            (0..grid.len())
                .filter(|&n| inner[n])
                .map(|n| w[n] * (x[n] - y[n]).abs())
                .sum::<f64>()
        })
        .fold(0.0, f64::max))
}

/// Seeded battery of smooth test fields: Gaussian bumps, some modulated by
/// a cosine, centred in the inner half of the box.
pub fn test_battery(grid: &Grid, components: usize, count: usize, seed: u64) -> Result<Vec<Vec<Expr>>> {
    let d = grid.dim();
    let scope = Scope::new(d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let mut field = Vec::with_capacity(components);
        for _ in 0..components {
            let amp: f64 = rng.random_range(-1.0..1.0);
            let mut factors = vec![format!("{amp:?}")];
            for (a, ax) in grid.axes().iter().enumerate() {
                let c = ax.center + rng.random_range(-0.5..0.5) * ax.half_width;
                let w = rng.random_range(0.08..0.2) * ax.half_width;
                factors.push(format!("exp(-((x{} - {c:?})/{w:?})^2)", a + 1));
                if k % 2 == 1 {
                    let freq: f64 = rng.random_range(0.5..3.0);
                    let phase: f64 = rng.random_range(0.0..6.0);
                    factors.push(format!("cos({freq:?}*x{} + {phase:?})", a + 1));
                }
            }
            field.push(parse(&factors.join("*"), &scope)?);
        }
        out.push(field);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct Residual {
    /// Worst normalised residual over the battery.
    pub worst: f64,
    pub worst_index: usize,
    pub per_field: Vec<f64>,
}

fn worst(per_field: Vec<f64>) -> Residual {
    let mut idx = 0;
    for (k, v) in per_field.iter().enumerate() {
        if *v > per_field[idx] {
            idx = k;
        }
    }
    Residual {
        worst: per_field.get(idx).copied().unwrap_or(0.0),
        worst_index: idx,
        per_field,
    }
}

fn check_system(op: &DiscreteOperator, system: &InvariantSystem) -> Result<()> {
    if system.components() != op.components() || system.h[0].len() != op.grid().len() {
        return Err(Error::DimensionMismatch(format!(
            "system has {} densities on {} nodes; operator has {} components on {} nodes",
            system.components(),
            system.h[0].len(),
            op.components(),
            op.grid().len()
        )));
    }
    Ok(())
}

/// `|<T(t) f, h> - <f, h>| / sum_j ||f_j||_inf ||h_j||_1`, maximised over
/// the fields.
pub fn invariance_residual_semigroup(
    op: &DiscreteOperator,
    system: &InvariantSystem,
    fields: &[VectorField],
    t: f64,
    opts: &EvolveOptions,
) -> Result<Residual> {
    check_system(op, system)?;
    let grid = op.grid();
    let opts = EvolveOptions {
        snapshot_every: usize::MAX,
        ..*opts
    };
    let l1: Vec<f64> = system
        .h
        .iter()
        .map(|c| grid.integrate(&c.iter().map(|v| v.abs()).collect::<Vec<_>>()))
        .collect();
    let per = fields
        .par_iter()
        .map(|f| {
            let u = evolve(op, f, t, &opts)?;
            let diff = system.pair(grid, u.last()) - system.pair(grid, f);
            let scale: f64 = (0..f.components())
                .map(|j| f.component(j).iter().fold(0.0f64, |m, v| m.max(v.abs())) * l1[j])
                .sum();
            Ok(if scale > 0.0 { diff.abs() / scale } else { diff.abs() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(worst(per))
}

/// `|sum_i int (A f)_i h_i dx| / sum_i int |(A f)_i h_i| dx` with `A f`
/// computed symbolically.
pub fn invariance_residual_generator(
    spec: &OperatorSpec,
    grid: &Grid,
    system: &InvariantSystem,
    fields: &[Vec<Expr>],
) -> Result<Residual> {
    if system.components() != spec.components() || system.h[0].len() != grid.len() {
        return Err(Error::DimensionMismatch("system does not match the operator and grid".into()));
    }
    let w = grid.weights();
    let per = fields
        .par_iter()
        .map(|f| {
            let af = VectorField::from_exprs(grid, &spec.apply_symbolic(f)?, spec.params())?;
            let (mut s, mut scale) = (0.0, 0.0);
            for n in 0..grid.len() {
                for (j, h) in system.h.iter().enumerate() {
                    let v = w[n] * af.get(n, j) * h[n];
                    s += v;
                    scale += v.abs();
                }
            }
            Ok(if scale > 0.0 { s.abs() / scale } else { 0.0 })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(worst(per))
}

#[derive(Debug, Clone, Serialize)]
pub struct CombinationFit {
    pub coefficients: Vec<f64>,
    /// `||h - sum c_i h^i|| / ||h||` in the weighted L2 norm.
    pub relative_residual: f64,
    /// `max_i |c_i - mu_i(R^d)|`.
    pub mass_mismatch: f64,
    pub reliable: bool,
}

/// Least-squares `h_j ~ sum_i c_i h^i_j` jointly over `j`.
pub fn fit_combination(grid: &Grid, bundle: &CanonicalBundle, system: &InvariantSystem) -> Result<CombinationFit> {
    let m = bundle.rows.len();
    if system.components() != m || system.h[0].len() != grid.len() {
        return Err(Error::DimensionMismatch("system and bundle differ in shape".into()));
    }
    let w = grid.weights();
    let inner = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (0..grid.len()).map(|n| w[n] * x[n] * y[n]).sum::<f64>())
            .sum()
    };
    let gram = DMatrix::from_fn(m, m, |i, k| inner(&bundle.rows[i].h, &bundle.rows[k].h));
    let rhs = DVector::from_fn(m, |i, _| inner(&bundle.rows[i].h, &system.h));
    let c = gram
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("Gram matrix of the canonical bundle".into()))?;
    let coefficients: Vec<f64> = c.iter().copied().collect();
    let fitted: Vec<Vec<f64>> = (0..m)
        .map(|j| {
            (0..grid.len())
                .map(|n| (0..m).map(|i| coefficients[i] * bundle.rows[i].h[j][n]).sum())
                .collect()
        })
        .collect();
    let resid: Vec<Vec<f64>> = system
        .h
        .iter()
        .zip(&fitted)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
        .collect();
    let norm = inner(&system.h, &system.h).sqrt();
    let relative_residual = if norm > 0.0 { inner(&resid, &resid).sqrt() / norm } else { 0.0 };
    let mass_mismatch = coefficients
        .iter()
        .zip(&system.masses)
        .map(|(c, mu)| (c - mu).abs())
        .fold(0.0, f64::max);
    let scale = 1.0 + coefficients.iter().fold(0.0f64, |a, c| a.max(c.abs()));
    Ok(CombinationFit {
        reliable: relative_residual <= 5e-2 && mass_mismatch <= 1e-2 * scale,
        coefficients,
        relative_residual,
        mass_mismatch,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeLimit {
    pub point: Vec<f64>,
    /// `(T(T/2) f)(x)` and `(T(T) f)(x)` per component.
    pub at_half: Vec<f64>,
    pub at_full: Vec<f64>,
    pub error_half: f64,
    pub error_full: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AsymptoticReport {
    pub horizon: f64,
    /// `l_i = sum_j int f_j h^i_j dx`.
    pub predicted: Vec<f64>,
    pub probes: Vec<ProbeLimit>,
    pub worst_error: f64,
    /// `worst error at T / worst error at T/2`.
    pub decay_ratio: f64,
}

/// Compares `T(t) f` at probe points with the limit predicted by the
/// canonical systems `canonical[i]`.
pub fn asymptotic_limit(
    op: &DiscreteOperator,
    canonical: &[InvariantSystem],
    f: &VectorField,
    probes: &[Vec<f64>],
    horizon: f64,
    opts: &EvolveOptions,
) -> Result<AsymptoticReport> {
    let grid = op.grid();
    if canonical.len() != op.components() {
        return Err(Error::DimensionMismatch("need one canonical system per component".into()));
    }
    for s in canonical {
        check_system(op, s)?;
    }
    let predicted: Vec<f64> = canonical.iter().map(|s| s.pair(grid, f)).collect();
    let opts = EvolveOptions {
        snapshot_every: usize::MAX,
        ..*opts
    };
    let half = evolve(op, f, horizon / 2.0, &opts)?.last().clone();
    let full = evolve(op, &half, horizon / 2.0, &opts)?.last().clone();
    let m = op.components();
    let sample = |u: &VectorField, p: &[f64]| -> Result<Vec<f64>> {
        (0..m)
            .map(|j| {
                grid.interpolate(&u.component(j), p)
                    .ok_or_else(|| Error::InvalidArgument(format!("probe {p:?} lies outside the grid")))
            })
            .collect()
    };
    let err = |v: &[f64]| v.iter().zip(&predicted).fold(0.0f64, |a, (x, l)| a.max((x - l).abs()));
    let probes = probes
        .iter()
        .map(|p| {
            let at_half = sample(&half, p)?;
            let at_full = sample(&full, p)?;
            Ok(ProbeLimit {
                point: p.clone(),
                error_half: err(&at_half),
                error_full: err(&at_full),
                at_half,
                at_full,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let worst_full = probes.iter().fold(0.0f64, |a, p| a.max(p.error_full));
    let worst_half = probes.iter().fold(0.0f64, |a, p| a.max(p.error_half));
    Ok(AsymptoticReport {
        horizon,
        predicted,
        worst_error: worst_full,
        decay_ratio: if worst_half > 0.0 { worst_full / worst_half } else { 0.0 },
        probes,
    })
}
