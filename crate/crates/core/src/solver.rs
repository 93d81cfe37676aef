//! Assembled operators, implicit time stepping of the backward and forward
//! equations, Cesaro averages, resolvents and the Duhamel consistency check.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::{Boundary, Grid};
use crate::operator::{Coefficients, OperatorSpec, VectorField};
use crate::sparse::{CsrMatrix, IterativeOptions, LinearSolver};
use crate::{Error, Result};

/// Default cap on the number of unknowns (`nodes * components`).
pub const DEFAULT_UNKNOWN_CAP: usize = 8_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    CrankNicolson,
    ImplicitEuler,
}

/// Rannacher start-up: the first Crank-Nicolson step is replaced by two
/// implicit Euler half steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Startup {
    /// Smooth when the initial datum looks rough or `dt |A f| > 0.1 |f|`.
    #[default]
    Auto,
    Always,
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    /// Banded LU in one dimension, BiCGSTAB otherwise.
    #[default]
    Auto,
    Direct,
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolveOptions {
    pub scheme: Scheme,
    pub dt: f64,
    /// Store every `snapshot_every`-th step (the final state is always kept).
    pub snapshot_every: usize,
    pub startup: Startup,
    pub solver: SolverKind,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self {
            scheme: Scheme::CrankNicolson,
            dt: 1e-3,
            snapshot_every: 10,
            startup: Startup::Auto,
            solver: SolverKind::Auto,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `dU/dt = A U`.
    Backward,
    /// `dM/dt = A^T M`.
    Forward,
}

/// `A` for one boundary condition together with its exact transpose.
#[derive(Debug, Clone)]
pub struct DiscreteOperator {
    grid: Grid,
    components: usize,
    matrix: CsrMatrix,
    transpose: CsrMatrix,
    upwind_nodes: Vec<usize>,
    max_peclet: f64,
}

impl DiscreteOperator {
    /// Central differences with first-order upwinding of the drift wherever
    /// the grid Peclet number exceeds 1.
    pub fn assemble(spec: &OperatorSpec, grid: &Grid) -> Result<Self> {
        Self::assemble_with(spec, grid, true, DEFAULT_UNKNOWN_CAP)
    }

    pub fn assemble_with(spec: &OperatorSpec, grid: &Grid, upwind: bool, cap: usize) -> Result<Self> {
        let m = spec.components();
        grid.check_capacity(m, cap)?;
        let coeffs = Coefficients::forward(spec, grid)?;
        let frozen = grid.boundary() == Boundary::Dirichlet;
        let per_node: Vec<(Vec<(usize, usize, f64)>, bool, f64)> = (0..grid.len())
            .into_par_iter()
            .map(|n| {
                let pe = (0..grid.dim())
                    .map(|k| coeffs.peclet(grid, n, k))
                    .fold(0.0, f64::max);
                if frozen && grid.on_boundary(n) {
                    return (Vec::new(), false, pe);
                }
                let mut buf = Vec::new();
                let up = coeffs.rows(grid, n, upwind, &mut buf);
                let t = buf.into_iter().map(|(j, c, w)| (n * m + j, c, w)).collect();
                (t, up, pe)
            })
            .collect();
        let mut triplets = Vec::new();
        let mut upwind_nodes = Vec::new();
        let mut max_peclet: f64 = 0.0;
        for (n, (t, up, pe)) in per_node.into_iter().enumerate() {
            triplets.extend(t);
            if up {
                upwind_nodes.push(n);
            }
            max_peclet = max_peclet.max(pe);
        }
        let matrix = CsrMatrix::from_triplets(grid.len() * m, triplets);
        let transpose = matrix.transpose();
        Ok(Self {
            grid: grid.clone(),
            components: m,
            matrix,
            transpose,
            upwind_nodes,
            max_peclet,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn boundary(&self) -> Boundary {
        self.grid.boundary()
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn transpose(&self) -> &CsrMatrix {
        &self.transpose
    }

    pub fn upwind_nodes(&self) -> &[usize] {
        &self.upwind_nodes
    }

    pub fn max_peclet(&self) -> f64 {
        self.max_peclet
    }

    pub fn unknowns(&self) -> usize {
        self.matrix.dim()
    }

    pub fn apply(&self, u: &VectorField) -> VectorField {
        VectorField::from_data(self.components, self.matrix.matvec(u.as_slice()))
            .expect("matching sizes")
    }

    fn check(&self, u: &VectorField) -> Result<()> {
        if u.components() != self.components || u.nodes() != self.grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "field has {} components on {} nodes, operator expects {} on {}",
                u.components(),
                u.nodes(),
                self.components,
                self.grid.len()
            )));
        }
        Ok(())
    }
}

/// One implicit step of fixed size for a fixed operator and direction.
pub struct Propagator<'a> {
    matrix: &'a CsrMatrix,
    scheme: Scheme,
    dt: f64,
    solver: LinearSolver,
}

impl<'a> Propagator<'a> {
    pub fn new(op: &'a DiscreteOperator, direction: Direction, scheme: Scheme, dt: f64, kind: SolverKind) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
        }
        let matrix = match direction {
            Direction::Backward => &op.matrix,
            Direction::Forward => &op.transpose,
        };
        let theta = match scheme {
            Scheme::CrankNicolson => 0.5,
            Scheme::ImplicitEuler => 1.0,
        };
        let lhs = matrix.shifted(1.0, -theta * dt);
        let direct = match kind {
            SolverKind::Direct => true,
            SolverKind::Iterative => false,
            SolverKind::Auto => op.grid.dim() == 1,
        };
        let solver = if direct {
            LinearSolver::direct(&lhs)?
        } else {
            LinearSolver::iterative(&lhs, IterativeOptions::default())?
        };
        Ok(Self {
            matrix,
            scheme,
            dt,
            solver,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn step(&self, u: &[f64]) -> Result<Vec<f64>> {
        match self.scheme {
            Scheme::ImplicitEuler => self.solver.solve(u, Some(u)),
            Scheme::CrankNicolson => {
                let au = self.matrix.matvec(u);
                let rhs: Vec<f64> = u.iter().zip(&au).map(|(x, a)| x + 0.5 * self.dt * a).collect();
                self.solver.solve(&rhs, Some(u))
            }
        }
    }

    /// Two implicit Euler half steps (Crank-Nicolson) or one plain step.
    pub fn smoothing_step(&self, u: &[f64]) -> Result<Vec<f64>> {
        match self.scheme {
            Scheme::ImplicitEuler => self.step(u),
            Scheme::CrankNicolson => {
                let half = self.solver.solve(u, Some(u))?;
                self.solver.solve(&half, Some(&half))
            }
        }
    }
}

/// Snapshots of a time-stepped field.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<VectorField>,
    pub dt: f64,
    pub scheme: Scheme,
    pub smoothed_startup: bool,
}

impl Trajectory {
    pub fn last(&self) -> &VectorField {
        self.states.last().expect("trajectory holds the initial datum")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("non-empty")
    }

    /// Snapshot stored at time `t` (within `1e-9` of the step size).
    pub fn at(&self, t: f64) -> Option<&VectorField> {
        self.times
            .iter()
            .position(|s| (s - t).abs() <= 1e-9 * self.dt.max(1.0))
            .map(|i| &self.states[i])
    }

    /// CSV with header `t,x1..xd,u1..um` and one row per (time, node).
    pub fn to_csv(&self, grid: &Grid) -> String {
        let m = self.states.first().map_or(0, VectorField::components);
        let mut out = String::from("t");
        for a in 0..grid.dim() {
            let _ = write!(out, ",x{}", a + 1);
        }
        for j in 0..m {
            let _ = write!(out, ",u{}", j + 1);
        }
        out.push('\n');
        let points = grid.points();
        for (t, s) in self.times.iter().zip(&self.states) {
            for (n, p) in points.iter().enumerate() {
                let _ = write!(out, "{t:e}");
                for x in p {
                    let _ = write!(out, ",{x:e}");
                }
                for j in 0..m {
                    let _ = write!(out, ",{:e}", s.get(n, j));
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Heuristic for Rannacher smoothing: second differences comparable to the
/// field itself.
pub fn looks_rough(grid: &Grid, u: &VectorField) -> bool {
    let scale = u.norm_inf();
    if scale == 0.0 {
        return false;
    }
    let m = u.components();
    let data = u.as_slice();
    (0..grid.len()).any(|n| {
        (0..grid.dim()).any(|a| {
            let p = grid.neighbor(n, a, 1);
            let q = grid.neighbor(n, a, -1);
            (0..m).any(|j| (data[p * m + j] - 2.0 * data[n * m + j] + data[q * m + j]).abs() > 0.1 * scale)
        })
    })
}

/// `dt |A f| > 0.1 |f|`: the datum carries modes that Crank-Nicolson
/// would barely damp.
fn stiff_start(op: &DiscreteOperator, direction: Direction, f0: &VectorField, dt: f64) -> bool {
    let scale = f0.norm_inf();
    if scale == 0.0 {
        return false;
    }
    let a = match direction {
        Direction::Backward => &op.matrix,
        Direction::Forward => &op.transpose,
    };
    let af = a.matvec(f0.as_slice());
    dt * af.iter().fold(0.0, |m: f64, v| m.max(v.abs())) > 0.1 * scale
}

fn step_count(t_final: f64, dt: f64) -> Result<(usize, f64)> {
    if !(t_final >= 0.0 && t_final.is_finite()) {
        return Err(Error::InvalidArgument(format!("final time must be non-negative, got {t_final}")));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    if t_final == 0.0 {
        return Ok((0, dt));
    }
    let n = ((t_final / dt) - 1e-9).ceil().max(1.0) as usize;
    Ok((n, t_final / n as f64))
}

fn run(
    op: &DiscreteOperator,
    direction: Direction,
    f0: &VectorField,
    t_final: f64,
    opts: &EvolveOptions,
) -> Result<Trajectory> {
    op.check(f0)?;
    let (steps, dt) = step_count(t_final, opts.dt)?;
    let every = opts.snapshot_every.max(1);
    let smooth = opts.scheme == Scheme::CrankNicolson
        && match opts.startup {
            Startup::Always => true,
            Startup::Never => false,
            Startup::Auto => looks_rough(&op.grid, f0) || stiff_start(op, direction, f0, dt),
        };
    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![f0.clone()],
        dt,
        scheme: opts.scheme,
        smoothed_startup: smooth,
    };
    if steps == 0 {
        return Ok(traj);
    }
    let prop = Propagator::new(op, direction, opts.scheme, dt, opts.solver)?;
    let mut u = f0.as_slice().to_vec();
    for k in 1..=steps {
        u = if k == 1 && smooth {
            prop.smoothing_step(&u)?
        } else {
            prop.step(&u)?
        };
        let t = k as f64 * dt;
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteStep { step: k, time: t });
        }
        if k % every == 0 || k == steps {
            traj.times.push(t);
            traj.states.push(VectorField::from_data(op.components, u.clone())?);
        }
    }
    Ok(traj)
}

/// Solves `dU/dt = A U`, `U(0) = f0`.
pub fn evolve(op: &DiscreteOperator, f0: &VectorField, t_final: f64, opts: &EvolveOptions) -> Result<Trajectory> {
    run(op, Direction::Backward, f0, t_final, opts)
}

/// Solves `dM/dt = A^T M`, `M(0) = m0`.
pub fn evolve_forward(op: &DiscreteOperator, m0: &VectorField, t_final: f64, opts: &EvolveOptions) -> Result<Trajectory> {
    run(op, Direction::Forward, m0, t_final, opts)
}

/// Densities of the kernels `p_ij(t, x0, dy)` for fixed `x0` and `i`.
#[derive(Debug, Clone)]
pub struct KernelRow {
    pub node: usize,
    /// Grid node actually used for `x0`.
    pub point: Vec<f64>,
    pub snapped: bool,
    pub component: usize,
    /// Lebesgue densities (nodal masses divided by quadrature weights).
    pub densities: Trajectory,
    /// Total signed mass summed over components, per snapshot.
    pub total_mass: Vec<f64>,
}

/// Evolves the discrete delta at `x0` in component `i` under `A^T`.
///
/// The state is the vector of nodal masses, so total mass is conserved
/// exactly by the zero row sums of `A`; densities are masses divided by the
/// trapezoid weights (`dx^-d` at interior nodes).
pub fn kernel_row(
    op: &DiscreteOperator,
    x0: &[f64],
    i: usize,
    t_final: f64,
    opts: &EvolveOptions,
    mollify: bool,
) -> Result<KernelRow> {
    let grid = &op.grid;
    let m = op.components;
    if i >= m {
        return Err(Error::InvalidArgument(format!("component {i} out of range for m = {m}")));
    }
    if x0.len() != grid.dim() {
        return Err(Error::DimensionMismatch(format!(
            "x0 has dimension {}, grid has {}",
            x0.len(),
            grid.dim()
        )));
    }
    let node = grid.nearest_node(x0);
    let point = grid.point(node);
    let snapped = grid.node_at(x0).is_none();
    let mut m0 = VectorField::zeros(grid.len(), m);
    if mollify {
        let mut cells = vec![(node, 1.0)];
        for a in 0..grid.dim() {
            let mut next = Vec::new();
            for &(n, w) in &cells {
                next.push((grid.neighbor(n, a, -1), 0.25 * w));
                next.push((n, 0.5 * w));
                next.push((grid.neighbor(n, a, 1), 0.25 * w));
            }
            cells = next;
        }
        for (n, w) in cells {
            let v = m0.get(n, i) + w;
            m0.set(n, i, v);
        }
    } else {
        m0.set(node, i, 1.0);
    }
    let masses = evolve_forward(op, &m0, t_final, opts)?;
    let weights = grid.weights();
    let total_mass = masses.states.iter().map(|s| s.as_slice().iter().sum()).collect();
    let states = masses
        .states
        .into_iter()
        .map(|s| {
            let mut d = s.into_data();
            for (k, v) in d.iter_mut().enumerate() {
                *v /= weights[k / m];
            }
            VectorField::from_data(m, d).expect("sizes")
        })
        .collect();
    Ok(KernelRow {
        node,
        point,
        snapped,
        component: i,
        densities: Trajectory { states, ..masses },
        total_mass,
    })
}

/// `(1/t) int_0^t U(s) ds` by the trapezoid rule over the snapshots.
pub fn cesaro_average(traj: &Trajectory) -> Result<VectorField> {
    let t_end = traj.final_time();
    cesaro_average_until(traj, t_end)
}

/// Cesaro average over `[times[0], t_end]`; `t_end` must be a snapshot time.
pub fn cesaro_average_until(traj: &Trajectory, t_end: f64) -> Result<VectorField> {
    if traj.states.len() < 2 {
        return Err(Error::InvalidArgument("Cesaro average needs at least two snapshots".into()));
    }
    let last = traj
        .times
        .iter()
        .position(|s| (s - t_end).abs() <= 1e-9 * traj.dt.max(1.0))
        .ok_or_else(|| Error::InvalidArgument(format!("no snapshot at t = {t_end}")))?;
    if last == 0 {
        return Err(Error::InvalidArgument("empty averaging window".into()));
    }
    let t0 = traj.times[0];
    let mut acc = VectorField::zeros(traj.states[0].nodes(), traj.states[0].components());
    for k in 0..last {
        let h = traj.times[k + 1] - traj.times[k];
        acc = acc
            .add_scaled(0.5 * h, &traj.states[k])
            .add_scaled(0.5 * h, &traj.states[k + 1]);
    }
    Ok(acc.scaled(1.0 / (traj.times[last] - t0)))
}

#[derive(Debug, Clone, Serialize)]
pub struct Resolvent {
    #[serde(skip)]
    pub value: VectorField,
    pub lambda: f64,
    pub t_max: f64,
    pub dt: f64,
    pub steps: usize,
    /// `max |(lambda - A) R f - f|`.
    pub residual: f64,
}

/// `R(lambda) f = int_0^Tmax e^{-lambda t} U(t) dt` with
/// `e^{-(lambda - beta) Tmax} = 1e-10`.
///
/// The time integral uses the weights that make the Crank-Nicolson sum the
/// exact discrete resolvent: with `rho = (1 - lambda h/2)/(1 + lambda h/2)`,
/// `R = h/(1 + lambda h/2) sum_k rho^k (U_k + U_{k+1})/2`, which satisfies
/// `(lambda - A) R = f` up to the `rho^K` tail.
pub fn resolvent(op: &DiscreteOperator, f: &VectorField, lambda: f64, beta: f64, dt: f64) -> Result<Resolvent> {
    op.check(f)?;
    if !(lambda > beta) {
        return Err(Error::InvalidArgument(format!(
            "resolvent needs lambda > beta, got lambda = {lambda}, beta = {beta}"
        )));
    }
    let t_max = (1e10f64).ln() / (lambda - beta);
    let (steps, h) = step_count(t_max, dt)?;
    let prop = Propagator::new(op, Direction::Backward, Scheme::CrankNicolson, h, SolverKind::Auto)?;
    let rho = (1.0 - 0.5 * lambda * h) / (1.0 + 0.5 * lambda * h);
    let c0 = h / (1.0 + 0.5 * lambda * h);
    let mut acc = vec![0.0; f.as_slice().len()];
    let mut u = f.as_slice().to_vec();
    let mut w = c0;
    for k in 0..steps {
        let next = prop.step(&u)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteStep {
                step: k + 1,
                time: (k + 1) as f64 * h,
            });
        }
        for ((a, x), y) in acc.iter_mut().zip(&u).zip(&next) {
            *a += 0.5 * w * (x + y);
        }
        w *= rho;
        u = next;
    }
    let value = VectorField::from_data(op.components, acc)?;
    let av = op.apply(&value);
    let residual = value
        .as_slice()
        .iter()
        .zip(av.as_slice())
        .zip(f.as_slice())
        .fold(0.0f64, |m, ((r, a), f)| m.max((lambda * r - a - f).abs()));
    Ok(Resolvent {
        value,
        lambda,
        t_max,
        dt: h,
        steps,
        residual,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DuhamelReport {
    pub t: f64,
    pub dt: f64,
    /// Sup-norm mismatch over inner nodes (`|x - c| <= L/2`), all components.
    pub residual: f64,
    pub worst_node: usize,
    pub worst_component: usize,
    #[serde(skip)]
    pub vector: VectorField,
    #[serde(skip)]
    pub duhamel: VectorField,
}

/// Compares `(T(t) f)_i` with `T(t) f_i + int_0^t T(t - s) w_i(s) ds`,
/// `w_i = sum_j sum_h (B_j)_ih D_j u_h`, both sides time-stepped with
/// Crank-Nicolson at the same step size.
pub fn duhamel_check(spec: &OperatorSpec, grid: &Grid, f: &VectorField, t: f64, dt: f64) -> Result<DuhamelReport> {
    let m = spec.components();
    let vector_op = DiscreteOperator::assemble(spec, grid)?;
    let scalar_op = DiscreteOperator::assemble(&spec.scalar_part(), grid)?;
    let coupling_spec = spec_coupling_only(spec)?;
    let coupling = Coefficients::forward(&coupling_spec, grid)?;
    let opts = EvolveOptions {
        scheme: Scheme::CrankNicolson,
        dt,
        snapshot_every: 1,
        startup: Startup::Never,
        solver: SolverKind::Auto,
    };
    let traj = evolve(&vector_op, f, t, &opts)?;
    let h = traj.dt;
    let frozen = grid.boundary() == Boundary::Dirichlet;
    let ws: Vec<VectorField> = traj
        .states
        .iter()
        .map(|u| apply_coefficients(&coupling, grid, u, frozen))
        .collect();
    let prop = Propagator::new(&scalar_op, Direction::Backward, Scheme::CrankNicolson, h, SolverKind::Auto)?;
    let mut duhamel = VectorField::zeros(grid.len(), m);
    for i in 0..m {
        let mut free = f.component(i);
        let mut j = vec![0.0; grid.len()];
        for k in 0..traj.states.len() - 1 {
            let wk = ws[k].component(i);
            let wk1 = ws[k + 1].component(i);
            let pre: Vec<f64> = j.iter().zip(&wk).map(|(a, w)| a + 0.5 * h * w).collect();
            j = prop.step(&pre)?;
            for (a, w) in j.iter_mut().zip(&wk1) {
                *a += 0.5 * h * w;
            }
            free = prop.step(&free)?;
        }
        for n in 0..grid.len() {
            duhamel.set(n, i, free[n] + j[n]);
        }
    }
    let vector = traj.last().clone();
    let inner = grid.inner_mask(0.5);
    let (mut residual, mut worst_node, mut worst_component) = (0.0, 0, 0);
    for n in (0..grid.len()).filter(|&n| inner[n]) {
        for i in 0..m {
            let r = (vector.get(n, i) - duhamel.get(n, i)).abs();
            if r > residual {
                residual = r;
                worst_node = n;
                worst_component = i;
            }
        }
    }
    Ok(DuhamelReport {
        t,
        dt: h,
        residual,
        worst_node,
        worst_component,
        vector,
        duhamel,
    })
}

fn spec_coupling_only(spec: &OperatorSpec) -> Result<OperatorSpec> {
    use crate::expr::Expr;
    let d = spec.dim();
    OperatorSpec::new(
        vec![vec![Expr::Const(0.0); d]; d],
        vec![Expr::Const(0.0); d],
        spec.coupling().to_vec(),
        spec.params().clone(),
    )
}

fn apply_coefficients(c: &Coefficients, grid: &Grid, u: &VectorField, frozen: bool) -> VectorField {
    let m = u.components();
    let mut out = VectorField::zeros(grid.len(), m);
    let mut buf = Vec::new();
    for n in 0..grid.len() {
        if frozen && grid.on_boundary(n) {
            continue;
        }
        c.rows(grid, n, false, &mut buf);
        for &(j, col, w) in &buf {
            let v = out.get(n, j) + w * u.as_slice()[col];
            out.set(n, j, v);
        }
    }
    out
}

/// Values at probe points on the grid and on the grid doubled in width
/// (same spacing), and their largest difference.
#[derive(Debug, Clone, Serialize)]
pub struct TruncationStudy {
    pub half_width: f64,
    pub probes: Vec<Vec<f64>>,
    pub at_l: Vec<Vec<f64>>,
    pub at_2l: Vec<Vec<f64>>,
    pub max_difference: f64,
}

/// Runs `evolve` for `f` on `grid` and on `grid.doubled()` and compares the
/// results at `probes` (linear interpolation between nodes).
pub fn truncation_study(
    spec: &OperatorSpec,
    grid: &Grid,
    f: &[crate::expr::Expr],
    t: f64,
    opts: &EvolveOptions,
    probes: &[Vec<f64>],
) -> Result<TruncationStudy> {
    let run_on = |g: &Grid| -> Result<Vec<Vec<f64>>> {
        let op = DiscreteOperator::assemble(spec, g)?;
        let f0 = VectorField::from_exprs(g, f, spec.params())?;
        let u = evolve(&op, &f0, t, opts)?;
        let last = u.last();
        probes
            .iter()
            .map(|p| {
                (0..spec.components())
                    .map(|j| {
                        g.interpolate(&last.component(j), p).ok_or_else(|| {
                            Error::InvalidArgument(format!("probe {p:?} outside the grid"))
                        })
                    })
                    .collect()
            })
            .collect()
    };
    let doubled = grid.doubled()?;
    let (at_l, at_2l) = rayon::join(|| run_on(grid), || run_on(&doubled));
    let (at_l, at_2l) = (at_l?, at_2l?);
    let max_difference = at_l
        .iter()
        .flatten()
        .zip(at_2l.iter().flatten())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(TruncationStudy {
        half_width: grid.axes()[0].half_width,
        probes: probes.to_vec(),
        at_l,
        at_2l,
        max_difference,
    })
}
