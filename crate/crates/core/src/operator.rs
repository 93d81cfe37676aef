//! The coupled operator, its scalar part and its formal adjoint, evaluated
//! on grid functions with second-order finite differences.

use rayon::prelude::*;

use crate::expr::diff::{add, mul, neg, sub};
use crate::expr::{parse, Expr, ExprError, Params, Scope};
use crate::grid::{Boundary, Grid};
use crate::{Error, Result};

/// Symbolic description of `Q`, `b` and `B_1..B_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorSpec {
    dim: usize,
    components: usize,
    diffusion: Vec<Vec<Expr>>,
    drift: Vec<Expr>,
    /// `coupling[k][j][i]` is `(B_{k+1})_{ji}`.
    coupling: Vec<Vec<Vec<Expr>>>,
    params: Params,
}

impl OperatorSpec {
    pub fn new(
        diffusion: Vec<Vec<Expr>>,
        drift: Vec<Expr>,
        coupling: Vec<Vec<Vec<Expr>>>,
        params: Params,
    ) -> Result<Self> {
        let dim = drift.len();
        if dim == 0 || dim > 3 {
            return Err(Error::InvalidArgument(format!(
                "space dimension must be 1, 2 or 3, got {dim}"
            )));
        }
        if diffusion.len() != dim || diffusion.iter().any(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch(format!(
                "diffusion matrix must be {dim}x{dim}"
            )));
        }
        if coupling.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "expected {dim} coupling matrices, got {}",
                coupling.len()
            )));
        }
        let components = coupling[0].len();
        if components == 0 {
            return Err(Error::InvalidArgument("system size must be at least 1".into()));
        }
        for (k, b) in coupling.iter().enumerate() {
            if b.len() != components || b.iter().any(|r| r.len() != components) {
                return Err(Error::DimensionMismatch(format!(
                    "coupling matrix B{} must be {components}x{components}",
                    k + 1
                )));
            }
        }
        for h in 0..dim {
            for k in 0..h {
                if diffusion[h][k] != diffusion[k][h] {
                    return Err(Error::InvalidArgument(format!(
                        "diffusion matrix is not symmetric: q{}{} = {} but q{}{} = {}",
                        h + 1,
                        k + 1,
                        diffusion[h][k],
                        k + 1,
                        h + 1,
                        diffusion[k][h]
                    )));
                }
            }
        }
        let spec = Self {
            dim,
            components,
            diffusion,
            drift,
            coupling,
            params,
        };
        for (name, e) in spec.expressions() {
            if e.var_extent() > dim {
                return Err(Error::Eval {
                    what: name,
                    point: Vec::new(),
                    source: ExprError::VariableOutOfRange {
                        index: e.var_extent() - 1,
                        dim,
                    },
                });
            }
            if let Some(p) = e.params().into_iter().find(|p| !spec.params.contains_key(p)) {
                return Err(Error::Eval {
                    what: name,
                    point: Vec::new(),
                    source: ExprError::UnboundParameter(p),
                });
            }
            e.check_real_powers(&spec.params).map_err(|source| Error::Eval {
                what: name.clone(),
                point: Vec::new(),
                source,
            })?;
        }
        Ok(spec)
    }

    /// Parses every coefficient with the variables `x_1..x_d` and the
    /// parameter names of `params` in scope.
    pub fn parse<S: AsRef<str>>(
        diffusion: &[Vec<S>],
        drift: &[S],
        coupling: &[Vec<Vec<S>>],
        params: Params,
    ) -> Result<Self> {
        let scope = Scope::new(drift.len()).with_params(params.keys().cloned());
        let p = |what: String, s: &S| {
            parse(s.as_ref(), &scope).map_err(|source| Error::Eval {
                what,
                point: Vec::new(),
                source,
            })
        };
        let q = diffusion
            .iter()
            .enumerate()
            .map(|(h, row)| {
                row.iter()
                    .enumerate()
                    .map(|(k, s)| p(format!("q{}{}", h + 1, k + 1), s))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let b = drift
            .iter()
            .enumerate()
            .map(|(k, s)| p(format!("b{}", k + 1), s))
            .collect::<Result<Vec<_>>>()?;
        let bb = coupling
            .iter()
            .enumerate()
            .map(|(k, mat)| {
                mat.iter()
                    .enumerate()
                    .map(|(j, row)| {
                        row.iter()
                            .enumerate()
                            .map(|(i, s)| p(format!("B{}[{}][{}]", k + 1, j + 1, i + 1), s))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(q, b, bb, params)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn diffusion(&self) -> &[Vec<Expr>] {
        &self.diffusion
    }

    pub fn drift(&self) -> &[Expr] {
        &self.drift
    }

    pub fn coupling(&self) -> &[Vec<Vec<Expr>>] {
        &self.coupling
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn scope(&self) -> Scope {
        Scope::new(self.dim).with_params(self.params.keys().cloned())
    }

    /// Every coefficient with a printable name.
    pub fn expressions(&self) -> Vec<(String, &Expr)> {
        let mut out = Vec::new();
        for (h, row) in self.diffusion.iter().enumerate() {
            for (k, e) in row.iter().enumerate() {
                out.push((format!("q{}{}", h + 1, k + 1), e));
            }
        }
        for (k, e) in self.drift.iter().enumerate() {
            out.push((format!("b{}", k + 1), e));
        }
        for (k, mat) in self.coupling.iter().enumerate() {
            for (j, row) in mat.iter().enumerate() {
                for (i, e) in row.iter().enumerate() {
                    out.push((format!("B{}[{}][{}]", k + 1, j + 1, i + 1), e));
                }
            }
        }
        out
    }

    /// True when every coupling entry is the constant zero.
    pub fn is_decoupled(&self) -> bool {
        self.coupling.iter().flatten().flatten().all(Expr::is_zero)
    }

    /// The scalar operator `Tr(Q D^2) + <b, grad>` as a one-component spec.
    pub fn scalar_part(&self) -> OperatorSpec {
        Self {
            dim: self.dim,
            components: 1,
            diffusion: self.diffusion.clone(),
            drift: self.drift.clone(),
            coupling: vec![vec![vec![Expr::Const(0.0)]]; self.dim],
            params: self.params.clone(),
        }
    }

    /// Same coefficients with the coupling matrices removed.
    pub fn decoupled(&self) -> OperatorSpec {
        let m = self.components;
        Self {
            coupling: vec![vec![vec![Expr::Const(0.0); m]; m]; self.dim],
            ..self.clone()
        }
    }

    pub fn eval(&self, e: &Expr, what: &str, point: &[f64]) -> Result<f64> {
        e.eval(point, &self.params).map_err(|source| Error::Eval {
            what: what.to_string(),
            point: point.to_vec(),
            source,
        })
    }

    /// `(A f)_j` for expression fields, using exact symbolic derivatives.
    pub fn apply_symbolic(&self, fields: &[Expr]) -> Result<Vec<Expr>> {
        if fields.len() != self.components {
            return Err(Error::DimensionMismatch(format!(
                "{} fields for a system of size {}",
                fields.len(),
                self.components
            )));
        }
        let d = self.dim;
        let grads = fields
            .iter()
            .map(|f| (0..d).map(|k| f.differentiate(k)).collect::<std::result::Result<Vec<_>, _>>())
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut out = Vec::with_capacity(fields.len());
        for (j, grad) in grads.iter().enumerate() {
            let mut acc = Expr::Const(0.0);
            for h in 0..d {
                for k in 0..d {
                    let second = grad[k].differentiate(h)?;
                    acc = add(acc, mul(self.diffusion[h][k].clone(), second));
                }
            }
            for k in 0..d {
                acc = add(acc, mul(self.drift[k].clone(), grad[k].clone()));
                for (i, gi) in grads.iter().enumerate() {
                    acc = add(acc, mul(self.coupling[k][j][i].clone(), gi[k].clone()));
                }
            }
            out.push(acc);
        }
        Ok(out)
    }

    /// Coefficients of the formal adjoint written as an operator of the same
    /// shape plus a zero-order matrix:
    /// `Tr(Q D^2 v_i) + <a, grad v_i> + sum_k sum_j C_k[i][j] D_k v_j + sum_j V[i][j] v_j`.
    pub(crate) fn adjoint_parts(&self) -> Result<AdjointParts> {
        let d = self.dim;
        let m = self.components;
        let mut drift = Vec::with_capacity(d);
        let mut c0 = Expr::Const(0.0);
        for k in 0..d {
            let mut a = neg(self.drift[k].clone());
            for h in 0..d {
                a = add(a, self.diffusion[h][k].differentiate(h)?);
                a = add(a, self.diffusion[k][h].differentiate(h)?);
                c0 = add(c0, self.diffusion[h][k].differentiate(k)?.differentiate(h)?);
            }
            c0 = sub(c0, self.drift[k].differentiate(k)?);
            drift.push(a);
        }
        let mut coupling = vec![vec![vec![Expr::Const(0.0); m]; m]; d];
        let mut potential = vec![vec![Expr::Const(0.0); m]; m];
        for i in 0..m {
            potential[i][i] = c0.clone();
            for j in 0..m {
                for k in 0..d {
                    let bji = &self.coupling[k][j][i];
                    coupling[k][i][j] = neg(bji.clone());
                    potential[i][j] = sub(potential[i][j].clone(), bji.differentiate(k)?);
                }
            }
        }
        Ok(AdjointParts {
            drift,
            coupling,
            potential,
        })
    }
}

pub(crate) struct AdjointParts {
    pub drift: Vec<Expr>,
    pub coupling: Vec<Vec<Vec<Expr>>>,
    pub potential: Vec<Vec<Expr>>,
}

/// Ready-made operators used throughout the tests and bundled configs.
pub mod presets {
    use super::*;

    fn params(pairs: &[(&str, f64)]) -> Params {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    /// `q = 1`, `b = -x`, `B = [[0, -1], [-1, 0]]`.
    pub fn case1() -> OperatorSpec {
        OperatorSpec::parse(
            &[vec!["1"]],
            &["-x"],
            &[vec![vec!["0", "-1"], vec!["-1", "0"]]],
            Params::new(),
        )
        .expect("valid preset")
    }

    /// `q = 1 + x^2`, `b = -b0 x (1 + x^2)`, `B = x [[b11, b12], [b21, b22]]`.
    pub fn case2_with(b0: f64, b: [[f64; 2]; 2]) -> OperatorSpec {
        OperatorSpec::parse(
            &[vec!["1+x^2"]],
            &["-b0*x*(1+x^2)"],
            &[vec![vec!["b11*x", "b12*x"], vec!["b21*x", "b22*x"]]],
            params(&[
                ("b0", b0),
                ("b11", b[0][0]),
                ("b12", b[0][1]),
                ("b21", b[1][0]),
                ("b22", b[1][1]),
            ]),
        )
        .expect("valid preset")
    }

    /// `b0 = 3`, `B = x [[0.1, 0.1], [-0.1, 0.3]]`.
    pub fn case2() -> OperatorSpec {
        case2_with(3.0, [[0.1, 0.1], [-0.1, 0.3]])
    }

    /// `q = 1`, `b = 0`, `B = [[-1, 1], [-5, 1]]`; `(cos x, 2 sin x + cos x)`
    /// is an eigenfunction with eigenvalue 1.
    pub fn periodic_growth() -> OperatorSpec {
        OperatorSpec::parse(
            &[vec!["1"]],
            &["0"],
            &[vec![vec!["-1", "1"], vec!["-5", "1"]]],
            Params::new(),
        )
        .expect("valid preset")
    }

    /// Scalar Ornstein-Uhlenbeck operator `D^2 + (-x) D`.
    pub fn ornstein_uhlenbeck() -> OperatorSpec {
        OperatorSpec::parse(&[vec!["1"]], &["-x"], &[vec![vec!["0"]]], Params::new())
            .expect("valid preset")
    }

    /// Two uncoupled copies of the Ornstein-Uhlenbeck operator.
    pub fn decoupled_ou() -> OperatorSpec {
        OperatorSpec::parse(
            &[vec!["1"]],
            &["-x"],
            &[vec![vec!["0", "0"], vec!["0", "0"]]],
            Params::new(),
        )
        .expect("valid preset")
    }
}

/// An `m`-component field on grid nodes, stored node-major
/// (`data[node * m + j]`), which is also the unknown ordering of the
/// assembled matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    components: usize,
    data: Vec<f64>,
}

impl VectorField {
    pub fn zeros(nodes: usize, components: usize) -> Self {
        Self {
            components,
            data: vec![0.0; nodes * components],
        }
    }

    pub fn from_data(components: usize, data: Vec<f64>) -> Result<Self> {
        if components == 0 || data.len() % components != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} values cannot hold {components} components",
                data.len()
            )));
        }
        Ok(Self { components, data })
    }

    pub fn from_components(columns: &[Vec<f64>]) -> Result<Self> {
        let m = columns.len();
        let n = columns.first().map_or(0, Vec::len);
        if m == 0 || columns.iter().any(|c| c.len() != n) {
            return Err(Error::DimensionMismatch("ragged component arrays".into()));
        }
        let mut data = vec![0.0; n * m];
        for (j, c) in columns.iter().enumerate() {
            for (node, v) in c.iter().enumerate() {
                data[node * m + j] = *v;
            }
        }
        Ok(Self { components: m, data })
    }

    /// Samples expression fields at the grid nodes.
    pub fn from_exprs(grid: &Grid, fields: &[Expr], params: &Params) -> Result<Self> {
        let cols = fields
            .iter()
            .enumerate()
            .map(|(j, e)| sample(e, grid, params, &format!("field component {}", j + 1)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_components(&cols)
    }

    pub fn constant(nodes: usize, values: &[f64]) -> Self {
        let mut data = Vec::with_capacity(nodes * values.len());
        for _ in 0..nodes {
            data.extend_from_slice(values);
        }
        Self {
            components: values.len(),
            data,
        }
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn nodes(&self) -> usize {
        self.data.len() / self.components
    }

    pub fn get(&self, node: usize, j: usize) -> f64 {
        self.data[node * self.components + j]
    }

    pub fn set(&mut self, node: usize, j: usize, v: f64) {
        self.data[node * self.components + j] = v;
    }

    pub fn component(&self, j: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(j)
            .step_by(self.components)
            .copied()
            .collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn norm_inf(&self) -> f64 {
        self.data.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// Euclidean norm over components at each node.
    pub fn pointwise_norm_sq(&self) -> Vec<f64> {
        self.data
            .chunks(self.components)
            .map(|c| c.iter().map(|v| v * v).sum())
            .collect()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            components: self.components,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `self + s * other`.
    pub fn add_scaled(&self, s: f64, other: &VectorField) -> Self {
        Self {
            components: self.components,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + s * b)
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &VectorField) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |a, (x, y)| a.max((x - y).abs()))
    }
}

pub(crate) fn sample(e: &Expr, grid: &Grid, params: &Params, what: &str) -> Result<Vec<f64>> {
    if let Some(c) = e.bind(params).as_const() {
        return Ok(vec![c; grid.len()]);
    }
    (0..grid.len())
        .into_par_iter()
        .map(|n| {
            let p = grid.point(n);
            e.eval(&p, params).map_err(|source| Error::Eval {
                what: what.to_string(),
                point: p,
                source,
            })
        })
        .collect()
}

/// One matrix entry produced by the stencil: `(row component, column
/// unknown, weight)`.
pub(crate) type Entry = (usize, usize, f64);

/// Coefficients sampled at grid nodes.
pub(crate) struct Coefficients {
    d: usize,
    m: usize,
    q: Vec<Vec<Vec<f64>>>,
    drift: Vec<Vec<f64>>,
    coupling: Vec<Vec<Vec<Vec<f64>>>>,
    potential: Option<Vec<Vec<Vec<f64>>>>,
}

impl Coefficients {
    pub(crate) fn forward(spec: &OperatorSpec, grid: &Grid) -> Result<Self> {
        check_grid(spec, grid)?;
        Self::sample_parts(spec, grid, &spec.drift, &spec.coupling, None)
    }

    pub(crate) fn adjoint(spec: &OperatorSpec, grid: &Grid) -> Result<Self> {
        check_grid(spec, grid)?;
        let parts = spec.adjoint_parts()?;
        Self::sample_parts(
            spec,
            grid,
            &parts.drift,
            &parts.coupling,
            Some(&parts.potential),
        )
    }

    fn sample_parts(
        spec: &OperatorSpec,
        grid: &Grid,
        drift: &[Expr],
        coupling: &[Vec<Vec<Expr>>],
        potential: Option<&Vec<Vec<Expr>>>,
    ) -> Result<Self> {
        let p = &spec.params;
        let s = |e: &Expr, what: String| sample(e, grid, p, &what);
        let q = spec
            .diffusion
            .iter()
            .enumerate()
            .map(|(h, row)| {
                row.iter()
                    .enumerate()
                    .map(|(k, e)| s(e, format!("q{}{}", h + 1, k + 1)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let drift = drift
            .iter()
            .enumerate()
            .map(|(k, e)| s(e, format!("b{}", k + 1)))
            .collect::<Result<Vec<_>>>()?;
        let sample_matrix = |mat: &Vec<Vec<Expr>>, name: &str| {
            mat.iter()
                .enumerate()
                .map(|(j, row)| {
                    row.iter()
                        .enumerate()
                        .map(|(i, e)| s(e, format!("{name}[{}][{}]", j + 1, i + 1)))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        };
        let coupling = coupling
            .iter()
            .enumerate()
            .map(|(k, mat)| sample_matrix(mat, &format!("B{}", k + 1)))
            .collect::<Result<Vec<_>>>()?;
        let potential = potential.map(|v| sample_matrix(v, "V")).transpose()?;
        Ok(Self {
            d: spec.dim,
            m: spec.components,
            q,
            drift,
            coupling,
            potential,
        })
    }

    /// Grid Peclet number `dx |b_k| / (2 q_kk)` at `node` along `axis`.
    pub(crate) fn peclet(&self, grid: &Grid, node: usize, axis: usize) -> f64 {
        let b = self.drift[axis][node].abs();
        if b == 0.0 {
            return 0.0;
        }
        let q = self.q[axis][axis][node];
        if q <= 0.0 {
            return f64::INFINITY;
        }
        grid.spacing(axis) * b / (2.0 * q)
    }

    /// Stencil entries of the `m` rows belonging to `node`. Returns whether
    /// any convection term was upwinded.
    pub(crate) fn rows(&self, grid: &Grid, n: usize, upwind: bool, out: &mut Vec<Entry>) -> bool {
        out.clear();
        let (d, m) = (self.d, self.m);
        let mut upwinded = false;
        for h in 0..d {
            let dx = grid.spacing(h);
            let plus = grid.neighbor(n, h, 1);
            let minus = grid.neighbor(n, h, -1);
            let w = self.q[h][h][n] / (dx * dx);
            for j in 0..m {
                out.push((j, plus * m + j, w));
                out.push((j, minus * m + j, w));
                out.push((j, n * m + j, -2.0 * w));
            }
            for k in h + 1..d {
                let c = self.q[h][k][n] / (2.0 * dx * grid.spacing(k));
                if c == 0.0 {
                    continue;
                }
                let pp = grid.neighbor(plus, k, 1);
                let pm = grid.neighbor(plus, k, -1);
                let mp = grid.neighbor(minus, k, 1);
                let mm = grid.neighbor(minus, k, -1);
                for j in 0..m {
                    out.push((j, pp * m + j, c));
                    out.push((j, pm * m + j, -c));
                    out.push((j, mp * m + j, -c));
                    out.push((j, mm * m + j, c));
                }
            }
            let b = self.drift[h][n];
            if b != 0.0 {
                if upwind && self.peclet(grid, n, h) > 1.0 {
                    upwinded = true;
                    let (far, sign) = if b > 0.0 { (plus, 1.0) } else { (minus, -1.0) };
                    for j in 0..m {
                        out.push((j, far * m + j, sign * b / dx));
                        out.push((j, n * m + j, -sign * b / dx));
                    }
                } else {
                    for j in 0..m {
                        out.push((j, plus * m + j, b / (2.0 * dx)));
                        out.push((j, minus * m + j, -b / (2.0 * dx)));
                    }
                }
            }
            for j in 0..m {
                for i in 0..m {
                    let c = self.coupling[h][j][i][n];
                    if c != 0.0 {
                        out.push((j, plus * m + i, c / (2.0 * dx)));
                        out.push((j, minus * m + i, -c / (2.0 * dx)));
                    }
                }
            }
        }
        if let Some(v) = &self.potential {
            for j in 0..m {
                for i in 0..m {
                    let c = v[j][i][n];
                    if c != 0.0 {
                        out.push((j, n * m + i, c));
                    }
                }
            }
        }
        upwinded
    }

    fn apply(&self, grid: &Grid, u: &VectorField, upwind: bool) -> VectorField {
        let m = self.m;
        let frozen = grid.boundary() == Boundary::Dirichlet;
        let src = u.as_slice();
        let data: Vec<f64> = (0..grid.len())
            .into_par_iter()
            .map_init(Vec::new, |buf, n| {
                let mut acc = vec![0.0; m];
                if !(frozen && grid.on_boundary(n)) {
                    self.rows(grid, n, upwind, buf);
                    for &(j, col, w) in buf.iter() {
                        acc[j] += w * src[col];
                    }
                }
                acc
            })
            .flatten()
            .collect();
        VectorField {
            components: m,
            data,
        }
    }
}

fn check_grid(spec: &OperatorSpec, grid: &Grid) -> Result<()> {
    if grid.dim() != spec.dim {
        return Err(Error::DimensionMismatch(format!(
            "operator acts in dimension {} but the grid has dimension {}",
            spec.dim,
            grid.dim()
        )));
    }
    for (a, ax) in grid.axes().iter().enumerate() {
        let interior = match grid.boundary() {
            Boundary::Periodic => ax.nodes,
            _ => ax.nodes - 2,
        };
        if interior < 5 {
            return Err(Error::GridTooCoarse(format!(
                "axis {} has {interior} interior nodes, the stencil needs 5",
                a + 1
            )));
        }
    }
    Ok(())
}

fn check_field(spec_m: usize, grid: &Grid, u: &VectorField) -> Result<()> {
    if u.components() != spec_m || u.nodes() != grid.len() {
        return Err(Error::DimensionMismatch(format!(
            "field has {} components on {} nodes, expected {spec_m} on {}",
            u.components(),
            u.nodes(),
            grid.len()
        )));
    }
    Ok(())
}

/// `A u` with central differences everywhere; boundary rows follow the
/// grid's boundary condition (Dirichlet rows are zero).
pub fn apply_vector_operator(spec: &OperatorSpec, grid: &Grid, u: &VectorField) -> Result<VectorField> {
    check_field(spec.components, grid, u)?;
    Ok(Coefficients::forward(spec, grid)?.apply(grid, u, false))
}

/// The scalar part `Tr(Q D^2) u + <b, grad u>`.
pub fn apply_scalar_operator(spec: &OperatorSpec, grid: &Grid, u: &[f64]) -> Result<Vec<f64>> {
    let field = VectorField::from_data(1, u.to_vec())?;
    Ok(apply_vector_operator(&spec.scalar_part(), grid, &field)?.into_data())
}

/// The formal adjoint, product rule expanded with symbolic coefficient
/// derivatives and central differences on `v`.
pub fn apply_formal_adjoint(spec: &OperatorSpec, grid: &Grid, v: &VectorField) -> Result<VectorField> {
    check_field(spec.components, grid, v)?;
    Ok(Coefficients::adjoint(spec, grid)?.apply(grid, v, false))
}

/// Largest grid Peclet number over the axes at each node.
pub fn peclet_numbers(spec: &OperatorSpec, grid: &Grid) -> Result<Vec<f64>> {
    let c = Coefficients::forward(spec, grid)?;
    Ok((0..grid.len())
        .map(|n| (0..grid.dim()).map(|k| c.peclet(grid, n, k)).fold(0.0, f64::max))
        .collect())
}
