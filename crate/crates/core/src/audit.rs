//! Sampled checks of the standing hypotheses on `Q`, `b`, `B_k`, a
//! Lyapunov function `phi` and the exponent `gamma`.
//!
//! Suprema and infima over `R^d` are approximated by the grid nodes plus a
//! logarithmically spaced far field out to ten times the box radius; every
//! reported extremum carries the sample where it was attained.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::density::scalar_invariant_density;
use crate::expr::Expr;
use crate::grid::Grid;
use crate::operator::OperatorSpec;
use crate::{Error, Result};

/// Sigma values in `[-MARGINAL_BAND, 0]` are reported as marginal.
pub const MARGINAL_BAND: f64 = 1e-9;
/// Relative increase between the outer far-field shell and the rest of the
/// samples above which a supremum is treated as unbounded.
pub const GROWTH_TOLERANCE: f64 = 1e-2;
const FAR_SHELLS: usize = 20;
const FAR_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    Marginal,
    Fail,
    NotChecked,
}

impl Verdict {
    fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn passed(self) -> bool {
        self == Verdict::Pass
    }
}

/// Points at which the hypotheses are sampled.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub points: Vec<Vec<f64>>,
    /// Distance from the box centre, per point.
    pub radii: Vec<f64>,
    pub grid_nodes: usize,
    pub box_radius: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleDescription {
    pub grid_nodes: usize,
    pub far_field: usize,
    pub box_radius: f64,
    pub far_radius: f64,
    pub note: String,
}

impl SampleSet {
    /// Grid nodes plus rays along the axes and diagonals at radii
    /// `R 10^{k/20}`, `k = 1..20`.
    pub fn new(grid: &Grid) -> Self {
        let d = grid.dim();
        let center: Vec<f64> = grid.axes().iter().map(|a| a.center).collect();
        let radius = |p: &[f64]| p.iter().zip(&center).map(|(x, c)| (x - c).powi(2)).sum::<f64>().sqrt();
        let mut points = grid.points();
        let grid_nodes = points.len();
        let box_radius = grid.axes().iter().map(|a| a.half_width).fold(0.0, f64::max);
        let mut directions = Vec::new();
        for a in 0..d {
            for s in [-1.0, 1.0] {
                let mut v = vec![0.0; d];
                v[a] = s;
                directions.push(v);
            }
        }
        if d > 1 {
            for bits in 0..(1usize << d) {
                let v: Vec<f64> = (0..d)
                    .map(|a| if bits >> a & 1 == 1 { 1.0 } else { -1.0 } / (d as f64).sqrt())
                    .collect();
                directions.push(v);
            }
        }
        for k in 1..=FAR_SHELLS {
            let r = box_radius * FAR_FACTOR.powf(k as f64 / FAR_SHELLS as f64);
            for v in &directions {
                points.push(center.iter().zip(v).map(|(c, u)| c + r * u).collect());
            }
        }
        let radii = points.iter().map(|p| radius(p)).collect();
        Self {
            points,
            radii,
            grid_nodes,
            box_radius,
        }
    }

    /// Explicit points with no far field.
    pub fn from_points(points: Vec<Vec<f64>>) -> Self {
        let radii: Vec<f64> = points
            .iter()
            .map(|p| p.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let box_radius = radii.iter().cloned().fold(0.0, f64::max);
        Self {
            grid_nodes: points.len(),
            points,
            radii,
            box_radius,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn describe(&self) -> SampleDescription {
        let far_field = self.points.len() - self.grid_nodes;
        SampleDescription {
            grid_nodes: self.grid_nodes,
            far_field,
            box_radius: self.box_radius,
            far_radius: if far_field > 0 { self.box_radius * FAR_FACTOR } else { self.box_radius },
            note: "suprema and infima over R^d are approximated by these samples".into(),
        }
    }

    fn outer_shell(&self) -> Option<f64> {
        (self.points.len() > self.grid_nodes).then(|| self.radii[self.grid_nodes..].iter().cloned().fold(0.0, f64::max))
    }

    fn map<F>(&self, f: F) -> Result<Vec<f64>>
    where
        F: Fn(&[f64]) -> Result<f64> + Sync,
    {
        if self.points.is_empty() {
            return Err(Error::InvalidArgument("no sample points".into()));
        }
        self.points.par_iter().map(|p| f(p)).collect()
    }

    fn max(&self, values: &[f64]) -> Extremum {
        let k = argmax(values);
        Extremum {
            value: values[k],
            point: self.points[k].clone(),
        }
    }

    fn min(&self, values: &[f64]) -> Extremum {
        let neg: Vec<f64> = values.iter().map(|v| -v).collect();
        let k = argmax(&neg);
        Extremum {
            value: values[k],
            point: self.points[k].clone(),
        }
    }

    /// Whether the supremum of `values` still grows on the outermost shell.
    fn sup_settles(&self, values: &[f64]) -> bool {
        let Some(outer) = self.outer_shell() else {
            return true;
        };
        let threshold = outer * (1.0 - 1e-12);
        let (mut inner_max, mut outer_max) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (v, r) in values.iter().zip(&self.radii) {
            if *r >= threshold {
                outer_max = outer_max.max(*v);
            } else {
                inner_max = inner_max.max(*v);
            }
        }
        outer_max <= inner_max + GROWTH_TOLERANCE * inner_max.abs().max(1e-12)
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Extremum {
    pub value: f64,
    pub point: Vec<f64>,
}

fn min_eigenvalue(m: &[Vec<f64>]) -> f64 {
    match m.len() {
        1 => m[0][0],
        2 => {
            let (a, b, c) = (m[0][0], m[0][1], m[1][1]);
            0.5 * (a + c) - (0.5 * (a - c)).hypot(b)
        }
        d => {
            let mat = DMatrix::from_fn(d, d, |i, j| m[i][j]);
            mat.symmetric_eigen().eigenvalues.min()
        }
    }
}

fn max_eigenvalue_sym(m: &[Vec<f64>]) -> f64 {
    let neg: Vec<Vec<f64>> = m.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    -min_eigenvalue(&neg)
}

/// Symbolic first derivatives needed by the audit, built once per spec.
pub struct Auditor<'a> {
    spec: &'a OperatorSpec,
    /// `dq[h][i][j] = D_h q_ij`.
    dq: Vec<Vec<Vec<Expr>>>,
    /// `jb[i][k] = D_k b_i`.
    jb: Vec<Vec<Expr>>,
    /// `db[k][h][j][i] = D_h (B_k)_ji`.
    db: Vec<Vec<Vec<Vec<Expr>>>>,
}

impl<'a> Auditor<'a> {
    pub fn new(spec: &'a OperatorSpec) -> Result<Self> {
        let d = spec.dim();
        let diff = |e: &Expr, h: usize| e.differentiate(h).map_err(Error::from);
        let dq = (0..d)
            .map(|h| {
                spec.diffusion()
                    .iter()
                    .map(|row| row.iter().map(|e| diff(e, h)).collect::<Result<Vec<_>>>())
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let jb = spec
            .drift()
            .iter()
            .map(|b| (0..d).map(|k| diff(b, k)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let db = spec
            .coupling()
            .iter()
            .map(|mat| {
                (0..d)
                    .map(|h| {
                        mat.iter()
                            .map(|row| row.iter().map(|e| diff(e, h)).collect::<Result<Vec<_>>>())
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, dq, jb, db })
    }

    pub fn spec(&self) -> &OperatorSpec {
        self.spec
    }

    fn ev(&self, e: &Expr, what: &str, x: &[f64]) -> Result<f64> {
        self.spec.eval(e, what, x)
    }

    fn eval_matrix(&self, m: &[Vec<Expr>], what: &str, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        m.iter()
            .map(|r| r.iter().map(|e| self.ev(e, what, x)).collect())
            .collect()
    }

    pub fn diffusion_at(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.eval_matrix(self.spec.diffusion(), "q", x)
    }

    /// Smallest eigenvalue of `Q(x)`.
    pub fn lambda_q(&self, x: &[f64]) -> Result<f64> {
        let q = self.diffusion_at(x)?;
        let l = min_eigenvalue(&q);
        if !l.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite diffusion at {x:?}")));
        }
        Ok(l)
    }

    /// `max_{k,j,i} |(B_k)_ji(x)|`.
    pub fn psi(&self, x: &[f64]) -> Result<f64> {
        let mut acc: f64 = 0.0;
        for mat in self.spec.coupling() {
            for row in mat {
                for e in row {
                    acc = acc.max(self.ev(e, "B", x)?.abs());
                }
            }
        }
        Ok(acc)
    }

    pub fn xi_ratio(&self, x: &[f64]) -> Result<f64> {
        let l = self.lambda_q(x)?;
        let psi = self.psi(x)?;
        Ok(if psi == 0.0 {
            0.0
        } else if l > 0.0 {
            psi / l.sqrt()
        } else {
            f64::INFINITY
        })
    }

    /// Largest eigenvalue of the symmetric part of `J b(x)`.
    pub fn jacobian_bound(&self, x: &[f64]) -> Result<f64> {
        let j = self.eval_matrix(&self.jb, "Jb", x)?;
        let d = j.len();
        let sym: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|k| 0.5 * (j[i][k] + j[k][i])).collect())
            .collect();
        Ok(max_eigenvalue_sym(&sym))
    }

    /// `(sum_{k,h} |D_h B_k(x)|^2)^{1/2}` with Frobenius norms.
    pub fn coupling_gradient(&self, x: &[f64]) -> Result<f64> {
        let mut acc = 0.0;
        for per_k in &self.db {
            for per_h in per_k {
                for row in per_h {
                    for e in row {
                        acc += self.ev(e, "DB", x)?.powi(2);
                    }
                }
            }
        }
        Ok(acc.sqrt())
    }

    /// `max_{h,i,j} |D_h q_ij(x)|`.
    pub fn diffusion_gradient(&self, x: &[f64]) -> Result<f64> {
        let mut acc: f64 = 0.0;
        for per_h in &self.dq {
            for row in per_h {
                for e in row {
                    acc = acc.max(self.ev(e, "Dq", x)?.abs());
                }
            }
        }
        Ok(acc)
    }

    /// The bracket whose supremum is `sigma_{p0}`, given the global `xi`.
    pub fn sigma_integrand(&self, x: &[f64], xi: f64, p0: f64) -> Result<f64> {
        let d = self.spec.dim() as f64;
        let m = self.spec.components() as f64;
        let l = self.lambda_q(x)?;
        let k = self.diffusion_gradient(x)?;
        let kterm = if k == 0.0 { 0.0 } else { d * k / l.sqrt() };
        let denom = 4.0 * (p0 - 1.0).min(1.0);
        Ok(self.jacobian_bound(x)? + self.coupling_gradient(x)? + d * (m * xi + kterm).powi(2) / denom)
    }

    /// `A phi - a + c phi` at `x`, with the scalar operator applied symbolically.
    fn scalar_image(&self, phi: &Expr) -> Result<Expr> {
        Ok(self.spec.scalar_part().apply_symbolic(std::slice::from_ref(phi))?.remove(0))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Ellipticity {
    pub lambda0: f64,
    pub at: Vec<f64>,
    /// The infimum keeps dropping on the outermost shell.
    pub decaying: bool,
    pub verdict: Verdict,
}

pub fn check_ellipticity(auditor: &Auditor, samples: &SampleSet) -> Result<Ellipticity> {
    let values = samples.map(|x| auditor.lambda_q(x))?;
    let ext = samples.min(&values);
    let neg: Vec<f64> = values.iter().map(|v| -v).collect();
    let decaying = !samples.sup_settles(&neg);
    Ok(Ellipticity {
        verdict: Verdict::from_bool(ext.value > 0.0 && !decaying),
        lambda0: ext.value,
        at: ext.point,
        decaying,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct XiReport {
    pub xi: f64,
    pub at: Vec<f64>,
    pub bounded: bool,
    pub verdict: Verdict,
}

pub fn compute_xi(auditor: &Auditor, samples: &SampleSet) -> Result<XiReport> {
    let values = samples.map(|x| auditor.xi_ratio(x))?;
    let ext = samples.max(&values);
    let bounded = ext.value.is_finite() && samples.sup_settles(&values);
    Ok(XiReport {
        xi: ext.value,
        at: ext.point,
        bounded,
        verdict: Verdict::from_bool(bounded),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LyapunovReport {
    pub phi: String,
    pub a_star: f64,
    pub c_star: f64,
    pub fitted: bool,
    /// `max (A phi - a* + c* phi)` over the samples.
    pub worst_violation: f64,
    pub at: Vec<f64>,
    pub blows_up: bool,
    pub bounded: bool,
    pub verdict: Verdict,
}

/// With `constants = Some((a, c))` reports the worst violation of
/// `A phi <= a - c phi`; otherwise fits `c = 1` and `a = max(A phi + phi)`.
pub fn check_lyapunov(
    auditor: &Auditor,
    phi: &Expr,
    constants: Option<(f64, f64)>,
    samples: &SampleSet,
) -> Result<LyapunovReport> {
    let spec = auditor.spec();
    let aphi = auditor.scalar_image(phi)?;
    let phis = samples.map(|x| spec.eval(phi, "phi", x))?;
    if let Some(k) = phis.iter().position(|v| *v < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "phi = {} < 1 at {:?}",
            phis[k], samples.points[k]
        )));
    }
    let aphis = samples.map(|x| spec.eval(&aphi, "A phi", x))?;
    let blows_up = match samples.outer_shell() {
        Some(outer) => {
            let near_max = phis[..samples.grid_nodes].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let far_min = phis
                .iter()
                .zip(&samples.radii)
                .filter(|(_, r)| **r >= outer * (1.0 - 1e-12))
                .map(|(v, _)| *v)
                .fold(f64::INFINITY, f64::min);
            far_min > near_max
        }
        None => true,
    };
    let (a, c, fitted) = match constants {
        Some((a, c)) => {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument(format!("c* must be positive, got {c}")));
            }
            (a, c, false)
        }
        None => {
            let s: Vec<f64> = aphis.iter().zip(&phis).map(|(a, p)| a + p).collect();
            (samples.max(&s).value, 1.0, true)
        }
    };
    let residual: Vec<f64> = aphis.iter().zip(&phis).map(|(ap, p)| ap - a + c * p).collect();
    let ext = samples.max(&residual);
    let k = argmax(&residual);
    let scale = aphis[k].abs() + a.abs() + c * phis[k];
    let bounded = samples.sup_settles(&residual) || ext.value <= 0.0;
    let holds = ext.value <= 1e-12 * scale.max(1.0);
    Ok(LyapunovReport {
        phi: phi.to_string(),
        a_star: a,
        c_star: c,
        fitted,
        worst_violation: ext.value,
        at: ext.point,
        blows_up,
        bounded,
        verdict: Verdict::from_bool(holds && blows_up && bounded && a.is_finite()),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SigmaReport {
    pub p0: f64,
    pub sigma: f64,
    pub at: Vec<f64>,
    /// `min{1 - 1/gamma, 1/p0}` when `gamma` is known.
    pub gamma0: Option<f64>,
    pub verdict: Verdict,
}

pub fn compute_sigma(auditor: &Auditor, p0: f64, xi: f64, samples: &SampleSet) -> Result<SigmaReport> {
    if !(p0 > 1.0 && p0 <= 2.0) {
        return Err(Error::InvalidArgument(format!("p0 must lie in (1, 2], got {p0}")));
    }
    let values = samples.map(|x| auditor.sigma_integrand(x, xi, p0))?;
    let ext = samples.max(&values);
    let verdict = if ext.value < -MARGINAL_BAND {
        Verdict::Pass
    } else if ext.value <= 0.0 {
        Verdict::Marginal
    } else {
        Verdict::Fail
    };
    Ok(SigmaReport {
        p0,
        sigma: ext.value,
        at: ext.point,
        gamma0: None,
        verdict,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GammaReport {
    pub gamma: f64,
    pub c_gamma: f64,
    pub at: Vec<f64>,
    pub bounded: bool,
    pub verdict: Verdict,
}

/// Minimal `c_gamma` with `psi^gamma <= c_gamma phi` on the samples.
pub fn check_gamma_domination(auditor: &Auditor, phi: &Expr, gamma: f64, samples: &SampleSet) -> Result<GammaReport> {
    if !(gamma > 2.0) {
        return Err(Error::InvalidArgument(format!("gamma must exceed 2, got {gamma}")));
    }
    let spec = auditor.spec();
    let values = samples.map(|x| Ok(auditor.psi(x)?.powf(gamma) / spec.eval(phi, "phi", x)?))?;
    let ext = samples.max(&values);
    let bounded = ext.value.is_finite() && samples.sup_settles(&values);
    Ok(GammaReport {
        gamma,
        c_gamma: ext.value,
        at: ext.point,
        bounded,
        verdict: Verdict::from_bool(bounded),
    })
}

#[derive(Debug, Clone, Default)]
pub struct AuditOptions {
    pub p0: Vec<f64>,
    pub phi: Option<Expr>,
    pub lyapunov_constants: Option<(f64, f64)>,
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Verdicts {
    pub ellipticity: Verdict,
    pub coupling_growth: Verdict,
    pub lyapunov: Verdict,
    pub dissipativity: Verdict,
    pub domination: Verdict,
}

impl Verdicts {
    pub fn all_pass(&self) -> bool {
        [
            self.ellipticity,
            self.coupling_growth,
            self.lyapunov,
            self.dissipativity,
            self.domination,
        ]
        .iter()
        .all(|v| v.passed())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub samples: SampleDescription,
    pub ellipticity: Ellipticity,
    pub xi: XiReport,
    pub lyapunov: Option<LyapunovReport>,
    pub sigma: Vec<SigmaReport>,
    pub gamma: Option<GammaReport>,
    /// `m^2 d xi^2 / 4`.
    pub beta: f64,
    pub verdicts: Verdicts,
}

impl AuditReport {
    /// Smallest sampled `sigma_{p0}` among the requested exponents.
    pub fn best_sigma(&self) -> Option<&SigmaReport> {
        self.sigma.iter().min_by(|a, b| a.sigma.total_cmp(&b.sigma))
    }
}

pub fn audit(spec: &OperatorSpec, samples: &SampleSet, opts: &AuditOptions) -> Result<AuditReport> {
    let auditor = Auditor::new(spec)?;
    let ellipticity = check_ellipticity(&auditor, samples)?;
    let xi = compute_xi(&auditor, samples)?;
    let lyapunov = opts
        .phi
        .as_ref()
        .map(|phi| check_lyapunov(&auditor, phi, opts.lyapunov_constants, samples))
        .transpose()?;
    let gamma = match (&opts.phi, opts.gamma) {
        (Some(phi), Some(g)) => Some(check_gamma_domination(&auditor, phi, g, samples)?),
        _ => None,
    };
    let mut sigma = opts
        .p0
        .iter()
        .map(|&p0| compute_sigma(&auditor, p0, xi.xi, samples))
        .collect::<Result<Vec<_>>>()?;
    if let Some(g) = opts.gamma {
        for s in &mut sigma {
            s.gamma0 = Some((1.0 - 1.0 / g).min(1.0 / s.p0));
        }
    }
    let dissipativity = if sigma.iter().any(|s| s.verdict.passed()) {
        Verdict::Pass
    } else if sigma.iter().any(|s| s.verdict == Verdict::Marginal) {
        Verdict::Marginal
    } else if sigma.is_empty() {
        Verdict::NotChecked
    } else {
        Verdict::Fail
    };
    let m = spec.components() as f64;
    let d = spec.dim() as f64;
    Ok(AuditReport {
        samples: samples.describe(),
        verdicts: Verdicts {
            ellipticity: ellipticity.verdict,
            coupling_growth: xi.verdict,
            lyapunov: lyapunov.as_ref().map_or(Verdict::NotChecked, |l| l.verdict),
            dissipativity,
            domination: gamma.as_ref().map_or(Verdict::NotChecked, |g| g.verdict),
        },
        beta: m * m * d * xi.xi * xi.xi / 4.0,
        ellipticity,
        xi,
        lyapunov,
        sigma,
        gamma,
    })
}

/// Coefficients of the polynomial class
/// `Q = (1+|x|^2)^p Q0`, `b = -b0 x (1+|x|^2)^r`, `B_i = (1+|x|^2)^{s_i} B_i^0`,
/// described through the bounds that enter its sufficient condition.
#[derive(Debug, Clone, Serialize)]
pub struct PolynomialClass {
    pub p: f64,
    pub r: f64,
    pub s: Vec<f64>,
    pub b0: f64,
    /// Infimum of the smallest eigenvalue of `Q0`.
    pub lambda1: f64,
    /// Bound on `max |D_h q_ij| / (1+|x|^2)^p`.
    pub c0: f64,
    /// `||B_i^0||_inf` per `i`.
    pub b_norms: Vec<f64>,
    /// `||D_j B_i^0||_inf` as `[i][j]`.
    pub db_norms: Vec<Vec<f64>>,
    pub m: usize,
    pub p0: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PolynomialVerdict {
    pub xi0: f64,
    pub lhs: f64,
    /// `b0 - lhs`.
    pub margin: f64,
    /// `p/2 - s_max`.
    pub s_margin: f64,
    /// `r - max{p, s_max}`.
    pub r_margin: f64,
    pub verdict: Verdict,
}

pub fn check_polynomial_class(c: &PolynomialClass) -> Result<PolynomialVerdict> {
    let d = c.s.len();
    if d == 0 || c.b_norms.len() != d || c.db_norms.len() != d || c.db_norms.iter().any(|r| r.len() != d) {
        return Err(Error::DimensionMismatch(
            "s, b_norms and db_norms must describe the same dimension".into(),
        ));
    }
    if c.p < 0.0 || c.r < 0.0 || c.s.iter().any(|s| *s < 0.0) {
        return Err(Error::InvalidArgument("exponents p, r, s_i must be non-negative".into()));
    }
    if !(c.lambda1 > 0.0) {
        return Err(Error::InvalidArgument("lambda1 must be positive".into()));
    }
    if !(c.p0 > 1.0 && c.p0 <= 2.0) {
        return Err(Error::InvalidArgument(format!("p0 must lie in (1, 2], got {}", c.p0)));
    }
    let s_max = c.s.iter().cloned().fold(0.0, f64::max);
    let xi0 = c.b_norms.iter().cloned().fold(0.0, f64::max) / c.lambda1.sqrt();
    let mut sum = 0.0;
    for i in 0..d {
        for j in 0..d {
            sum += (2.0 * c.s[i] * c.b_norms[i] + c.db_norms[i][j]).powi(2);
        }
    }
    let dd = d as f64;
    let lhs = sum.sqrt()
        + dd * (c.m as f64 * xi0 + dd * c.c0 / c.lambda1.sqrt()).powi(2) / (4.0 * (c.p0 - 1.0).min(1.0));
    let s_margin = c.p / 2.0 - s_max;
    let r_margin = c.r - c.p.max(s_max);
    let margin = c.b0 - lhs;
    Ok(PolynomialVerdict {
        xi0,
        lhs,
        margin,
        s_margin,
        r_margin,
        verdict: Verdict::from_bool(s_margin >= 0.0 && r_margin > 0.0 && margin > 0.0),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SymmetrizingReport {
    /// `Q^{-1}(div Q - b)` has a symmetric Jacobian (always true for `d = 1`).
    pub gradient: bool,
    pub gradient_residual: f64,
    pub integrable: bool,
    /// Relative mass gained by doubling the box, when integrable.
    pub tail_relative: Option<f64>,
    pub integrability_detail: String,
    pub k1: f64,
    pub k2: f64,
    pub k1_bounded: bool,
    pub trials: usize,
    pub verdict: Verdict,
}

const KEBAB_K2: f64 = 0.5;

fn solve_small(q: &[Vec<f64>], rhs: &[f64]) -> Result<Vec<f64>> {
    let d = rhs.len();
    let m = DMatrix::from_fn(d, d, |i, j| q[i][j]);
    let v = m
        .lu()
        .solve(&nalgebra::DVector::from_column_slice(rhs))
        .ok_or_else(|| Error::Singular("diffusion matrix".into()))?;
    Ok(v.iter().copied().collect())
}

impl Auditor<'_> {
    /// `Q^{-1}(div Q - b)` at `x`.
    fn symmetrizing_field(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.spec.dim();
        let q = self.diffusion_at(x)?;
        let mut rhs = vec![0.0; d];
        for (j, r) in rhs.iter_mut().enumerate() {
            for i in 0..d {
                *r += self.ev(&self.dq[i][i][j], "Dq", x)?;
            }
            *r -= self.ev(&self.spec.drift()[j], "b", x)?;
        }
        solve_small(&q, &rhs)
    }

    /// Left side of the symmetrizing inequality and `|sqrt(Q) xi|^2`,
    /// `|sqrt(Q) S sqrt(Q)|^2` at one trial.
    fn kebab_terms(&self, x: &[f64], xi: &[f64], s: &[Vec<f64>]) -> Result<(f64, f64, f64)> {
        let d = xi.len();
        let q = self.diffusion_at(x)?;
        let jb = self.eval_matrix(&self.jb, "Jb", x)?;
        let dq: Vec<Vec<Vec<f64>>> = self
            .dq
            .iter()
            .map(|m| self.eval_matrix(m, "Dq", x))
            .collect::<Result<_>>()?;
        let matvec = |m: &[Vec<f64>], v: &[f64]| -> Vec<f64> {
            m.iter().map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
        };
        let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
        let w: Vec<f64> = (0..d).map(|k| (0..d).map(|i| jb[i][k] * xi[i]).sum()).collect();
        let qxi = matvec(&q, xi);
        let term1 = dot(&matvec(&q, &w), xi);
        let grad_tr: Vec<f64> = (0..d)
            .map(|h| (0..d).map(|a| (0..d).map(|b| dq[h][a][b] * s[b][a]).sum::<f64>()).sum())
            .collect();
        let term2 = dot(&qxi, &grad_tr);
        // M[a][b] = D_b (Q xi)_a
        let mjac: Vec<Vec<f64>> = (0..d)
            .map(|a| (0..d).map(|b| (0..d).map(|c| dq[b][a][c] * xi[c]).sum()).collect())
            .collect();
        let mul = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
            (0..d)
                .map(|i| (0..d).map(|j| (0..d).map(|k| a[i][k] * b[k][j]).sum()).collect())
                .collect()
        };
        let qs = mul(&q, s);
        let mqs = mul(&mjac, &qs);
        let term3: f64 = (0..d).map(|i| mqs[i][i]).sum();
        let qsqs = mul(&qs, &qs);
        let frob: f64 = (0..d).map(|i| qsqs[i][i]).sum();
        Ok((term1 + term2 - term3, dot(&qxi, xi), frob))
    }
}

/// Checks that the scalar invariant measure is symmetrizing: gradient
/// structure of `Q^{-1}(div Q - b)`, integrability of `e^{-Phi}` and the
/// second-order inequality with `k2 = 1/2` and a fitted `k1`.
pub fn check_symmetrizing(
    auditor: &Auditor,
    grid: &Grid,
    samples: &SampleSet,
    trials: usize,
    seed: u64,
) -> Result<SymmetrizingReport> {
    let spec = auditor.spec();
    let d = spec.dim();
    let (gradient, gradient_residual) = if d == 1 {
        (true, 0.0)
    } else {
        let residuals = samples.map(|x| {
            let mut jac = vec![vec![0.0; d]; d];
            for k in 0..d {
                let h = 1e-5 * (1.0 + x[k].abs());
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[k] += h;
                xm[k] -= h;
                let (vp, vm) = (auditor.symmetrizing_field(&xp)?, auditor.symmetrizing_field(&xm)?);
                for i in 0..d {
                    jac[i][k] = (vp[i] - vm[i]) / (2.0 * h);
                }
            }
            let scale = jac.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
            let mut asym: f64 = 0.0;
            for i in 0..d {
                for k in 0..i {
                    asym = asym.max((jac[i][k] - jac[k][i]).abs());
                }
            }
            Ok(asym / (1.0 + scale))
        })?;
        let worst = residuals.iter().cloned().fold(0.0, f64::max);
        (worst <= 1e-5, worst)
    };
    let (integrable, tail_relative, integrability_detail) = if gradient {
        integrability(auditor, grid)?
    } else {
        (false, None, "no potential: the field is not a gradient".into())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ratios = Vec::with_capacity(trials);
    let mut radii = Vec::with_capacity(trials);
    for t in 0..trials {
        let k = t % samples.len();
        let x = &samples.points[k];
        let xi: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut s = vec![vec![0.0; d]; d];
        for i in 0..d {
            for j in 0..=i {
                let v = rng.random_range(-1.0..1.0);
                s[i][j] = v;
                s[j][i] = v;
            }
        }
        let (lhs, qxi, qsq) = auditor.kebab_terms(x, &xi, &s)?;
        if qxi > 0.0 {
            ratios.push((lhs - KEBAB_K2 * qsq) / qxi);
            radii.push(samples.radii[k]);
        }
    }
    let k1_fit = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sub = SampleSet {
        points: vec![Vec::new(); ratios.len()],
        radii,
        grid_nodes: ratios.len().min(samples.grid_nodes),
        box_radius: samples.box_radius,
    };
    let k1_bounded = k1_fit.is_finite() && (trials < samples.len() || sub.sup_settles(&ratios));
    let k1 = if k1_fit > 0.0 { k1_fit } else { f64::EPSILON };
    Ok(SymmetrizingReport {
        gradient,
        gradient_residual,
        integrable,
        tail_relative,
        integrability_detail,
        k1,
        k2: KEBAB_K2,
        k1_bounded,
        trials,
        verdict: Verdict::from_bool(gradient && integrable && k1_bounded),
    })
}

/// `e^{-Phi}` is, up to a constant, `exp(int b/q) / q` in one dimension;
/// otherwise `Phi` is integrated along rays from the box centre.
fn integrability(auditor: &Auditor, grid: &Grid) -> Result<(bool, Option<f64>, String)> {
    let spec = auditor.spec();
    if spec.dim() == 1 {
        return Ok(match scalar_invariant_density(spec, grid) {
            Ok(s) => (
                true,
                Some(s.tail_relative),
                format!("mass on the doubled box grows by {:.3e}", s.tail_relative),
            ),
            Err(Error::NonIntegrable(msg)) => (false, None, msg),
            Err(e) => return Err(e),
        });
    }
    let center: Vec<f64> = grid.axes().iter().map(|a| a.center).collect();
    let mass = |g: &Grid| -> Result<f64> {
        let phis: Vec<f64> = g
            .points()
            .par_iter()
            .map(|x| potential(auditor, &center, x))
            .collect::<Result<_>>()?;
        let low = phis.iter().cloned().fold(f64::INFINITY, f64::min);
        if low < -700.0 {
            return Ok(f64::INFINITY);
        }
        Ok(g.integrate(&phis.iter().map(|p| (-p).exp()).collect::<Vec<_>>()))
    };
    let m1 = mass(grid)?;
    let m2 = mass(&grid.doubled()?)?;
    let growth = (m2 - m1) / m1;
    Ok(if growth.is_finite() && growth <= crate::density::DIVERGENCE_THRESHOLD {
        (true, Some(growth), format!("mass on the doubled box grows by {growth:.3e}"))
    } else {
        (false, None, format!("mass grows from {m1:e} to {m2:e} when the box is doubled"))
    })
}

/// `Phi(x) - Phi(c)` by composite Simpson along the segment from `c`.
fn potential(auditor: &Auditor, c: &[f64], x: &[f64]) -> Result<f64> {
    const PANELS: usize = 64;
    let dir: Vec<f64> = x.iter().zip(c).map(|(a, b)| a - b).collect();
    let mut acc = 0.0;
    for k in 0..=2 * PANELS {
        let t = k as f64 / (2 * PANELS) as f64;
        let w = if k == 0 || k == 2 * PANELS {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let p: Vec<f64> = c.iter().zip(&dir).map(|(a, v)| a + t * v).collect();
        let v = auditor.symmetrizing_field(&p)?;
        acc += w * v.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(acc / (6.0 * PANELS as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse, Scope};
    use crate::grid::Boundary;
    use crate::operator::presets;

    fn line(l: f64) -> Grid {
        Grid::new(1, l, 161, Boundary::Neumann).unwrap()
    }

    fn phi(s: &str) -> Expr {
        parse(s, &Scope::new(1)).unwrap()
    }

    fn scalar(q: &str, b: &str) -> OperatorSpec {
        OperatorSpec::parse(&[vec![q]], &[b], &[vec![vec!["0"]]], Default::default()).unwrap()
    }

    #[test]
    fn ellipticity_and_xi() {
        let s = SampleSet::new(&line(8.0));
        let case2 = presets::case2();
        let a = Auditor::new(&case2).unwrap();
        let e = check_ellipticity(&a, &s).unwrap();
        assert_eq!((e.lambda0, e.at.clone()), (1.0, vec![0.0]));
        assert!(e.verdict.passed());
        let x = compute_xi(&a, &s).unwrap();
        assert!(x.xi < 0.3 && x.xi > 0.299 && x.bounded);
        assert_eq!(x.xi, a.xi_ratio(&x.at).unwrap());

        let c1 = presets::case1();
        assert_eq!(compute_xi(&Auditor::new(&c1).unwrap(), &s).unwrap().xi, 1.0);
        let r = presets::periodic_growth();
        assert_eq!(compute_xi(&Auditor::new(&r).unwrap(), &s).unwrap().xi, 5.0);
        let ou = presets::ornstein_uhlenbeck();
        assert_eq!(compute_xi(&Auditor::new(&ou).unwrap(), &s).unwrap().xi, 0.0);

        let diag = OperatorSpec::parse(
            &[vec!["1", "0"], vec!["0", "2"]],
            &["0", "0"],
            &[vec![vec!["0"]], vec![vec!["0"]]],
            Default::default(),
        )
        .unwrap();
        let g2 = Grid::new(2, 2.0, 9, Boundary::Neumann).unwrap();
        let e = check_ellipticity(&Auditor::new(&diag).unwrap(), &SampleSet::new(&g2)).unwrap();
        assert_eq!(e.lambda0, 1.0);
    }

    #[test]
    fn vanishing_diffusion_at_infinity_is_caught() {
        let spec = scalar("1/(1+x^2)", "-x");
        let a = Auditor::new(&spec).unwrap();
        let e = check_ellipticity(&a, &SampleSet::new(&line(4.0))).unwrap();
        assert!(e.decaying && !e.verdict.passed());
    }

    #[test]
    fn sigma_examples() {
        let s = SampleSet::new(&line(8.0));
        let c1 = presets::case1();
        let a = Auditor::new(&c1).unwrap();
        let r = compute_sigma(&a, 2.0, 1.0, &s).unwrap();
        assert_eq!(r.sigma, 0.0);
        assert_eq!(r.verdict, Verdict::Marginal);

        let ou = presets::ornstein_uhlenbeck();
        let r = compute_sigma(&Auditor::new(&ou).unwrap(), 2.0, 0.0, &s).unwrap();
        assert_eq!(r.sigma, -1.0);
        assert!(r.verdict.passed());

        let c2 = presets::case2();
        let a = Auditor::new(&c2).unwrap();
        let xi = compute_xi(&a, &s).unwrap().xi;
        let r = compute_sigma(&a, 2.0, xi, &s).unwrap();
        assert!(r.sigma <= -0.96 && r.sigma > -2.6, "{}", r.sigma);
        assert_eq!(r.sigma, a.sigma_integrand(&r.at, xi, 2.0).unwrap());
        assert!(compute_sigma(&a, 1.0, xi, &s).is_err());
    }

    #[test]
    fn sigma_is_monotone_in_p0() {
        let s = SampleSet::new(&line(8.0));
        let c2 = presets::case2();
        let a = Auditor::new(&c2).unwrap();
        let xi = compute_xi(&a, &s).unwrap().xi;
        let mut last = f64::INFINITY;
        for p0 in [1.1, 1.3, 1.5, 1.8, 2.0] {
            let v = compute_sigma(&a, p0, xi, &s).unwrap().sigma;
            assert!(v <= last);
            last = v;
        }
    }

    #[test]
    fn lyapunov_examples() {
        let s = SampleSet::new(&line(8.0));
        let ou = presets::ornstein_uhlenbeck();
        let a = Auditor::new(&ou).unwrap();
        let r = check_lyapunov(&a, &phi("1+x^2"), Some((4.0, 2.0)), &s).unwrap();
        assert!(r.verdict.passed() && r.worst_violation.abs() < 1e-9);

        let c2 = presets::case2();
        let a = Auditor::new(&c2).unwrap();
        let r = check_lyapunov(&a, &phi("1+x^2"), Some((4.0, 2.0)), &s).unwrap();
        assert!(r.verdict.passed() && r.worst_violation <= 0.0);
        let fit = check_lyapunov(&a, &phi("1+x^2"), None, &s).unwrap();
        assert!(fit.fitted && fit.c_star == 1.0 && fit.verdict.passed());

        let flat = scalar("1", "0");
        let a = Auditor::new(&flat).unwrap();
        let r = check_lyapunov(&a, &phi("1"), Some((1.0, 1.0)), &s).unwrap();
        assert_eq!(r.worst_violation, 0.0);
        assert!(!r.blows_up);
        assert!(check_lyapunov(&a, &phi("x^2"), None, &s).is_err());
    }

    #[test]
    fn gamma_domination() {
        let s = SampleSet::new(&line(8.0));
        let c1 = presets::case1();
        let r = check_gamma_domination(&Auditor::new(&c1).unwrap(), &phi("1+x^2"), 3.0, &s).unwrap();
        assert_eq!((r.c_gamma, r.at.clone()), (1.0, vec![0.0]));
        let c2 = presets::case2();
        let r = check_gamma_domination(&Auditor::new(&c2).unwrap(), &phi("(1+x^2)^2"), 3.0, &s).unwrap();
        assert!(r.c_gamma < 0.027 && r.verdict.passed());
        let ou = presets::ornstein_uhlenbeck();
        let r = check_gamma_domination(&Auditor::new(&ou).unwrap(), &phi("1+x^2"), 3.0, &s).unwrap();
        assert_eq!(r.c_gamma, 0.0);
        assert!(check_gamma_domination(&Auditor::new(&ou).unwrap(), &phi("1"), 2.0, &s).is_err());
    }

    #[test]
    fn full_audit_of_case2() {
        let s = SampleSet::new(&line(8.0));
        let opts = AuditOptions {
            p0: vec![1.5, 2.0],
            phi: Some(phi("(1+x^2)^2")),
            lyapunov_constants: None,
            gamma: Some(3.0),
        };
        let r = audit(&presets::case2(), &s, &opts).unwrap();
        assert!(r.verdicts.all_pass(), "{:?}", r.verdicts);
        assert_eq!(r.sigma[1].gamma0, Some(0.5));
        assert!((r.beta - r.xi.xi.powi(2)).abs() < 1e-15);
    }

    #[test]
    fn polynomial_class() {
        let base = PolynomialClass {
            p: 2.0,
            r: 3.0,
            s: vec![1.0],
            b0: 100.0,
            lambda1: 1.0,
            c0: 0.5,
            b_norms: vec![0.1],
            db_norms: vec![vec![0.1]],
            m: 2,
            p0: 2.0,
        };
        let v = check_polynomial_class(&base).unwrap();
        assert!(v.verdict.passed() && v.margin > 0.0);
        let flat = PolynomialClass { r: 2.0, ..base.clone() };
        assert!(!check_polynomial_class(&flat).unwrap().verdict.passed());
        let weak = PolynomialClass { b0: v.lhs, ..base };
        assert!(!check_polynomial_class(&weak).unwrap().verdict.passed());
    }

    #[test]
    fn symmetrizing_examples() {
        let g = line(8.0);
        let s = SampleSet::new(&g);
        let ou = presets::ornstein_uhlenbeck();
        let r = check_symmetrizing(&Auditor::new(&ou).unwrap(), &g, &s, 2000, 1).unwrap();
        assert!(r.verdict.passed());
        assert!(r.k1 <= f64::EPSILON);

        let repelling = scalar("1", "x");
        let r = check_symmetrizing(&Auditor::new(&repelling).unwrap(), &g, &s, 200, 1).unwrap();
        assert!(!r.integrable && !r.verdict.passed());

        let flat = scalar("1", "0");
        let r = check_symmetrizing(&Auditor::new(&flat).unwrap(), &g, &s, 200, 1).unwrap();
        assert!(!r.integrable);
    }

    #[test]
    fn symmetrizing_in_two_dimensions() {
        let g = Grid::new(2, 5.0, 21, Boundary::Neumann).unwrap();
        let s = SampleSet::new(&g);
        let ou2 = OperatorSpec::parse(
            &[vec!["1", "0"], vec!["0", "1"]],
            &["-x", "-y"],
            &[vec![vec!["0"]], vec![vec!["0"]]],
            Default::default(),
        )
        .unwrap();
        let r = check_symmetrizing(&Auditor::new(&ou2).unwrap(), &g, &s, 500, 3).unwrap();
        assert!(r.gradient && r.integrable && r.verdict.passed(), "{r:?}");
        let rotating = OperatorSpec::parse(
            &[vec!["1", "0"], vec!["0", "1"]],
            &["-x-y", "x-y"],
            &[vec![vec!["0"]], vec![vec!["0"]]],
            Default::default(),
        )
        .unwrap();
        let r = check_symmetrizing(&Auditor::new(&rotating).unwrap(), &g, &s, 10, 3).unwrap();
        assert!(!r.gradient);
    }
}
