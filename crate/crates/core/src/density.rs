//! One-dimensional invariant densities: the scalar density of `mu`, the
//! linear system `q rho' = B^T rho` for densities relative to `mu`, mass
//! normalisation and the closed-form profiles of the worked examples.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::grid::Grid;
use crate::ode::{integrate_both_ways, OdeOptions};
use crate::operator::OperatorSpec;
use crate::{Error, Result};

/// Relative change of the truncated mass under domain doubling above which
/// the density is declared non-integrable.
pub const DIVERGENCE_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct ScalarDensity {
    pub x: Vec<f64>,
    /// Lebesgue density of `mu`, unit trapezoid mass on the grid.
    pub rho_mu: Vec<f64>,
    /// `c` in `rho_mu = (c/q) exp(int_0^x b/q)`.
    pub normalization: f64,
    /// Unnormalised masses on `[-L, L]` and `[-2L, 2L]`.
    pub mass_l: f64,
    pub mass_2l: f64,
    pub tail_relative: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Ode,
    ClosedForm,
}

/// `rho_mu` together with `m` densities relative to `mu`.
#[derive(Debug, Clone, Serialize)]
pub struct DensityProfile {
    pub x: Vec<f64>,
    pub rho_mu: Vec<f64>,
    pub normalization: f64,
    /// `rho[i][node]`.
    pub rho: Vec<Vec<f64>>,
    pub rho0: Vec<f64>,
    /// `int rho_i rho_mu dx` (trapezoid).
    pub masses: Vec<f64>,
    pub provenance: Provenance,
}

impl DensityProfile {
    fn assemble(scalar: &ScalarDensity, rho: Vec<Vec<f64>>, rho0: Vec<f64>, provenance: Provenance) -> Self {
        let masses = rho.iter().map(|r| trapezoid_product(&scalar.x, r, &scalar.rho_mu)).collect();
        Self {
            x: scalar.x.clone(),
            rho_mu: scalar.rho_mu.clone(),
            normalization: scalar.normalization,
            rho,
            rho0,
            masses,
            provenance,
        }
    }

    /// Lebesgue densities `rho_i * rho_mu`.
    pub fn lebesgue(&self) -> Vec<Vec<f64>> {
        self.rho
            .iter()
            .map(|r| r.iter().zip(&self.rho_mu).map(|(a, b)| a * b).collect())
            .collect()
    }

    /// Zero crossings of each `rho_i` (linear interpolation).
    pub fn sign_changes(&self) -> Vec<Vec<f64>> {
        self.rho.iter().map(|r| sign_changes(&self.x, r)).collect()
    }

    /// CSV with header `x,rho_mu,rho1..rhom`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,rho_mu");
        for i in 0..self.rho.len() {
            let _ = write!(out, ",rho{}", i + 1);
        }
        out.push('\n');
        for (n, x) in self.x.iter().enumerate() {
            let _ = write!(out, "{x:e},{:e}", self.rho_mu[n]);
            for r in &self.rho {
                let _ = write!(out, ",{:e}", r[n]);
            }
            out.push('\n');
        }
        out
    }

    /// Linear combination of profiles sharing `x` and `rho_mu`.
    fn combine(parts: &[DensityProfile], coeffs: &[f64]) -> Self {
        let m = parts[0].rho.len();
        let len = parts[0].x.len();
        let mut rho = vec![vec![0.0; len]; m];
        let mut rho0 = vec![0.0; m];
        let mut masses = vec![0.0; m];
        for (p, &c) in parts.iter().zip(coeffs) {
            for i in 0..m {
                for (a, b) in rho[i].iter_mut().zip(&p.rho[i]) {
                    *a += c * b;
                }
                rho0[i] += c * p.rho0[i];
                masses[i] += c * p.masses[i];
            }
        }
        Self {
            rho,
            rho0,
            masses,
            ..parts[0].clone()
        }
    }
}

fn trapezoid_product(x: &[f64], a: &[f64], b: &[f64]) -> f64 {
    x.windows(2)
        .enumerate()
        .map(|(k, w)| 0.5 * (w[1] - w[0]) * (a[k] * b[k] + a[k + 1] * b[k + 1]))
        .sum()
}

pub fn sign_changes(x: &[f64], v: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for k in 0..x.len().saturating_sub(1) {
        let (a, b) = (v[k], v[k + 1]);
        if a == 0.0 && (k == 0 || v[k - 1] != 0.0) {
            out.push(x[k]);
        } else if a * b < 0.0 {
            out.push(x[k] + (x[k + 1] - x[k]) * a / (a - b));
        }
    }
    out
}

fn require_1d(spec: &OperatorSpec, grid: &Grid) -> Result<Vec<f64>> {
    if spec.dim() != 1 || grid.dim() != 1 {
        return Err(Error::InvalidArgument("density ODEs are one-dimensional".into()));
    }
    let x: Vec<f64> = grid.points().into_iter().map(|p| p[0]).collect();
    if x[0] > 0.0 || x[x.len() - 1] < 0.0 {
        return Err(Error::InvalidArgument("the grid must contain the origin".into()));
    }
    Ok(x)
}

fn ode_opts() -> OdeOptions {
    OdeOptions {
        rtol: 1e-12,
        atol: 1e-14,
        ..OdeOptions::default()
    }
}

/// `log(exp(int_0^x b/q) / q)` at the points `x`, integrating `b/q` with
/// the adaptive integrator.
fn log_unnormalized(spec: &OperatorSpec, x: &[f64]) -> Result<Vec<f64>> {
    let q = &spec.diffusion()[0][0];
    let b = &spec.drift()[0];
    let psi = integrate_both_ways(
        |t, _, dy| {
            let qv = spec.eval(q, "q11", &[t])?;
            if qv <= 0.0 {
                return Err(Error::InvalidArgument(format!("q must be positive, q({t}) = {qv}")));
            }
            dy[0] = spec.eval(b, "b1", &[t])? / qv;
            Ok(())
        },
        0.0,
        &[0.0],
        x,
        &ode_opts(),
    )?;
    x.iter()
        .zip(psi)
        .map(|(&t, p)| Ok(p[0] - spec.eval(q, "q11", &[t])?.ln()))
        .collect()
}

fn trapezoid(x: &[f64], v: &[f64]) -> f64 {
    x.windows(2)
        .enumerate()
        .map(|(k, w)| 0.5 * (w[1] - w[0]) * (v[k] + v[k + 1]))
        .sum()
}

/// `rho_mu = (c/q) exp(int_0^x b/q)` normalised to unit mass on the grid.
/// Non-integrability is detected by doubling the domain.
pub fn scalar_invariant_density(spec: &OperatorSpec, grid: &Grid) -> Result<ScalarDensity> {
    let x = require_1d(spec, grid)?;
    let doubled = grid.doubled()?;
    let x2: Vec<f64> = doubled.points().into_iter().map(|p| p[0]).collect();
    let log2 = log_unnormalized(spec, &x2)?;
    let shift = log2.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if shift > 700.0 {
        return Err(Error::NonIntegrable(format!(
            "exp(int b/q)/q reaches e^{shift:.0} on the doubled domain"
        )));
    }
    let g2: Vec<f64> = log2.iter().map(|l| l.exp()).collect();
    let mass_2l = trapezoid(&x2, &g2);
    let g: Vec<f64> = log_unnormalized(spec, &x)?.iter().map(|l| l.exp()).collect();
    let mass_l = trapezoid(&x, &g);
    let tail_relative = (mass_2l - mass_l) / mass_l;
    if !(mass_l > 0.0) || tail_relative > DIVERGENCE_THRESHOLD {
        return Err(Error::NonIntegrable(format!(
            "mass grows from {mass_l:e} on [-L, L] to {mass_2l:e} on [-2L, 2L]"
        )));
    }
    Ok(ScalarDensity {
        rho_mu: g.iter().map(|v| v / mass_l).collect(),
        normalization: 1.0 / mass_l,
        x,
        mass_l,
        mass_2l,
        tail_relative,
    })
}

/// Integrates `rho' = q^{-1} B^T rho` outwards from `rho(0) = rho0`.
pub fn solve_density_system(spec: &OperatorSpec, rho0: &[f64], grid: &Grid) -> Result<DensityProfile> {
    let scalar = scalar_invariant_density(spec, grid)?;
    let rho = solve_on_points(spec, rho0, &scalar.x)?;
    Ok(DensityProfile::assemble(&scalar, rho, rho0.to_vec(), Provenance::Ode))
}

fn solve_on_points(spec: &OperatorSpec, rho0: &[f64], x: &[f64]) -> Result<Vec<Vec<f64>>> {
    let m = spec.components();
    if rho0.len() != m {
        return Err(Error::DimensionMismatch(format!("rho0 has {} entries, m = {m}", rho0.len())));
    }
    let q = &spec.diffusion()[0][0];
    let bmat = &spec.coupling()[0];
    let mut b = vec![0.0; m * m];
    let sol = integrate_both_ways(
        |t, y, dy| {
            let p = [t];
            let qv = spec.eval(q, "q11", &p)?;
            for j in 0..m {
                for i in 0..m {
                    b[j * m + i] = spec.eval(&bmat[j][i], "B1", &p)?;
                }
            }
            for (i, d) in dy.iter_mut().enumerate() {
                // (B^T rho)_i = sum_j B_ji rho_j
                *d = (0..m).map(|j| b[j * m + i] * y[j]).sum::<f64>() / qv;
            }
            Ok(())
        },
        0.0,
        rho0,
        x,
        &ode_opts(),
    )?;
    Ok((0..m).map(|i| sol.iter().map(|y| y[i]).collect()).collect())
}

/// The member of the ODE solution family with the requested masses
/// `int rho_i d mu`.
pub fn normalize_to_mass(spec: &OperatorSpec, grid: &Grid, targets: &[f64]) -> Result<DensityProfile> {
    let m = spec.components();
    if targets.len() != m {
        return Err(Error::DimensionMismatch(format!("{} targets for m = {m}", targets.len())));
    }
    let basis = (0..m)
        .map(|k| {
            let mut e = vec![0.0; m];
            e[k] = 1.0;
            solve_density_system(spec, &e, grid)
        })
        .collect::<Result<Vec<_>>>()?;
    let mass = nalgebra::DMatrix::from_fn(m, m, |i, k| basis[k].masses[i]);
    let scale = mass.amax();
    let lu = mass.clone().lu();
    let det = lu.determinant();
    if !(det.abs() > 1e-12 * scale.powi(m as i32)) {
        return Err(Error::Singular(format!(
            "mass matrix of the solution family has determinant {det:e}"
        )));
    }
    let c = lu
        .solve(&nalgebra::DVector::from_column_slice(targets))
        .ok_or_else(|| Error::Singular("mass matrix is not invertible".into()))?;
    Ok(DensityProfile::combine(&basis, c.as_slice()))
}

/// Closed-form two-component profiles of the worked examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "case", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClosedForm {
    /// `q = 1`, `b = -x`, `B = [[0, -1], [-1, 0]]`:
    /// `rho = (a1 e^x + a2 e^-x, -a1 e^x + a2 e^-x)`.
    Case1 { a: [f64; 2] },
    /// `q = 1 + x^2`, `B = x b` with `b12 = -b21` and equal row sums.
    Case2Antisymmetric { b: [[f64; 2]; 2], c: [f64; 2] },
    /// `q = 1 + x^2`, `B = x b` with `b12 + b21 != 0` and equal row sums.
    Case2General { b: [[f64; 2]; 2], c: [f64; 2] },
}

impl ClosedForm {
    pub fn validate(&self) -> Result<()> {
        let rows = |b: &[[f64; 2]; 2]| {
            let (r1, r2) = (b[0][0] + b[0][1], b[1][0] + b[1][1]);
            if (r1 - r2).abs() > 1e-12 * (1.0 + r1.abs()) {
                return Err(Error::InvalidArgument(format!(
                    "rows of B must have equal sums, got {r1} and {r2}"
                )));
            }
            Ok(())
        };
        match self {
            ClosedForm::Case1 { .. } => Ok(()),
            ClosedForm::Case2Antisymmetric { b, .. } => {
                rows(b)?;
                if (b[0][1] + b[1][0]).abs() > 1e-12 {
                    return Err(Error::InvalidArgument("antisymmetric case needs b12 = -b21".into()));
                }
                Ok(())
            }
            ClosedForm::Case2General { b, .. } => {
                rows(b)?;
                if (b[0][1] + b[1][0]).abs() <= 1e-12 {
                    return Err(Error::InvalidArgument("general case needs b12 + b21 != 0".into()));
                }
                Ok(())
            }
        }
    }

    /// `rho(0)`.
    pub fn rho0(&self) -> [f64; 2] {
        match *self {
            ClosedForm::Case1 { a } => [a[0] + a[1], a[1] - a[0]],
            ClosedForm::Case2Antisymmetric { c, .. } | ClosedForm::Case2General { c, .. } => [c[1], c[0] - c[1]],
        }
    }

    pub fn eval(&self, x: f64) -> [f64; 2] {
        match *self {
            ClosedForm::Case1 { a } => {
                let (p, m) = (x.exp(), (-x).exp());
                [a[0] * p + a[1] * m, -a[0] * p + a[1] * m]
            }
            ClosedForm::Case2Antisymmetric { b, c } => {
                let s = 1.0 + x * x;
                let pre = s.powf((b[0][0] - b[1][0]) / 2.0);
                let l = s.ln();
                [
                    pre * (c[1] + 0.5 * c[0] * b[1][0] * l),
                    pre * (c[0] - c[1] + 0.5 * c[0] * b[0][1] * l),
                ]
            }
            ClosedForm::Case2General { b, c } => {
                let s = 1.0 + x * x;
                let pre = s.powf((b[0][0] - b[1][0]) / 2.0);
                let sum = b[0][1] + b[1][0];
                let grow = s.powf(sum / 2.0);
                [
                    pre * (c[1] + c[0] * b[1][0] / sum * grow - c[0] * b[1][0] / sum),
                    pre * (-c[1] + c[0] * b[0][1] / sum * grow + c[0] * b[1][0] / sum),
                ]
            }
        }
    }

    /// The profile on `grid`, with `rho_mu` from `spec`.
    pub fn profile(&self, spec: &OperatorSpec, grid: &Grid) -> Result<DensityProfile> {
        self.validate()?;
        let scalar = scalar_invariant_density(spec, grid)?;
        let vals: Vec<[f64; 2]> = scalar.x.iter().map(|&x| self.eval(x)).collect();
        let rho = (0..2).map(|i| vals.iter().map(|v| v[i]).collect()).collect();
        Ok(DensityProfile::assemble(
            &scalar,
            rho,
            self.rho0().to_vec(),
            Provenance::ClosedForm,
        ))
    }
}
