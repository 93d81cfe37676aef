//! Experiment configuration: TOML in, fully resolved and validated.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use kolmo_core::density::ClosedForm;
use kolmo_core::solver::{EvolveOptions, Scheme, SolverKind, Startup};
use kolmo_core::{parse, Boundary, Expr, Grid, OperatorSpec, Scope};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Smallest number of nodes per axis accepted.
pub const MIN_NODES: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Audit,
    Evolve,
    Estimates,
    Invariant,
    OdeDensities,
    Asymptotics,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::Audit,
        Experiment::Evolve,
        Experiment::Estimates,
        Experiment::Invariant,
        Experiment::OdeDensities,
        Experiment::Asymptotics,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Audit => "audit",
            Experiment::Evolve => "evolve",
            Experiment::Estimates => "estimates",
            Experiment::Invariant => "invariant",
            Experiment::OdeDensities => "ode-densities",
            Experiment::Asymptotics => "asymptotics",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Experiments run by `all`; defaults to every experiment applicable in
    /// the configured dimension.
    #[serde(default)]
    pub experiments: Vec<Experiment>,
    pub operator: OperatorSection,
    pub grid: GridSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub audit: AuditSection,
    #[serde(default)]
    pub evolve: EvolveSection,
    #[serde(default)]
    pub estimates: EstimatesSection,
    #[serde(default)]
    pub invariant: InvariantSection,
    #[serde(default, rename = "ode-densities")]
    pub ode_densities: OdeSection,
    #[serde(default)]
    pub asymptotics: AsymptoticsSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorSection {
    pub d: usize,
    pub m: usize,
    /// `q[h][k]`.
    pub q: Vec<Vec<String>>,
    /// `b[k]`.
    pub b: Vec<String>,
    /// `B[k][j][i]`: the coefficient of `D_k u_i` in component `j`.
    #[serde(rename = "B")]
    pub coupling: Vec<Vec<Vec<String>>>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// Half-width of the box along every axis.
    #[serde(rename = "L")]
    pub half_width: f64,
    /// Nodes per axis.
    #[serde(rename = "N")]
    pub nodes: usize,
    #[serde(default)]
    pub bc: Boundary,
    /// Box centre; defaults to the origin.
    #[serde(default)]
    pub center: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: usize,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub startup: Startup,
    #[serde(default)]
    pub linear_solver: SolverKind,
}

fn default_dt() -> f64 {
    1e-3
}
fn default_snapshot_every() -> usize {
    100
}
fn default_horizon() -> f64 {
    1.0
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            scheme: Scheme::default(),
            dt: default_dt(),
            snapshot_every: default_snapshot_every(),
            horizon: default_horizon(),
            startup: Startup::default(),
            linear_solver: SolverKind::default(),
        }
    }
}

impl SolverSection {
    pub fn options(&self) -> EvolveOptions {
        EvolveOptions {
            scheme: self.scheme,
            dt: self.dt,
            snapshot_every: self.snapshot_every,
            startup: self.startup,
            solver: self.linear_solver,
        }
    }
}

/// What the audit is expected to conclude; `report` gates nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuditExpectation {
    #[default]
    Report,
    Pass,
    /// Everything passes except dissipativity, which is marginal.
    Marginal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSection {
    #[serde(default = "default_p0")]
    pub p0: Vec<f64>,
    #[serde(default)]
    pub phi: Option<String>,
    #[serde(default)]
    pub gamma: Option<f64>,
    /// `(a*, c*)`; fitted from samples when absent.
    #[serde(default)]
    pub lyapunov: Option<[f64; 2]>,
    #[serde(default)]
    pub expect: AuditExpectation,
}

fn default_p0() -> Vec<f64> {
    vec![2.0]
}

impl Default for AuditSection {
    fn default() -> Self {
        Self {
            p0: default_p0(),
            phi: None,
            gamma: None,
            lyapunov: None,
            expect: AuditExpectation::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolveSection {
    /// Initial datum, one expression per component; defaults to `1`.
    #[serde(default)]
    pub f: Vec<String>,
    /// Exact solution in `x` and `t`, if known.
    #[serde(default)]
    pub exact: Option<Vec<String>>,
    #[serde(default = "default_evolve_tolerance")]
    pub tolerance: f64,
    /// Repeat on the grid with half the nodes and report the error ratio.
    #[serde(default)]
    pub refinement: bool,
    #[serde(default = "default_refinement_range")]
    pub refinement_range: [f64; 2],
}

fn default_evolve_tolerance() -> f64 {
    1e-3
}
fn default_refinement_range() -> [f64; 2] {
    [3.5, 4.5]
}

impl Default for EvolveSection {
    fn default() -> Self {
        Self {
            f: Vec::new(),
            exact: None,
            tolerance: default_evolve_tolerance(),
            refinement: false,
            refinement_range: default_refinement_range(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateCheck {
    Pointwise,
    GradientSmooth,
    GradientRough,
    Lyapunov,
    Global,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatesSection {
    /// Explicit data fields; the seeded battery is appended.
    #[serde(default)]
    pub fields: Vec<Vec<String>>,
    #[serde(default = "default_estimate_battery")]
    pub battery: usize,
    #[serde(default = "default_times")]
    pub times: Vec<f64>,
    #[serde(default = "default_p")]
    pub p: f64,
    /// Defaults to every check whose inputs are configured.
    #[serde(default)]
    pub checks: Vec<EstimateCheck>,
    #[serde(default = "default_global_horizon")]
    pub global_horizon: f64,
}

fn default_estimate_battery() -> usize {
    3
}
fn default_times() -> Vec<f64> {
    vec![0.1, 0.5, 1.0]
}
fn default_p() -> f64 {
    2.0
}
fn default_global_horizon() -> f64 {
    10.0
}

impl Default for EstimatesSection {
    fn default() -> Self {
        Self {
            fields: Vec::new(),
            battery: default_estimate_battery(),
            times: default_times(),
            p: default_p(),
            checks: Vec::new(),
            global_horizon: default_global_horizon(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantSection {
    #[serde(default = "default_average_horizon")]
    pub horizon: f64,
    /// Base point of the kernel rows; defaults to the node minimising
    /// `audit.phi`, or the box centre.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    /// Time step of the extraction; defaults to `solver.dt`.
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default = "default_invariant_battery")]
    pub battery: usize,
    #[serde(default = "default_mass_tolerance")]
    pub mass_tolerance: f64,
    #[serde(default = "default_l1_tolerance")]
    pub l1_tolerance: f64,
    #[serde(default = "default_tail_shrink")]
    pub tail_shrink: f64,
    #[serde(default = "default_residual_tolerance")]
    pub residual_tolerance: f64,
}

fn default_average_horizon() -> f64 {
    20.0
}
fn default_invariant_battery() -> usize {
    10
}
fn default_mass_tolerance() -> f64 {
    1e-3
}
fn default_l1_tolerance() -> f64 {
    5e-2
}
fn default_tail_shrink() -> f64 {
    1.5
}
fn default_residual_tolerance() -> f64 {
    1e-6
}

impl Default for InvariantSection {
    fn default() -> Self {
        Self {
            horizon: default_average_horizon(),
            x0: None,
            dt: None,
            battery: default_invariant_battery(),
            mass_tolerance: default_mass_tolerance(),
            l1_tolerance: default_l1_tolerance(),
            tail_shrink: default_tail_shrink(),
            residual_tolerance: default_residual_tolerance(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdeSection {
    /// Target masses `int rho_i d mu`; defaults to `(1, 0, .., 0)`.
    #[serde(default)]
    pub masses: Vec<f64>,
    #[serde(default)]
    pub closed_form: Option<ClosedForm>,
    #[serde(default = "default_ode_tolerance")]
    pub tolerance: f64,
}

fn default_ode_tolerance() -> f64 {
    1e-8
}

impl Default for OdeSection {
    fn default() -> Self {
        Self {
            masses: Vec::new(),
            closed_form: None,
            tolerance: default_ode_tolerance(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsymptoticsSection {
    /// Datum; defaults to `(cos(x1), 0, .., 0)`.
    #[serde(default)]
    pub f: Vec<String>,
    #[serde(default = "default_asymptotic_horizon")]
    pub horizon: f64,
    /// Probe points; defaults to the box centre.
    #[serde(default)]
    pub probes: Vec<Vec<f64>>,
    #[serde(default = "default_asymptotic_tolerance")]
    pub tolerance: f64,
    /// Required `error(T) / error(T/2)`.
    #[serde(default = "default_decay")]
    pub decay: f64,
    /// Errors below this count as converged in the decay check.
    #[serde(default = "default_floor")]
    pub floor: f64,
}

fn default_asymptotic_horizon() -> f64 {
    10.0
}
fn default_asymptotic_tolerance() -> f64 {
    1e-2
}
fn default_decay() -> f64 {
    0.5
}
fn default_floor() -> f64 {
    1e-4
}

impl Default for AsymptoticsSection {
    fn default() -> Self {
        Self {
            f: Vec::new(),
            horizon: default_asymptotic_horizon(),
            probes: Vec::new(),
            tolerance: default_asymptotic_tolerance(),
            decay: default_decay(),
            floor: default_floor(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_output_dir")]
    pub dir: String,
}

fn default_output_dir() -> String {
    "out".into()
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: default_output_dir() }
    }
}

fn invalid(key: &str, message: impl Into<String>) -> CliError {
    CliError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(key, format!("must be positive and finite, got {v}")))
    }
}

impl Config {
    /// Reads, parses, fills defaults and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Toml { message, .. } => CliError::Toml {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut config: Config = toml::from_str(text).map_err(|e| CliError::Toml {
            path: "<string>".into(),
            message: e.to_string(),
        })?;
        config.resolve()?;
        Ok(config)
    }

    /// Fills data-dependent defaults, then validates.
    fn resolve(&mut self) -> Result<()> {
        let d = self.operator.d;
        let m = self.operator.m;
        if !(1..=3).contains(&d) {
            return Err(invalid("operator.d", format!("must be 1, 2 or 3, got {d}")));
        }
        if m == 0 {
            return Err(invalid("operator.m", "must be at least 1"));
        }
        if self.grid.center.is_empty() {
            self.grid.center = vec![0.0; d];
        }
        if self.experiments.is_empty() {
            self.experiments = Experiment::ALL
                .into_iter()
                .filter(|e| d == 1 || *e != Experiment::OdeDensities)
                .collect();
        }
        let mut seen = self.experiments.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.experiments.len() {
            return Err(invalid("experiments", "lists an experiment twice"));
        }
        if self.evolve.f.is_empty() {
            self.evolve.f = vec!["1".into(); m];
        }
        if self.estimates.checks.is_empty() {
            self.estimates.checks = vec![
                EstimateCheck::Pointwise,
                EstimateCheck::GradientSmooth,
                EstimateCheck::GradientRough,
            ];
            if self.audit.phi.is_some() {
                self.estimates.checks.push(EstimateCheck::Lyapunov);
                if self.audit.gamma.is_some() {
                    self.estimates.checks.push(EstimateCheck::Global);
                }
            }
        }
        if self.invariant.dt.is_none() {
            self.invariant.dt = Some(self.solver.dt);
        }
        if self.ode_densities.masses.is_empty() {
            let mut e = vec![0.0; m];
            e[0] = 1.0;
            self.ode_densities.masses = e;
        }
        if self.asymptotics.f.is_empty() {
            self.asymptotics.f = std::iter::once("cos(x1)".to_string())
                .chain(std::iter::repeat_n("0".to_string(), m - 1))
                .collect();
        }
        if self.asymptotics.probes.is_empty() {
            self.asymptotics.probes = vec![self.grid.center.clone()];
        }
        self.validate()
    }

    fn validate(&self) -> Result<()> {
        let d = self.operator.d;
        let m = self.operator.m;
        let op = &self.operator;
        if op.q.len() != d || op.q.iter().any(|r| r.len() != d) {
            return Err(invalid("operator.q", format!("must be a {d} x {d} table")));
        }
        if op.b.len() != d {
            return Err(invalid("operator.b", format!("must have {d} entries")));
        }
        if op.coupling.len() != d || op.coupling.iter().any(|b| b.len() != m || b.iter().any(|r| r.len() != m)) {
            return Err(invalid("operator.B", format!("must hold {d} matrices of size {m} x {m}")));
        }
        if op.params.contains_key("t") {
            return Err(invalid("operator.params", "`t` is reserved for time"));
        }
        self.operator_spec()?;

        positive("grid.L", self.grid.half_width)?;
        if self.grid.nodes < MIN_NODES {
            return Err(invalid(
                "grid.N",
                format!("grid too coarse: N = {} (need at least {MIN_NODES})", self.grid.nodes),
            ));
        }
        if self.grid.center.len() != d {
            return Err(invalid("grid.center", format!("must have {d} entries")));
        }
        self.grid()?;

        positive("solver.dt", self.solver.dt)?;
        positive("solver.horizon", self.solver.horizon)?;
        if self.solver.snapshot_every == 0 {
            return Err(invalid("solver.snapshot_every", "must be at least 1"));
        }

        if self.audit.p0.is_empty() || self.audit.p0.iter().any(|p| !(*p > 1.0)) {
            return Err(invalid("audit.p0", "needs at least one exponent, all > 1"));
        }
        if let Some(g) = self.audit.gamma {
            if !(g > 1.0) {
                return Err(invalid("audit.gamma", format!("must exceed 1, got {g}")));
            }
        }
        if let Some([_, c]) = self.audit.lyapunov {
            positive("audit.lyapunov", c)?;
        }
        self.phi()?;

        self.fields("evolve.f", &self.evolve.f, false)?;
        if let Some(exact) = &self.evolve.exact {
            self.fields("evolve.exact", exact, true)?;
        }
        positive("evolve.tolerance", self.evolve.tolerance)?;

        for (k, f) in self.estimates.fields.iter().enumerate() {
            self.fields(&format!("estimates.fields[{k}]"), f, false)?;
        }
        if self.estimates.times.is_empty() {
            return Err(invalid("estimates.times", "needs at least one time"));
        }
        for t in &self.estimates.times {
            positive("estimates.times", *t)?;
        }
        if !(self.estimates.p > 1.0) {
            return Err(invalid("estimates.p", "must exceed 1"));
        }
        positive("estimates.global_horizon", self.estimates.global_horizon)?;
        for c in &self.estimates.checks {
            match c {
                EstimateCheck::Lyapunov if self.audit.phi.is_none() => {
                    return Err(invalid("estimates.checks", "the lyapunov check needs audit.phi"));
                }
                EstimateCheck::Global if self.audit.phi.is_none() || self.audit.gamma.is_none() => {
                    return Err(invalid("estimates.checks", "the global check needs audit.phi and audit.gamma"));
                }
                _ => {}
            }
        }

        positive("invariant.horizon", self.invariant.horizon)?;
        positive("invariant.dt", self.invariant.dt.unwrap_or(self.solver.dt))?;
        if let Some(x0) = &self.invariant.x0 {
            if x0.len() != d {
                return Err(invalid("invariant.x0", format!("must have {d} entries")));
            }
        }

        if self.ode_densities.masses.len() != m {
            return Err(invalid("ode-densities.masses", format!("must have {m} entries")));
        }
        if let Some(cf) = &self.ode_densities.closed_form {
            if m != 2 || d != 1 {
                return Err(invalid("ode-densities.closed_form", "closed forms exist for d = 1, m = 2 only"));
            }
            cf.validate().map_err(|e| invalid("ode-densities.closed_form", e.to_string()))?;
        }

        self.fields("asymptotics.f", &self.asymptotics.f, false)?;
        positive("asymptotics.horizon", self.asymptotics.horizon)?;
        positive("asymptotics.decay", self.asymptotics.decay)?;
        if !(self.asymptotics.floor >= 0.0) {
            return Err(invalid("asymptotics.floor", "must be non-negative"));
        }
        if self.asymptotics.probes.iter().any(|p| p.len() != d) {
            return Err(invalid("asymptotics.probes", format!("each probe needs {d} coordinates")));
        }
        if self.output.dir.is_empty() {
            return Err(invalid("output.dir", "must not be empty"));
        }
        Ok(())
    }

    pub fn scope(&self) -> Scope {
        Scope::new(self.operator.d).with_params(self.operator.params.keys().cloned())
    }

    pub fn operator_spec(&self) -> Result<OperatorSpec> {
        let op = &self.operator;
        OperatorSpec::parse(&op.q, &op.b, &op.coupling, op.params.clone())
            .map_err(|e| invalid("operator", e.to_string()))
    }

    pub fn grid(&self) -> Result<Grid> {
        let d = self.operator.d;
        Grid::with_axes(
            &self.grid.center,
            &vec![self.grid.half_width; d],
            &vec![self.grid.nodes; d],
            self.grid.bc,
        )
        .map_err(|e| invalid("grid", e.to_string()))
    }

    pub fn phi(&self) -> Result<Option<Expr>> {
        self.audit
            .phi
            .as_ref()
            .map(|s| parse(s, &self.scope()).map_err(|e| invalid("audit.phi", e.to_string())))
            .transpose()
    }

    /// Parses `m` expressions; `with_time` adds `t` to the scope.
    pub fn fields(&self, key: &str, src: &[String], with_time: bool) -> Result<Vec<Expr>> {
        if src.len() != self.operator.m {
            return Err(invalid(key, format!("must have {} entries", self.operator.m)));
        }
        let mut scope = self.scope();
        if with_time {
            scope = scope.with_params(["t"]);
        }
        src.iter()
            .map(|s| parse(s, &scope).map_err(|e| invalid(key, format!("`{s}`: {e}"))))
            .collect()
    }

    /// Canonical JSON of the resolved configuration.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        serde_json::to_string(&value).expect("value serialises")
    }

    pub fn sha256(&self) -> String {
        crate::report::sha256_hex(self.canonical_json().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [operator]
        d = 1
        m = 2
        q = [["1"]]
        b = ["-x"]
        B = [[["0", "-1"], ["-1", "0"]]]

        [grid]
        L = 8.0
        N = 129
    "#;

    #[test]
    fn defaults_are_filled() {
        let c = Config::from_toml(MINIMAL).unwrap();
        assert_eq!(c.seed, 1);
        assert_eq!(c.grid.center, vec![0.0]);
        assert_eq!(c.experiments.len(), 6);
        assert_eq!(c.evolve.f, vec!["1", "1"]);
        assert_eq!(c.asymptotics.f, vec!["cos(x1)", "0"]);
        assert_eq!(c.invariant.dt, Some(1e-3));
        assert_eq!(c.estimates.checks.len(), 3);
    }

    #[test]
    fn coarse_grid_is_rejected() {
        let src = MINIMAL.replace("N = 129", "N = 4");
        let err = Config::from_toml(&src).unwrap_err().to_string();
        assert!(err.contains("grid too coarse") && err.contains("grid.N"), "{err}");
    }

    #[test]
    fn unknown_keys_are_named() {
        let src = format!("{MINIMAL}\n[solvr]\ndt = 0.1\n");
        let err = Config::from_toml(&src).unwrap_err().to_string();
        assert!(err.contains("solvr"), "{err}");
        let src = MINIMAL.replace("L = 8.0", "L = 8.0\nwidth = 3");
        let err = Config::from_toml(&src).unwrap_err().to_string();
        assert!(err.contains("width"), "{err}");
    }

    #[test]
    fn parse_errors_carry_positions() {
        let err = Config::from_toml("[operator\nd = 1").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn shape_errors_name_the_key() {
        let src = MINIMAL.replace(r#"b = ["-x"]"#, r#"b = ["-x", "0"]"#);
        let err = Config::from_toml(&src).unwrap_err().to_string();
        assert!(err.contains("operator.b"), "{err}");
        let src = MINIMAL.replace(r#"b = ["-x"]"#, r#"b = ["-x +"]"#);
        assert!(Config::from_toml(&src).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = Config::from_toml(MINIMAL).unwrap();
        let again: Config = serde_json::from_str(&c.canonical_json()).unwrap();
        assert_eq!(again.canonical_json(), c.canonical_json());
    }
}
