//! Experiment configuration: a TOML document with one table per block.
//!
//! Every block rejects unknown keys. Overrides of the form `section.key=value`
//! are applied to the parsed document before it is typed, so they obey the
//! same schema as the file.

use std::path::{Path, PathBuf};

use serde::de::IntoDeserializer;
use serde::Deserialize;
use teugel_core::{Atom, JumpMeasure, LevyModel};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub basis: BasisConfig,
    pub grid: GridConfig,
    pub monte_carlo: MonteCarloConfig,
    pub problem: Option<ProblemConfig>,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Lévy model; defaults to the reference model.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub drift: f64,
    pub sigma: f64,
    /// `[location, intensity]` pairs.
    pub atoms: Vec<[f64; 2]>,
    pub brownian_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            drift: 0.0,
            sigma: 1.0,
            atoms: vec![[1.0, 0.5], [-1.0, 0.5]],
            brownian_dim: 1,
        }
    }
}

impl ModelConfig {
    pub fn to_model(&self) -> LevyModel {
        let atoms = self.atoms.iter().map(|[x, l]| Atom::new(*x, *l)).collect();
        LevyModel::new(self.drift, self.sigma, JumpMeasure::new(atoms), self.brownian_dim)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisConfig {
    /// Number of Teugel martingales `K`.
    pub level: usize,
    /// Tolerance on `max|c G cᵀ − I|`.
    pub tolerance: f64,
    /// Rows the coefficient matrix must reproduce, zero-padded to `K`.
    pub expected_rows: Option<Vec<Vec<f64>>>,
    pub expected_tolerance: f64,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            level: 3,
            tolerance: 1e-10,
            expected_rows: None,
            expected_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "one")]
    pub horizon: f64,
    pub n_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub n_paths: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Exactly one problem kind, written as `[problem.bsde]`, `[problem.blq]` or
/// `[problem.verify]`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    Bsde(BsdeProblem),
    Blq(BlqProblem),
    Verify(VerifyProblem),
}

impl ProblemConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            ProblemConfig::Bsde(_) => "bsde",
            ProblemConfig::Blq(_) => "blq",
            ProblemConfig::Verify(_) => "verify",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsdeProblem {
    pub cases: Vec<BsdeCase>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsdeCase {
    pub name: String,
    #[serde(default)]
    pub driver: DriverChoice,
    pub terminal: TerminalConfig,
    /// Tolerance of the oracle comparison, when the case has an oracle.
    #[serde(default = "two_percent")]
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriverChoice {
    #[default]
    Zero,
    /// `f = beta·y`.
    Linear { beta: f64 },
    /// `f = a·sin(y) + b·z¹`.
    Sine { a: f64, b: f64 },
}

/// `ξ = c + Σ_i w_i W^i(T) + Σ_i h_i H^i(T) + l·L(T)`, one row per component.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalConfig {
    pub constant: Vec<f64>,
    #[serde(default)]
    pub w: Vec<Vec<f64>>,
    #[serde(default)]
    pub h: Vec<Vec<f64>>,
    #[serde(default)]
    pub l: Vec<f64>,
}

impl TerminalConfig {
    pub fn dim(&self) -> usize {
        self.constant.len()
    }

    pub fn is_constant(&self) -> bool {
        let zero = |rows: &[Vec<f64>]| rows.iter().flatten().all(|v| *v == 0.0);
        zero(&self.w) && zero(&self.h) && self.l.iter().all(|v| *v == 0.0)
    }
}

/// Constant BLQ coefficients, row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlqProblem {
    pub n: usize,
    pub m: usize,
    pub terminal: TerminalConfig,
    /// `A`, `n×n`.
    #[serde(default)]
    pub drift_y: Option<Vec<Vec<f64>>>,
    /// `B^i`, one `n×n` matrix per Brownian component.
    #[serde(default)]
    pub drift_q: Vec<Vec<Vec<f64>>>,
    /// `C^i`, one `n×n` matrix per Teugel component.
    #[serde(default)]
    pub drift_z: Vec<Vec<Vec<f64>>>,
    /// `D`, `n×m`.
    pub drift_u: Vec<Vec<f64>>,
    /// `E`.
    #[serde(default)]
    pub weight_y: Option<Vec<Vec<f64>>>,
    /// `F^i`.
    #[serde(default)]
    pub weight_q: Vec<Vec<Vec<f64>>>,
    /// `G^i`.
    #[serde(default)]
    pub weight_z: Vec<Vec<Vec<f64>>>,
    /// `N`, `m×m`.
    pub weight_u: Vec<Vec<f64>>,
    /// `M`, `n×n`.
    pub weight_y0: Vec<Vec<f64>>,
    #[serde(default)]
    pub checks: BlqChecks,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlqChecks {
    /// Directions for the gradient-versus-central-difference check.
    pub gradient_directions: usize,
    pub fd_epsilon: f64,
    pub fd_tolerance: f64,
    /// Directions for the comparison against perturbed controls.
    pub comparison_directions: usize,
    pub comparison_epsilons: Vec<f64>,
    /// Repeat the solve with `2ξ` and check exact homogeneity.
    pub homogeneity: bool,
    pub closed_form_tolerance: f64,
    pub stationarity_tolerance: f64,
    /// Paths written to the trajectory CSV.
    pub dump_paths: usize,
}

impl Default for BlqChecks {
    fn default() -> Self {
        Self {
            gradient_directions: 5,
            fd_epsilon: 1e-3,
            fd_tolerance: 1e-2,
            comparison_directions: 20,
            comparison_epsilons: vec![0.1, 0.2],
            homogeneity: true,
            closed_form_tolerance: 0.02,
            stationarity_tolerance: 1e-5,
            dump_paths: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyProblem {
    pub scenario: VerifyScenario,
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    /// The duality check compares the configured grid with one coarsened by this factor.
    #[serde(default = "two")]
    pub coarsen: usize,
    #[serde(default = "default_duality_ratio")]
    pub min_duality_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyScenario {
    /// Driver with `sin(y)`: expansion rates and the duality identity.
    Nonlinear,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    pub ridge: f64,
    pub degree: usize,
    pub damping: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub correction_pass: bool,
    pub divergence_bound: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            ridge: 1e-10,
            degree: 2,
            damping: 0.5,
            tol: 1e-6,
            max_iters: 200,
            correction_pass: false,
            divergence_bound: 1e12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: PathBuf,
    /// Any of `csv`, `json`, `txt`.
    pub formats: Vec<String>,
    /// Paths written by `simulate` as a raw increment dump; 0 disables it.
    pub path_dump: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("teugel-out"),
            formats: vec!["csv".into(), "json".into(), "txt".into()],
            path_dump: 0,
        }
    }
}

impl OutputConfig {
    pub fn wants(&self, format: &str) -> bool {
        self.formats.iter().any(|f| f == format)
    }
}

fn one() -> f64 {
    1.0
}

fn two() -> usize {
    2
}

fn two_percent() -> f64 {
    0.02
}

fn default_epsilons() -> Vec<f64> {
    vec![0.4, 0.2, 0.1, 0.05]
}

fn default_duality_ratio() -> f64 {
    1.7
}

/// Parses `text`, applies `key=value` overrides, and validates the result.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let mut doc: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(doc.into_deserializer()).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.message().trim().to_owned();
        if path == "." || path.is_empty() {
            CliError::Config(msg)
        } else {
            CliError::Config(format!("in `{path}`: {msg}"))
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text, overrides).map_err(|e| match e {
        CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// `a.b.c=value`; the value is read as a TOML literal, or as a bare string
/// when it does not parse as one.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key `{key}` is malformed")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.monte_carlo.n_paths == 0 {
            return bad("n_paths must be positive".into());
        }
        if self.grid.n_steps == 0 {
            return bad("n_steps must be positive".into());
        }
        if !(self.grid.horizon > 0.0 && self.grid.horizon.is_finite()) {
            return bad("horizon must be positive and finite".into());
        }
        if self.basis.level == 0 {
            return bad("basis level must be positive".into());
        }
        if self.model.brownian_dim == 0 {
            return bad("brownian_dim must be positive".into());
        }
        if let Some(rows) = &self.basis.expected_rows {
            if rows.len() > self.basis.level || rows.iter().any(|r| r.len() > self.basis.level) {
                return bad("expected_rows exceed the basis level".into());
            }
        }
        for f in &self.output.formats {
            if !["csv", "json", "txt"].contains(&f.as_str()) {
                return bad(format!("unknown output format `{f}`"));
            }
        }
        let (d, k) = (self.model.brownian_dim, self.basis.level);
        match &self.problem {
            None => Ok(()),
            Some(ProblemConfig::Bsde(p)) => {
                if p.cases.is_empty() {
                    return bad("problem.bsde needs at least one case".into());
                }
                for c in &p.cases {
                    check_terminal(&c.terminal, c.terminal.dim().max(1), d, k, &c.name)?;
                    if !matches!(c.driver, DriverChoice::Zero) && c.terminal.dim() != 1 {
                        return bad(format!("case `{}`: linear and sine drivers are scalar", c.name));
                    }
                }
                Ok(())
            }
            Some(ProblemConfig::Blq(p)) => p.validate_dims(d, k),
            Some(ProblemConfig::Verify(v)) => {
                if v.epsilons.len() < 2 || v.epsilons.iter().any(|e| !(*e > 0.0)) {
                    return bad("verify needs at least two positive epsilons".into());
                }
                if v.coarsen < 2 || self.grid.n_steps % v.coarsen != 0 {
                    return bad("coarsen must be at least 2 and divide n_steps".into());
                }
                Ok(())
            }
        }
    }
}

fn check_terminal(t: &TerminalConfig, n: usize, d: usize, k: usize, what: &str) -> Result<(), CliError> {
    let bad = |msg: String| Err(CliError::Config(format!("{what}: {msg}")));
    if t.dim() != n {
        return bad(format!("terminal constant has {} entries, expected {n}", t.dim()));
    }
    if t.w.len() > d || t.w.iter().any(|r| r.len() != n) {
        return bad(format!("terminal w must have at most {d} rows of length {n}"));
    }
    if t.h.len() > k || t.h.iter().any(|r| r.len() != n) {
        return bad(format!("terminal h must have at most {k} rows of length {n}"));
    }
    if !t.l.is_empty() && t.l.len() != n {
        return bad(format!("terminal l must have {n} entries"));
    }
    Ok(())
}

fn check_matrix(m: &[Vec<f64>], rows: usize, cols: usize, name: &str) -> Result<(), CliError> {
    if m.len() != rows || m.iter().any(|r| r.len() != cols) {
        return Err(CliError::Config(format!("{name} must be {rows}x{cols}")));
    }
    Ok(())
}

impl BlqProblem {
    fn validate_dims(&self, d: usize, k: usize) -> Result<(), CliError> {
        let (n, m) = (self.n, self.m);
        if n == 0 || m == 0 {
            return Err(CliError::Config("blq dimensions n and m must be positive".into()));
        }
        check_terminal(&self.terminal, n, d, k, "problem.blq")?;
        for (name, mat) in [("drift_y", &self.drift_y), ("weight_y", &self.weight_y)] {
            if let Some(mat) = mat {
                check_matrix(mat, n, n, name)?;
            }
        }
        check_matrix(&self.drift_u, n, m, "drift_u")?;
        check_matrix(&self.weight_u, m, m, "weight_u")?;
        check_matrix(&self.weight_y0, n, n, "weight_y0")?;
        for (name, list, count) in [
            ("drift_q", &self.drift_q, d),
            ("weight_q", &self.weight_q, d),
            ("drift_z", &self.drift_z, k),
            ("weight_z", &self.weight_z, k),
        ] {
            if !list.is_empty() && list.len() != count {
                return Err(CliError::Config(format!("{name} needs {count} matrices, got {}", list.len())));
            }
            for mat in list {
                check_matrix(mat, n, n, name)?;
            }
        }
        Ok(())
    }
}
