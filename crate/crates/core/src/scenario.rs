//! Scenario files.
//!
//! A scenario is a JSON document describing one model, its forcing, and
//! default solver and simulation settings. Unknown keys are rejected. Lines
//! whose first non-blank characters are `//` are treated as comments and
//! removed before parsing, so reference files can be annotated.
//!
//! ```json
//! {
//!   "name": "scalar",
//!   "dims": { "n": 1, "m": 1, "m0": 1 },
//!   "generator": [[0.0]],
//!   "regimes": [ { "A": [[-1.0]], "B": [[1.0]], "Q": [[1.0]], "R": [[1.0]] } ],
//!   "forcing": { "b": { "kind": "constant", "value": [1.0] } },
//!   "solver": { "dt": 0.01, "tol": 1e-10, "horizon": 10.0, "riccati_diffusion_weight": "P1" },
//!   "simulation": { "n_paths": 1000, "master_seed": 7, "x0": [1.0], "initial_regime": 0 }
//! }
//! ```
//!
//! Blocks `A, B, Q, R` are required; the remaining blocks default to zero.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::from_rows;
use crate::markov::{validate_generator, GeneratorMatrix};
use crate::model::{decompose, DecomposedModel, ForcingSignals, RawCoefficients, RegimeCoefficients};
use crate::riccati::DiffusionWeight;
use crate::simulate::SimulationConfig;
use crate::Mat;

/// One problem found while validating a scenario.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    /// Dotted path to the offending field, for example `regimes[1].B`.
    pub field: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed scenario at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid scenario: {}", join(.0))]
    Validation(Vec<Diagnostic>),
}

fn join(diags: &[Diagnostic]) -> String {
    diags.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub m0: usize,
}

/// Row-major blocks of one regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
pub struct RegimeBlocks {
    pub A: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub A_bar: Option<Vec<Vec<f64>>>,
    pub B: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub B_bar: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub C: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub C_bar: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub D: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub D_bar: Option<Vec<Vec<f64>>>,
    pub Q: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub Q_bar: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub S: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub S_bar: Option<Vec<Vec<f64>>>,
    pub R: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub R_bar: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    pub dt: f64,
    /// Stationarity tolerance for the algebraic solve.
    pub tol: f64,
    /// Default finite horizon.
    pub horizon: f64,
    pub riccati_diffusion_weight: DiffusionWeight,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            dt: 0.01,
            tol: 1e-10,
            horizon: 10.0,
            riccati_diffusion_weight: DiffusionWeight::P1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSettings {
    pub n_paths: usize,
    pub master_seed: u64,
    /// Initial state; all ones when omitted.
    pub x0: Option<Vec<f64>>,
    pub initial_regime: usize,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        Self {
            n_paths: 1000,
            master_seed: 0,
            x0: None,
            initial_regime: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub dims: Dims,
    pub generator: Vec<Vec<f64>>,
    pub regimes: Vec<RegimeBlocks>,
    #[serde(default)]
    pub forcing: ForcingSignals,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub simulation: SimulationSettings,
}

/// A parsed and validated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub file: ScenarioFile,
    raw: RawCoefficients,
}

/// Removes lines whose first non-blank characters are `//`, keeping line numbers.
pub fn strip_comments(text: &str) -> String {
    text.lines()
        .map(|l| if l.trim_start().starts_with("//") { "" } else { l })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn parse_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_scenario_str(&text)
}

pub fn parse_scenario_str(text: &str) -> Result<Scenario, ScenarioError> {
    let file: ScenarioFile = serde_json::from_str(&strip_comments(text)).map_err(|e| ScenarioError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    Scenario::from_file(file)
}

fn block(
    diags: &mut Vec<Diagnostic>,
    field: String,
    rows: Option<&Vec<Vec<f64>>>,
    shape: (usize, usize),
) -> Mat {
    match rows {
        None => Mat::zeros(shape.0, shape.1),
        Some(r) => match from_rows(r) {
            Some(m) if m.shape() == shape => m,
            Some(m) => {
                diags.push(Diagnostic {
                    field,
                    message: format!("shape {}x{}, expected {}x{}", m.nrows(), m.ncols(), shape.0, shape.1),
                });
                Mat::zeros(shape.0, shape.1)
            }
            None if shape.0 == 0 || shape.1 == 0 => Mat::zeros(shape.0, shape.1),
            None => {
                diags.push(Diagnostic {
                    field,
                    message: format!("rows are empty or ragged, expected {}x{}", shape.0, shape.1),
                });
                Mat::zeros(shape.0, shape.1)
            }
        },
    }
}

impl Scenario {
    /// Validates dimensions, blocks, generator, forcing and settings.
    pub fn from_file(file: ScenarioFile) -> Result<Self, ScenarioError> {
        let Dims { n, m, m0 } = file.dims;
        let mut diags = Vec::new();
        let mut push = |field: &str, message: String| {
            diags.push(Diagnostic {
                field: field.to_string(),
                message,
            })
        };
        if n == 0 || m == 0 || m0 == 0 {
            push("dims", format!("n, m and m0 must be positive, got {n}, {m}, {m0}"));
            return Err(ScenarioError::Validation(diags));
        }
        if file.regimes.len() != m0 {
            push("regimes", format!("{} entries for m0 = {m0}", file.regimes.len()));
        }
        let generator: Option<GeneratorMatrix> = match from_rows(&file.generator) {
            Some(g) if g.shape() == (m0, m0) => match validate_generator(&g) {
                Ok(g) => Some(g),
                Err(e) => {
                    push("generator", e.to_string());
                    None
                }
            },
            Some(g) => {
                push("generator", format!("shape {}x{}, expected {m0}x{m0}", g.nrows(), g.ncols()));
                None
            }
            None => {
                push("generator", "rows are empty or ragged".into());
                None
            }
        };
        let s = &file.solver;
        if !(s.dt > 0.0 && s.dt.is_finite()) {
            push("solver.dt", format!("must be positive, got {}", s.dt));
        }
        if !(s.tol > 0.0 && s.tol.is_finite()) {
            push("solver.tol", format!("must be positive, got {}", s.tol));
        }
        if !(s.horizon >= 0.0 && s.horizon.is_finite()) {
            push("solver.horizon", format!("must be nonnegative, got {}", s.horizon));
        }
        let sim = &file.simulation;
        if sim.n_paths == 0 {
            push("simulation.n_paths", "must be at least 1".into());
        }
        if let Some(x0) = &sim.x0 {
            if x0.len() != n || x0.iter().any(|v| !v.is_finite()) {
                push("simulation.x0", format!("needs {n} finite entries, got {}", x0.len()));
            }
        }
        if sim.initial_regime >= m0 {
            push("simulation.initial_regime", format!("{} out of range for {m0} regimes", sim.initial_regime));
        }
        if let Err(e) = file.forcing.validate(n, m, m0) {
            push("forcing", e.to_string());
        }

        let mut regimes = Vec::with_capacity(file.regimes.len());
        for (i, r) in file.regimes.iter().enumerate() {
            let f = |name: &str| format!("regimes[{i}].{name}");
            let (nn, nm, mn, mm) = ((n, n), (n, m), (m, n), (m, m));
            let mut c = RegimeCoefficients::zeros(n, m);
            c.a = block(&mut diags, f("A"), Some(&r.A), nn);
            c.a_bar = block(&mut diags, f("A_bar"), r.A_bar.as_ref(), nn);
            c.b = block(&mut diags, f("B"), Some(&r.B), nm);
            c.b_bar = block(&mut diags, f("B_bar"), r.B_bar.as_ref(), nm);
            c.c = block(&mut diags, f("C"), r.C.as_ref(), nn);
            c.c_bar = block(&mut diags, f("C_bar"), r.C_bar.as_ref(), nn);
            c.d = block(&mut diags, f("D"), r.D.as_ref(), nm);
            c.d_bar = block(&mut diags, f("D_bar"), r.D_bar.as_ref(), nm);
            c.q = block(&mut diags, f("Q"), Some(&r.Q), nn);
            c.q_bar = block(&mut diags, f("Q_bar"), r.Q_bar.as_ref(), nn);
            c.s = block(&mut diags, f("S"), r.S.as_ref(), mn);
            c.s_bar = block(&mut diags, f("S_bar"), r.S_bar.as_ref(), mn);
            c.r = block(&mut diags, f("R"), Some(&r.R), mm);
            c.r_bar = block(&mut diags, f("R_bar"), r.R_bar.as_ref(), mm);
            regimes.push(c);
        }
        if !diags.is_empty() {
            return Err(ScenarioError::Validation(diags));
        }
        let generator = generator.expect("generator diagnostics are reported above");
        let raw = RawCoefficients::new(n, m, regimes, generator).map_err(|e| {
            let field = match &e {
                crate::model::ModelError::Shape { regime, block, .. }
                | crate::model::ModelError::NonFinite { regime, block }
                | crate::model::ModelError::NotSymmetric { regime, block } => format!("regimes[{regime}].{block}"),
                _ => "regimes".to_string(),
            };
            ScenarioError::Validation(vec![Diagnostic {
                field,
                message: e.to_string(),
            }])
        })?;
        Ok(Self { file, raw })
    }

    pub fn name(&self) -> &str {
        &self.file.name
    }

    pub fn raw(&self) -> &RawCoefficients {
        &self.raw
    }

    pub fn model(&self) -> DecomposedModel {
        decompose(&self.raw, &self.file.forcing).expect("forcing validated with the scenario")
    }

    pub fn solver(&self) -> &SolverSettings {
        &self.file.solver
    }

    pub fn x0(&self) -> Vec<f64> {
        self.file
            .simulation
            .x0
            .clone()
            .unwrap_or_else(|| vec![1.0; self.file.dims.n])
    }

    /// Simulation settings of the file on `[0, horizon]` with the solver step.
    pub fn simulation_config(&self, horizon: f64) -> SimulationConfig {
        let s = &self.file.simulation;
        SimulationConfig::new(
            self.file.solver.dt,
            horizon,
            s.n_paths,
            s.master_seed,
            self.x0(),
            s.initial_regime,
        )
    }
}
