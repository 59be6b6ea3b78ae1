//! Subcommand bodies. Each builds its artifacts in memory, then writes them.

use std::path::PathBuf;

use mflq::feedforward::{integrate_eta, stationary_feedforward};
use mflq::linalg::to_rows;
use mflq::model::{assumption_report, classify_forcing, AssumptionReport, DecomposedModel, ForcingClass};
use mflq::riccati::{
    integrate_riccati_with, solve_are_with, AreOptions, DiffusionWeight, RegimeFamily, RiccatiOptions,
    StationarySolution,
};
use mflq::scenario::{parse_scenario, Scenario};
use mflq::simulate::{
    evaluate_ergodic_cost, simulate_closed_loop, ErgodicPoint, MomentPoint, PolicyTable, RecordMode,
    SimulationConfig,
};
use mflq::stability::{check_stabilizer, zero_gains, LyapunovCertificate};
use mflq::stats::Estimate;
use mflq::turnpike::{plot_script, run_turnpike_experiment, TurnpikeSettings, OFFSET_TOL};
use mflq::{Mat, Vector, DEVIATION, MEAN};
use serde::Serialize;

use crate::report::{csv_table, sha256_hex, timestamp, write_report, Artifact, OutputEntry, RunManifest};
use crate::{CliError, Command, RunArgs};

/// Default horizon lists.
pub const TURNPIKE_HORIZONS: [f64; 3] = [5.0, 10.0, 20.0];
pub const ERGODIC_HORIZONS: [f64; 3] = [50.0, 100.0, 200.0];
/// Recorded times per simulated path, besides `t = 0`.
const SIMULATE_CHECKPOINTS: usize = 20;

/// Files written and, for `check`, a failure found after the report was written.
#[derive(Debug)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub verdict: Option<CliError>,
}

/// Scenario defaults with command-line overrides applied.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub dt: f64,
    pub tol: f64,
    pub horizon: f64,
    pub horizons: Option<Vec<f64>>,
    pub n_paths: usize,
    pub master_seed: u64,
    pub diffusion_weight: DiffusionWeight,
    /// Step of the stationary solve; automatic unless `--dt` is given.
    pub are_dt: Option<f64>,
}

impl Settings {
    pub fn resolve(scenario: &Scenario, args: &RunArgs) -> Self {
        let s = scenario.solver();
        let sim = &scenario.file.simulation;
        Self {
            dt: args.dt.unwrap_or(s.dt),
            tol: args.tol.unwrap_or(s.tol),
            horizon: args.horizon.unwrap_or(s.horizon),
            horizons: args.horizons.clone(),
            n_paths: args.paths.unwrap_or(sim.n_paths),
            master_seed: args.seed.unwrap_or(sim.master_seed),
            diffusion_weight: args.diffusion_weight.map_or(s.riccati_diffusion_weight, Into::into),
            are_dt: args.dt,
        }
    }

    fn sim_config(&self, scenario: &Scenario, horizon: f64) -> SimulationConfig {
        SimulationConfig::new(
            self.dt,
            horizon,
            self.n_paths,
            self.master_seed,
            scenario.x0(),
            scenario.file.simulation.initial_regime,
        )
    }

    fn riccati_options(&self) -> RiccatiOptions {
        RiccatiOptions {
            weight: self.diffusion_weight,
            ..RiccatiOptions::default()
        }
    }

    fn are_options(&self) -> AreOptions {
        AreOptions {
            tol: self.tol,
            dt: self.are_dt,
            weight: self.diffusion_weight,
            ..AreOptions::default()
        }
    }
}

fn core<E: Into<mflq::Error>>(e: E) -> CliError {
    CliError::Core(e.into())
}

/// `<scenario>_<subcommand>_<hash>` with a 16-hex-digit hash of the inputs.
pub fn output_base(scenario: &Scenario, bytes: &[u8], subcommand: &str, settings: &Settings) -> String {
    let mut input = bytes.to_vec();
    input.push(0);
    input.extend_from_slice(subcommand.as_bytes());
    input.push(0);
    input.extend_from_slice(serde_json::to_string(settings).unwrap_or_default().as_bytes());
    let hash = sha256_hex(&input);
    format!("{}_{subcommand}_{}", scenario.name(), &hash[..16])
}

pub fn run(command: &Command) -> Result<Outcome, CliError> {
    let started = timestamp();
    let args = command.args();
    let bytes = std::fs::read(&args.scenario)
        .map_err(|e| CliError::Io(format!("{}: {e}", args.scenario.display())))?;
    let scenario = parse_scenario(&args.scenario).map_err(core)?;
    let settings = Settings::resolve(&scenario, args);
    let model = scenario.model();
    let name = command.name();
    let base = output_base(&scenario, &bytes, name, &settings);

    let (artifacts, verdict) = match command {
        Command::Check(_) => check(&model, &settings)?,
        Command::Riccati(_) => (riccati(&model, &settings)?, None),
        Command::Are(_) => (are(&model, &settings)?, None),
        Command::Feedforward(_) => (feedforward(&model, &settings)?, None),
        Command::Simulate(_) => (simulate(&scenario, &model, &settings)?, None),
        Command::Turnpike(_) => (turnpike(&scenario, &model, &settings, &base)?, None),
        Command::Ergodic(_) => (ergodic(&scenario, &model, &settings)?, None),
    };

    let written = write_report(&args.out, &base, &artifacts)?;
    let (mut files, outputs): (Vec<PathBuf>, Vec<OutputEntry>) = written.into_iter().unzip();
    let manifest = RunManifest {
        toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        subcommand: name.to_string(),
        scenario: scenario.name().to_string(),
        scenario_hash: sha256_hex(&bytes),
        seed: settings.master_seed,
        settings: serde_json::to_value(&settings).unwrap_or_default(),
        started,
        finished: timestamp(),
        outputs,
    };
    let manifest = Artifact::json(".manifest.json", &manifest)?;
    let (path, _) = write_report(&args.out, &base, &[manifest])?
        .pop()
        .ok_or_else(|| CliError::Io("manifest not written".into()))?;
    files.push(path);
    Ok(Outcome { files, verdict })
}

#[derive(Serialize)]
struct CertificateReport {
    delta_star: f64,
    min_eigenvalue: f64,
    sigma_1: Vec<Vec<Vec<f64>>>,
    sigma_2: Vec<Vec<Vec<f64>>>,
}

impl From<&LyapunovCertificate> for CertificateReport {
    fn from(c: &LyapunovCertificate) -> Self {
        Self {
            delta_star: c.delta_star,
            min_eigenvalue: c.min_eigenvalue(),
            sigma_1: c.sigma[DEVIATION].iter().map(to_rows).collect(),
            sigma_2: c.sigma[MEAN].iter().map(to_rows).collect(),
        }
    }
}

fn family_rows(f: &[[Mat; 2]], k: usize) -> Vec<Vec<Vec<f64>>> {
    f.iter().map(|x| to_rows(&x[k])).collect()
}

#[derive(Serialize)]
struct StationaryReport {
    p_1: Vec<Vec<Vec<f64>>>,
    p_2: Vec<Vec<Vec<f64>>>,
    theta_1: Vec<Vec<Vec<f64>>>,
    theta_2: Vec<Vec<Vec<f64>>>,
    /// Frobenius norm of the algebraic residual, `[regime][k]`.
    residuals: Vec<[f64; 2]>,
    max_residual: f64,
    horizon_used: f64,
    dt: f64,
    diffusion_weight: DiffusionWeight,
    certificate: CertificateReport,
}

impl From<&StationarySolution> for StationaryReport {
    fn from(s: &StationarySolution) -> Self {
        Self {
            p_1: family_rows(&s.p, DEVIATION),
            p_2: family_rows(&s.p, MEAN),
            theta_1: family_rows(&s.theta, DEVIATION),
            theta_2: family_rows(&s.theta, MEAN),
            residuals: s.residuals.clone(),
            max_residual: s.max_residual(),
            horizon_used: s.horizon_used,
            dt: s.dt,
            diffusion_weight: s.weight,
            certificate: (&s.certificate).into(),
        }
    }
}

#[derive(Serialize)]
struct CheckReport {
    n: usize,
    m: usize,
    m0: usize,
    forcing_class: ForcingClass,
    assumptions: AssumptionReport,
    /// Certificate for zero gains, when the uncontrolled system is stable.
    open_loop_certificate: Option<CertificateReport>,
    /// Stationary solution, whose gains are certified as a stabilizer.
    stationary: Option<StationaryReport>,
    stationary_error: Option<String>,
    stabilizer_certified: bool,
}

fn check(model: &DecomposedModel, settings: &Settings) -> Result<(Vec<Artifact>, Option<CliError>), CliError> {
    let forcing_class = classify_forcing(model.signals()).map_err(core)?;
    let assumptions = assumption_report(model);
    let (_, open_loop) = check_stabilizer(model, &zero_gains(model));
    let mut verdict = None;
    let (stationary, stationary_error) = if assumptions.passed {
        match solve_are_with(model, &settings.are_options()) {
            Ok(s) => (Some(s), None),
            Err(e) => {
                let msg = e.to_string();
                verdict = Some(core(e));
                (None, Some(msg))
            }
        }
    } else {
        let worst = assumptions
            .margins
            .iter()
            .min_by(|a, b| a.margin.total_cmp(&b.margin))
            .expect("at least one regime");
        verdict = Some(core(mflq::model::ModelError::AssumptionViolated {
            regime: worst.regime,
            k: worst.k,
            margin: worst.margin,
        }));
        (None, Some("skipped: definiteness assumption fails".into()))
    };
    let report = CheckReport {
        n: model.n(),
        m: model.m(),
        m0: model.m0(),
        forcing_class,
        assumptions,
        open_loop_certificate: open_loop.as_ref().map(Into::into),
        stabilizer_certified: stationary.is_some(),
        stationary: stationary.as_ref().map(Into::into),
        stationary_error,
    };
    Ok((vec![Artifact::json(".json", &report)?], verdict))
}

#[derive(Serialize)]
struct RiccatiSummary {
    horizon: f64,
    dt: f64,
    substeps: usize,
    nodes: usize,
    diffusion_weight: DiffusionWeight,
    /// Smallest eigenvalue of `R_k + D_kᵀP₁D_k` over the grid.
    min_rhat_eigenvalue: f64,
    p_1_at_zero: Vec<Vec<Vec<f64>>>,
    p_2_at_zero: Vec<Vec<Vec<f64>>>,
}

fn riccati(model: &DecomposedModel, s: &Settings) -> Result<Vec<Artifact>, CliError> {
    let sol = integrate_riccati_with(model, s.horizon, s.dt, &s.riccati_options()).map_err(core)?;
    let min_rhat = (0..sol.node_count())
        .flat_map(|j| sol.rhat_min_eigenvalue(j).iter().flatten().copied().collect::<Vec<_>>())
        .fold(f64::INFINITY, f64::min);
    let p0: &RegimeFamily = sol.p(0);
    let summary = RiccatiSummary {
        horizon: sol.horizon(),
        dt: sol.dt(),
        substeps: sol.substeps(),
        nodes: sol.node_count(),
        diffusion_weight: sol.weight(),
        min_rhat_eigenvalue: min_rhat,
        p_1_at_zero: family_rows(p0, DEVIATION),
        p_2_at_zero: family_rows(p0, MEAN),
    };
    Ok(vec![
        Artifact::csv(".p.csv", sol.p_csv())?,
        Artifact::csv(".theta.csv", sol.theta_csv())?,
        Artifact::json(".json", &summary)?,
    ])
}

fn are(model: &DecomposedModel, s: &Settings) -> Result<Vec<Artifact>, CliError> {
    let stat = solve_are_with(model, &s.are_options()).map_err(core)?;
    Ok(vec![Artifact::json(".json", &StationaryReport::from(&stat))?])
}

#[derive(Serialize)]
struct FeedforwardSummary {
    horizon: f64,
    dt: f64,
    forcing_class: ForcingClass,
    identically_zero: bool,
    max_abs: f64,
}

fn feedforward(model: &DecomposedModel, s: &Settings) -> Result<Vec<Artifact>, CliError> {
    let ric = integrate_riccati_with(model, s.horizon, s.dt, &s.riccati_options()).map_err(core)?;
    let ff = integrate_eta(model, &ric).map_err(core)?;
    let summary = FeedforwardSummary {
        horizon: ff.horizon(),
        dt: ff.dt(),
        forcing_class: classify_forcing(model.signals()).map_err(core)?,
        identically_zero: ff.is_zero(),
        max_abs: ff.max_abs(),
    };
    Ok(vec![Artifact::csv(".csv", ff.to_csv())?, Artifact::json(".json", &summary)?])
}

#[derive(Serialize)]
struct SimulationSummary {
    n_paths: usize,
    master_seed: u64,
    dt: f64,
    horizon: f64,
    x0: Vec<f64>,
    initial_regime: usize,
    cost: Estimate,
    /// `⟨P₁x₁, x₁⟩ + ⟨P₂x₂, x₂⟩` at the start; the optimal cost when forcing is zero.
    quadratic_value: f64,
    moments: Vec<MomentPoint>,
}

/// Grid-aligned checkpoints `0 = t₀ < … < t_k = T`.
fn grid_checkpoints(horizon: f64, dt: f64, count: usize) -> Vec<f64> {
    let steps = (horizon / dt).round() as usize;
    let mut nodes: Vec<usize> = (0..=count).map(|j| (j * steps + count / 2) / count.max(1)).collect();
    nodes.dedup();
    nodes.into_iter().map(|j| j as f64 * dt).collect()
}

fn simulate(scenario: &Scenario, model: &DecomposedModel, s: &Settings) -> Result<Vec<Artifact>, CliError> {
    let ric = integrate_riccati_with(model, s.horizon, s.dt, &s.riccati_options()).map_err(core)?;
    let ff = integrate_eta(model, &ric).map_err(core)?;
    let table = PolicyTable::finite(model, &ric, &ff).map_err(core)?;
    let cfg = s
        .sim_config(scenario, s.horizon)
        .with_record(RecordMode::Checkpoints(grid_checkpoints(s.horizon, s.dt, SIMULATE_CHECKPOINTS)));
    let ens = simulate_closed_loop(model, &table, &cfg).map_err(core)?;
    let i0 = cfg.initial_regime;
    // A deterministic start has no deviation component.
    let x = Vector::from_vec(cfg.x0.clone());
    let quadratic_value = x.dot(&(&ric.p(0)[i0][MEAN] * &x));
    let moments = ens.moments();
    let header = "t,x_sq,x_sq_se,x1_sq,x2_sq,cross,x_sq_integral,cost,cost_se";
    let csv = csv_table(
        header,
        moments.iter().map(|p| {
            vec![
                p.t,
                p.x_sq.mean,
                p.x_sq.std_error,
                p.x1_sq.mean,
                p.x2_sq.mean,
                p.cross.mean,
                p.x_sq_integral.mean,
                p.cost.mean,
                p.cost.std_error,
            ]
        }),
    );
    let summary = SimulationSummary {
        n_paths: cfg.n_paths,
        master_seed: cfg.master_seed,
        dt: cfg.dt,
        horizon: cfg.horizon,
        x0: cfg.x0.clone(),
        initial_regime: i0,
        cost: ens.cost(),
        quadratic_value,
        moments,
    };
    Ok(vec![Artifact::csv(".csv", csv)?, Artifact::json(".json", &summary)?])
}

fn turnpike(scenario: &Scenario, model: &DecomposedModel, s: &Settings, base: &str) -> Result<Vec<Artifact>, CliError> {
    let horizons = s.horizons.clone().unwrap_or_else(|| TURNPIKE_HORIZONS.to_vec());
    let stat = solve_are_with(model, &s.are_options()).map_err(core)?;
    let cfg = s.sim_config(scenario, horizons.iter().copied().fold(0.0, f64::max));
    let report = run_turnpike_experiment(model, &stat, &cfg, &horizons, &TurnpikeSettings::default()).map_err(core)?;
    let csv_name = format!("{base}.csv");
    Ok(vec![
        Artifact::csv(".csv", report.to_csv())?,
        Artifact::json(".json", &report)?,
        Artifact::text(".plot.py", plot_script(&csv_name)),
    ])
}

#[derive(Serialize)]
struct ErgodicReport {
    forcing_class: ForcingClass,
    n_paths: usize,
    master_seed: u64,
    dt: f64,
    /// Truncation horizon of the stationary offset.
    truncation: f64,
    points: Vec<ErgodicPoint>,
}

fn ergodic(scenario: &Scenario, model: &DecomposedModel, s: &Settings) -> Result<Vec<Artifact>, CliError> {
    let horizons = s.horizons.clone().unwrap_or_else(|| ERGODIC_HORIZONS.to_vec());
    let longest = horizons.iter().copied().fold(0.0, f64::max);
    let stat = solve_are_with(model, &s.are_options()).map_err(core)?;
    let sff = stationary_feedforward(model, &stat, longest, s.dt, OFFSET_TOL).map_err(core)?;
    let table = PolicyTable::stationary(model, &stat, &sff).map_err(core)?;
    let cfg = s.sim_config(scenario, longest);
    let points = evaluate_ergodic_cost(model, &table, &cfg, &horizons).map_err(core)?;
    let csv = csv_table(
        "T,average,average_se",
        points.iter().map(|p| vec![p.horizon, p.average.mean, p.average.std_error]),
    );
    let report = ErgodicReport {
        forcing_class: classify_forcing(model.signals()).map_err(core)?,
        n_paths: cfg.n_paths,
        master_seed: cfg.master_seed,
        dt: cfg.dt,
        truncation: sff.truncation,
        points,
    };
    Ok(vec![Artifact::csv(".csv", csv)?, Artifact::json(".json", &report)?])
}
