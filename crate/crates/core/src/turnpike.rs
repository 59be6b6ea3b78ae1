//! Finite- versus infinite-horizon experiments.
//!
//! For each horizon `T` the optimal horizon-`T` controller and the stationary
//! controller are simulated in lockstep on common random numbers from the same
//! `(x, i₀)`. The report holds
//!
//! - `Δ_X(t) = E Σ_k |X_{k,T}(t) − X_{k,∞}(t)|²`,
//! - `Δ_u(t) = E Σ_k ∫₀ᵗ e^{−(δ*/4)(t−r)} |u_{k,T}(r) − u_{k,∞}(r)|² dr`,
//!
//! and a least-squares fit of `ln Δ_X` against `T − t` on the window
//! `t ∈ [T/2, T − 2/δ*]`. The decay passes when its rate is at least
//! `RATE_SLACK · δ*/8` with `R² ≥ MIN_R_SQUARED`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::feedforward::{integrate_eta, stationary_feedforward, FeedforwardError};
use crate::model::{classify_forcing, xi, DecomposedModel, ForcingClass, ForcingSignals, ModelError};
use crate::riccati::{integrate_riccati_with, RiccatiError, RiccatiOptions, StationarySolution};
use crate::simulate::{simulate_closed_loop, simulate_coupled, PolicyTable, RecordMode, SimulationConfig, SimulationError};
use crate::stats::{fit_line, Estimate};
use crate::MEAN;

/// Factor applied to the reference rate `δ*/8` before comparison.
pub const RATE_SLACK: f64 = 0.25;
/// Minimum coefficient of determination for a passing decay fit.
pub const MIN_R_SQUARED: f64 = 0.9;
/// Largest accepted standard error relative to the gap on the fit window.
pub const MAX_RELATIVE_SE: f64 = 0.2;
/// Values are floored here before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-300;
/// Offset tolerance for the stationary feedforward.
pub const OFFSET_TOL: f64 = 1e-10;
/// Fewest checkpoints in the window for a fit.
pub const MIN_FIT_POINTS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TurnpikeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error(transparent)]
    Feedforward(#[from] FeedforwardError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error("horizon list invalid: {0}")]
    InvalidHorizons(String),
    #[error("standard error {se:e} exceeds {max}·gap ({gap:e}) at t={t} for horizon {horizon}")]
    InsufficientPaths { horizon: f64, t: f64, gap: f64, se: f64, max: f64 },
    #[error("fit is degenerate: {0}")]
    DegenerateFit(String),
    #[error("forcing class {0:?} is not integrable")]
    NotIntegrable(ForcingClass),
    #[error("last tenth of the horizon carries {fraction:.3} of ∫E|X|² (limit 0.05)")]
    TailNotConverged { fraction: f64 },
}

/// Least-squares fit `ln value ≈ log_intercept + rate·t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayFit {
    pub log_intercept: f64,
    /// Slope of the log values; negative means decay.
    pub rate: f64,
    pub r_squared: f64,
}

/// Fits `ln max(value, 1e-300)` against `ts`.
pub fn fit_exponential_decay(ts: &[f64], values: &[f64]) -> Result<DecayFit, TurnpikeError> {
    if ts.len() != values.len() || ts.len() < 4 {
        return Err(TurnpikeError::DegenerateFit(format!(
            "need at least 4 paired points, got {} times and {} values",
            ts.len(),
            values.len()
        )));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(TurnpikeError::DegenerateFit("NaN value".into()));
    }
    if values.iter().all(|&v| v <= LOG_FLOOR) {
        return Err(TurnpikeError::DegenerateFit("all values at the floor".into()));
    }
    let logs: Vec<f64> = values.iter().map(|&v| v.max(LOG_FLOOR).ln()).collect();
    let fit = fit_line(ts, &logs).ok_or_else(|| TurnpikeError::DegenerateFit("times coincide".into()))?;
    Ok(DecayFit {
        log_intercept: fit.intercept,
        rate: fit.slope,
        r_squared: fit.r_squared,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnpikeSettings {
    /// Approximate number of checkpoints per horizon.
    pub checkpoints: usize,
    /// Fit window as fractions: start at `start_fraction·T`, end at `T − end_margin/δ*`.
    pub start_fraction: f64,
    pub end_margin: f64,
    /// Refuse fits with relative standard error above this.
    pub max_relative_se: f64,
    /// Times always included among the checkpoints when within the horizon.
    pub extra_checkpoints: Vec<f64>,
}

impl Default for TurnpikeSettings {
    fn default() -> Self {
        Self {
            checkpoints: 40,
            start_fraction: 0.5,
            end_margin: 2.0,
            max_relative_se: MAX_RELATIVE_SE,
            extra_checkpoints: Vec::new(),
        }
    }
}

/// Gap curves and fit for one horizon.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HorizonGaps {
    pub horizon: f64,
    pub times: Vec<f64>,
    pub gap_x: Vec<Estimate>,
    pub gap_u: Vec<Estimate>,
    /// Forcing envelope `h(t)` at the checkpoints.
    pub envelope: Vec<f64>,
    pub window: (f64, f64),
    /// Fit of `ln Δ_X` against `T − t`; `None` when every gap is zero or the
    /// window holds fewer than [`MIN_FIT_POINTS`] checkpoints.
    pub fit: Option<DecayFit>,
    /// `−fit.rate`, the decay rate in `T − t`.
    pub decay_rate: Option<f64>,
    /// `None` when there is nothing to fit.
    pub passed: Option<bool>,
    /// Checkpoint time with the largest `Δ_X`.
    pub argmax_time: f64,
    pub cost_finite: Estimate,
    pub cost_stationary: Estimate,
}

impl HorizonGaps {
    /// `Δ_X` at a checkpoint time.
    pub fn gap_x_at(&self, t: f64) -> Option<Estimate> {
        self.times
            .iter()
            .position(|&s| (s - t).abs() <= 1e-9 * t.abs().max(1.0))
            .map(|i| self.gap_x[i])
    }

    pub fn all_zero(&self) -> bool {
        self.gap_x.iter().chain(&self.gap_u).all(|e| e.mean == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TurnpikeReport {
    pub delta_star: f64,
    /// `δ*/8`.
    pub reference_rate: f64,
    pub rate_slack: f64,
    pub forcing_class: ForcingClass,
    pub n_paths: usize,
    pub master_seed: u64,
    pub dt: f64,
    pub horizons: Vec<HorizonGaps>,
}

impl TurnpikeReport {
    pub fn horizon(&self, t: f64) -> Option<&HorizonGaps> {
        self.horizons.iter().find(|h| (h.horizon - t).abs() <= 1e-9 * t.max(1.0))
    }

    /// True when every fitted horizon passed.
    pub fn passed(&self) -> bool {
        self.horizons.iter().all(|h| h.passed != Some(false))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }

    /// CSV `T,t,gap_x,gap_x_se,gap_u,gap_u_se,envelope`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("T,t,gap_x,gap_x_se,gap_u,gap_u_se,envelope\n");
        for h in &self.horizons {
            for (i, t) in h.times.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{:.16e},{t:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                    h.horizon,
                    h.gap_x[i].mean,
                    h.gap_x[i].std_error,
                    h.gap_u[i].mean,
                    h.gap_u[i].std_error,
                    h.envelope[i]
                );
            }
        }
        out
    }
}

/// A Python script plotting `ln Δ_X` and `ln Δ_u` from the CSV of [`TurnpikeReport::to_csv`].
pub fn plot_script(csv_name: &str) -> String {
    format!(
        r#"# Plots turnpike gap curves. Usage: python3 <this file>
import csv
from collections import defaultdict

import matplotlib.pyplot as plt

rows = defaultdict(list)
with open("{csv_name}") as f:
    for r in csv.DictReader(f):
        rows[float(r["T"])].append(r)

fig, axes = plt.subplots(1, 2, figsize=(11, 4))
for horizon, rs in sorted(rows.items()):
    t = [float(r["t"]) for r in rs]
    for ax, key in zip(axes, ["gap_x", "gap_u"]):
        ax.semilogy(t, [max(float(r[key]), 1e-300) for r in rs], label=f"T={{horizon:g}}")
axes[0].set_title("state gap")
axes[1].set_title("discounted control gap")
for ax in axes:
    ax.set_xlabel("t")
    ax.legend()
fig.tight_layout()
fig.savefig("{csv_name}.png", dpi=150)
"#
    )
}

/// `h(t)` for the forcing class: zero, the `ξ`-convolution, or its supremum.
pub fn forcing_envelope(signals: &ForcingSignals, n: usize, m: usize, delta_star: f64, times: &[f64]) -> Vec<f64> {
    let class = match classify_forcing(signals) {
        Ok(c) => c,
        Err(_) => return vec![f64::NAN; times.len()],
    };
    let kappa = delta_star / 4.0;
    let t_last = times.iter().copied().fold(0.0, f64::max);
    // the kernel is below 1e-12 beyond this distance
    let reach = 28.0 / kappa;
    let conv = |t: f64| {
        let (lo, hi) = ((t - reach).max(0.0), t + reach);
        let steps = 4000usize;
        let h = (hi - lo) / steps as f64;
        let f = |r: f64| (-kappa * (t - r).abs()).exp() * xi(signals, r, n, m);
        // composite Simpson
        let mut acc = f(lo) + f(hi);
        for j in 1..steps {
            acc += if j % 2 == 1 { 4.0 } else { 2.0 } * f(lo + j as f64 * h);
        }
        acc * h / 3.0
    };
    match class {
        ForcingClass::Homogeneous => vec![0.0; times.len()],
        ForcingClass::Integrable => times.iter().map(|&t| conv(t)).collect(),
        ForcingClass::LocalIntegrable => {
            let samples = 64;
            let sup = (0..=samples)
                .map(|j| conv(t_last * j as f64 / samples as f64))
                .fold(0.0, f64::max);
            vec![sup; times.len()]
        }
    }
}

fn checkpoint_grid(horizon: f64, dt: f64, count: usize, extra: &[f64]) -> Vec<f64> {
    let steps = (horizon / dt).round() as usize;
    let stride = (steps / count.max(1)).max(1);
    let mut nodes: Vec<usize> = (0..=steps).step_by(stride).collect();
    nodes.push(steps);
    nodes.extend(extra.iter().map(|t| (t / dt).round()).filter(|&j| j >= 0.0).map(|j| j as usize));
    nodes.retain(|&j| j <= steps);
    nodes.sort_unstable();
    nodes.dedup();
    nodes.into_iter().map(|j| j as f64 * dt).collect()
}

/// Coupled experiment over each horizon in `horizons`.
///
/// `cfg` supplies the step, path count, seed and initial pair; its horizon
/// and record mode are ignored.
pub fn run_turnpike_experiment(
    model: &DecomposedModel,
    stat: &StationarySolution,
    cfg: &SimulationConfig,
    horizons: &[f64],
    settings: &TurnpikeSettings,
) -> Result<TurnpikeReport, TurnpikeError> {
    let class = classify_forcing(model.signals())?;
    if horizons.is_empty() || horizons.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return Err(TurnpikeError::InvalidHorizons("horizons must be positive and finite".into()));
    }
    let delta = stat.delta_star();
    let kappa = delta / 4.0;
    let dt = cfg.dt;
    let options = RiccatiOptions {
        weight: stat.weight,
        ..RiccatiOptions::default()
    };
    let mut out = Vec::with_capacity(horizons.len());
    for &horizon in horizons {
        let mut run = cfg.clone();
        run.horizon = horizon;
        run.record = RecordMode::CostOnly;
        run.steps()?;
        let ric = integrate_riccati_with(model, horizon, dt, &options)?;
        let ff = integrate_eta(model, &ric)?;
        let finite = PolicyTable::finite(model, &ric, &ff)?;
        let sff = stationary_feedforward(model, stat, horizon, dt, OFFSET_TOL)?;
        let stationary = PolicyTable::stationary(model, stat, &sff)?;
        let times = checkpoint_grid(horizon, dt, settings.checkpoints, &settings.extra_checkpoints);
        let coupled = simulate_coupled(model, &finite, &stationary, &run, &times, kappa)?;

        let window = (settings.start_fraction * horizon, horizon - settings.end_margin / delta);
        let in_window: Vec<usize> = (0..times.len())
            .filter(|&i| times[i] >= window.0 - 1e-12 && times[i] <= window.1 + 1e-12)
            .collect();
        let gaps_zero = coupled.gap_x.iter().all(|e| e.mean == 0.0);
        let mut fit = None;
        // A horizon shorter than the fit window has nothing to fit.
        if !gaps_zero && in_window.len() >= MIN_FIT_POINTS {
            for &i in &in_window {
                let e = coupled.gap_x[i];
                if e.std_error > settings.max_relative_se * e.mean {
                    return Err(TurnpikeError::InsufficientPaths {
                        horizon,
                        t: times[i],
                        gap: e.mean,
                        se: e.std_error,
                        max: settings.max_relative_se,
                    });
                }
            }
            let xs: Vec<f64> = in_window.iter().map(|&i| horizon - times[i]).collect();
            let ys: Vec<f64> = in_window.iter().map(|&i| coupled.gap_x[i].mean).collect();
            fit = Some(fit_exponential_decay(&xs, &ys)?);
        }
        let decay_rate = fit.map(|f| -f.rate);
        let passed = fit.map(|f| -f.rate >= RATE_SLACK * delta / 8.0 && f.r_squared >= MIN_R_SQUARED);
        let argmax = (0..times.len())
            .max_by(|&a, &b| coupled.gap_x[a].mean.total_cmp(&coupled.gap_x[b].mean))
            .map_or(0.0, |i| times[i]);
        out.push(HorizonGaps {
            horizon,
            envelope: forcing_envelope(model.signals(), model.n(), model.m(), delta, &times),
            times,
            gap_x: coupled.gap_x,
            gap_u: coupled.gap_u,
            window,
            fit,
            decay_rate,
            passed,
            argmax_time: argmax,
            cost_finite: coupled.cost_a,
            cost_stationary: coupled.cost_b,
        });
    }
    Ok(TurnpikeReport {
        delta_star: delta,
        reference_rate: delta / 8.0,
        rate_slack: RATE_SLACK,
        forcing_class: class,
        n_paths: cfg.n_paths,
        master_seed: cfg.master_seed,
        dt,
        horizons: out,
    })
}

/// One entry of a gain or feedforward changed by `delta` at every node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum PerturbationTarget {
    /// `Θ_k[row, col]`, `k` = 0 (deviation) or 1 (mean).
    Gain { k: usize, row: usize, col: usize },
    /// `v₂[row]`; `v₁` stays zero.
    Feedforward { row: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Perturbation {
    pub regime: usize,
    pub target: PerturbationTarget,
    pub delta: f64,
}

impl Perturbation {
    /// Uniform choice of regime and entry, with `±size`.
    pub fn random<R: Rng + ?Sized>(model: &DecomposedModel, size: f64, rng: &mut R) -> Self {
        let (n, m) = (model.n(), model.m());
        let regime = rng.random_range(0..model.m0());
        let gain_entries = 2 * m * n;
        let pick = rng.random_range(0..gain_entries + m);
        let target = if pick < gain_entries {
            let k = pick / (m * n);
            let rest = pick % (m * n);
            PerturbationTarget::Gain {
                k,
                row: rest / n,
                col: rest % n,
            }
        } else {
            PerturbationTarget::Feedforward {
                row: pick - gain_entries,
            }
        };
        let delta = if rng.random::<bool>() { size } else { -size };
        Self { regime, target, delta }
    }

    pub fn apply(&self, model: &DecomposedModel, table: &PolicyTable) -> Result<PolicyTable, SimulationError> {
        table.perturbed(model, |_, i, theta, v| {
            if i != self.regime {
                return;
            }
            match self.target {
                PerturbationTarget::Gain { k, row, col } => theta[k][(row, col)] += self.delta,
                PerturbationTarget::Feedforward { row } => v[MEAN][row] += self.delta,
            }
        })
    }
}

/// Paired comparison against one perturbed controller.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationTrial {
    pub perturbation: Perturbation,
    /// `J_pert − J_opt` on common random numbers.
    pub difference: Estimate,
    /// `difference ≥ −2·SE`.
    pub passed: bool,
}

/// Runs each perturbation against `table` on common random numbers.
pub fn perturbation_trials(
    model: &DecomposedModel,
    table: &PolicyTable,
    cfg: &SimulationConfig,
    perturbations: &[Perturbation],
) -> Result<Vec<PerturbationTrial>, TurnpikeError> {
    perturbations
        .iter()
        .map(|p| {
            let other = p.apply(model, table)?;
            let c = simulate_coupled(model, table, &other, cfg, &[], 0.0)?;
            let d = c.cost_difference;
            Ok(PerturbationTrial {
                perturbation: *p,
                difference: d,
                passed: d.mean >= -2.0 * d.std_error,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntegrableVerdict {
    pub horizon: f64,
    /// `E ∫₀^T |X|² dt`.
    pub total: Estimate,
    /// Share of the total from the last tenth of the horizon.
    pub tail_fraction: f64,
    pub cost: Estimate,
    pub trials: Vec<PerturbationTrial>,
    pub passed: bool,
}

/// Square-integrability and optimality checks for the stationary pair.
///
/// Simulates the stationary loop over `cfg.horizon`, requires the last tenth
/// of the horizon to carry under 5% of `E ∫|X|²`, and compares the cost with
/// five perturbed controllers (entries `±0.1`) on common random numbers.
pub fn verify_integrable_limit(
    model: &DecomposedModel,
    stat: &StationarySolution,
    cfg: &SimulationConfig,
) -> Result<IntegrableVerdict, TurnpikeError> {
    let class = classify_forcing(model.signals())?;
    if class == ForcingClass::LocalIntegrable {
        return Err(TurnpikeError::NotIntegrable(class));
    }
    let horizon = cfg.horizon;
    let steps = cfg.steps()?;
    let dt = cfg.dt;
    let sff = stationary_feedforward(model, stat, horizon, dt, OFFSET_TOL)?;
    let table = PolicyTable::stationary(model, stat, &sff)?;
    let tail_start = (steps as f64 * 0.9).floor() * dt;
    let run = cfg.clone().with_record(RecordMode::Checkpoints(vec![tail_start, horizon]));
    let ens = simulate_closed_loop(model, &table, &run)?;
    let moments = ens.moments();
    let (early, total) = (moments[0].x_sq_integral, moments[1].x_sq_integral);
    let tail_fraction = if total.mean > 0.0 {
        (total.mean - early.mean) / total.mean
    } else {
        0.0
    };
    if !(tail_fraction < 0.05) {
        return Err(TurnpikeError::TailNotConverged { fraction: tail_fraction });
    }
    let cost = ens.cost();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed ^ 0x5eed_0f_9e27);
    let perturbations: Vec<Perturbation> = (0..5).map(|_| Perturbation::random(model, 0.1, &mut rng)).collect();
    let mut plain = cfg.clone();
    plain.record = RecordMode::CostOnly;
    let trials = perturbation_trials(model, &table, &plain, &perturbations)?;
    let passed = cost.mean.is_finite() && trials.iter().all(|t| t.passed);
    Ok(IntegrableVerdict {
        horizon,
        total,
        tail_fraction,
        cost,
        trials,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::validate_generator;
    use crate::model::{decompose, RawCoefficients, RegimeCoefficients, Signal};
    use crate::riccati::solve_are;
    use crate::Mat;

    fn scalar(signals: ForcingSignals) -> DecomposedModel {
        let mut c = RegimeCoefficients::zeros(1, 1);
        c.a[(0, 0)] = -1.0;
        c.b[(0, 0)] = 1.0;
        c.q[(0, 0)] = 1.0;
        c.c[(0, 0)] = 0.2;
        let raw = RawCoefficients::new(1, 1, vec![c], validate_generator(&Mat::zeros(1, 1)).unwrap()).unwrap();
        decompose(&raw, &signals).unwrap()
    }

    #[test]
    fn exact_log_linear_data() {
        let ts = [1.0, 2.0, 3.0, 4.0];
        let vs: Vec<f64> = ts.iter().map(|t: &f64| (-t).exp()).collect();
        let fit = fit_exponential_decay(&ts, &vs).unwrap();
        assert!((fit.rate + 1.0).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_values_have_zero_rate() {
        let fit = fit_exponential_decay(&[0.0, 1.0, 2.0, 3.0], &[2.0; 4]).unwrap();
        assert_eq!(fit.rate, 0.0);
    }

    #[test]
    fn noisy_decay_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let ts: Vec<f64> = (0..40).map(|i| i as f64 * 0.5).collect();
        let vs: Vec<f64> = ts
            .iter()
            .map(|t| (-0.5 * t).exp() * (1.0 + 0.01 * (rng.random::<f64>() * 2.0 - 1.0)))
            .collect();
        let fit = fit_exponential_decay(&ts, &vs).unwrap();
        assert!((-0.55..=-0.45).contains(&fit.rate));
        assert!(fit.r_squared >= 0.99);
    }

    #[test]
    fn floor_only_is_degenerate() {
        assert!(matches!(
            fit_exponential_decay(&[0.0, 1.0, 2.0, 3.0], &[0.0; 4]),
            Err(TurnpikeError::DegenerateFit(_))
        ));
        assert!(matches!(
            fit_exponential_decay(&[0.0, 1.0, 2.0], &[1.0; 3]),
            Err(TurnpikeError::DegenerateFit(_))
        ));
    }

    #[test]
    fn zero_state_gives_zero_gaps() {
        let m = scalar(ForcingSignals::homogeneous());
        let stat = solve_are(&m, 1e-12).unwrap();
        let cfg = SimulationConfig::new(0.01, 1.0, 50, 1, vec![0.0], 0);
        let rep = run_turnpike_experiment(&m, &stat, &cfg, &[4.0], &TurnpikeSettings::default()).unwrap();
        let h = rep.horizon(4.0).unwrap();
        assert!(h.all_zero());
        assert!(h.fit.is_none() && h.passed.is_none());
        assert!(rep.passed());
    }

    #[test]
    fn homogeneous_decay_and_terminal_growth() {
        let m = scalar(ForcingSignals::homogeneous());
        let stat = solve_are(&m, 1e-12).unwrap();
        let cfg = SimulationConfig::new(0.01, 1.0, 400, 3, vec![1.0], 0);
        let settings = TurnpikeSettings {
            extra_checkpoints: vec![2.0],
            ..TurnpikeSettings::default()
        };
        let rep = run_turnpike_experiment(&m, &stat, &cfg, &[6.0, 10.0], &settings).unwrap();
        let long = rep.horizon(10.0).unwrap();
        assert_eq!(long.passed, Some(true), "{:?}", long.fit);
        assert!(long.argmax_time >= 0.75 * 10.0);
        let (a, b) = (long.gap_x_at(2.0).unwrap(), rep.horizon(6.0).unwrap().gap_x_at(2.0).unwrap());
        assert!(a.mean < b.mean);
        assert!(long.gap_x.iter().chain(&long.gap_u).all(|e| e.mean >= 0.0));
    }

    #[test]
    fn integrable_limit_refuses_periodic_forcing() {
        let mut s = ForcingSignals::homogeneous();
        s.q = Signal::Sinusoid {
            amplitude: vec![1.0],
            omega: 1.0,
            phase: 0.0,
        }
        .into();
        let m = scalar(s);
        let stat = solve_are(&m, 1e-12).unwrap();
        let cfg = SimulationConfig::new(0.01, 10.0, 10, 1, vec![1.0], 0);
        assert!(matches!(
            verify_integrable_limit(&m, &stat, &cfg),
            Err(TurnpikeError::NotIntegrable(ForcingClass::LocalIntegrable))
        ));
    }

    #[test]
    fn integrable_limit_with_decaying_forcing() {
        let mut s = ForcingSignals::homogeneous();
        s.b = Signal::ExpDecay { v0: vec![1.0], rate: 0.5 }.into();
        let m = scalar(s);
        let stat = solve_are(&m, 1e-12).unwrap();
        let cfg = SimulationConfig::new(0.01, 30.0, 400, 2, vec![1.0], 0);
        let v = verify_integrable_limit(&m, &stat, &cfg).unwrap();
        assert!(v.passed, "{v:?}");
        assert!(v.tail_fraction < 0.05);
    }

    #[test]
    fn envelope_by_class() {
        let n = 1;
        assert_eq!(forcing_envelope(&ForcingSignals::homogeneous(), n, 1, 1.0, &[0.0, 1.0]), vec![0.0, 0.0]);
        let mut s = ForcingSignals::homogeneous();
        s.b = Signal::ExpDecay { v0: vec![1.0], rate: 1.0 }.into();
        let h = forcing_envelope(&s, n, 1, 4.0, &[0.0, 5.0]);
        // ∫₀^∞ e^{−|t−r|} e^{−2r} dr at t = 0 is 1/3
        assert!((h[0] - 1.0 / 3.0).abs() < 1e-6, "{h:?}");
        assert!(h[1] < h[0]);
    }
}
