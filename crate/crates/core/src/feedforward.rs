//! Offsets `η` and feedforward controls `v` induced by the forcing.
//!
//! With deterministic, regime-indexed forcing the offset of the deviation
//! channel vanishes (`η₁ = 0`, hence `v₁ = 0`) and only the mean channel needs
//! a backward sweep. In backward time `τ = T − t`, for every regime `i`,
//!
//! ```text
//! dη₂/dτ = Σ_j λ_ij η₂(j) + (A₂ + B₂Θ₂)ᵀη₂ + φ₂,       η₂(T) = 0,
//! φ₂     = P₂b + (C₂ + D₂Θ₂)ᵀP₁σ + ½q₂ + ½Θ₂ᵀr₂,
//! v₂     = −(R₂ + D₂ᵀP₁D₂)⁻¹(B₂ᵀη₂ + D₂ᵀP₁σ + ½r₂).
//! ```
//!
//! The halves come from the linear cost terms `⟨q, X⟩ + ⟨r, u⟩` entering the
//! cost without a factor 2. The forcing is read from the model
//! ([`DecomposedModel::signals`]); use [`DecomposedModel::with_signals`] to
//! swap it.

use std::fmt::Write as _;

use thiserror::Error;

use crate::linalg::spd_solve;
use crate::model::{classify_forcing, xi, DecomposedModel, ForcingClass, ModelError};
use crate::riccati::{grid_steps, RegimeFamily, RiccatiError, RiccatiField, RiccatiSolution, StationarySolution};
use crate::stability::RegimeGains;
use crate::{Mat, Vector, DEVIATION, MEAN};

/// Doublings of the truncation horizon tried by [`stationary_feedforward`].
pub const TRUNCATION_BUDGET: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeedforwardError {
    #[error("grids do not align: {0}")]
    GridMismatch(String),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("truncation did not settle below {tol:e} by horizon {horizon} (last change {change:e})")]
    ToleranceUnreachable { tol: f64, horizon: f64, change: f64 },
}

/// `η₂[node][regime]` and `v[node][regime][k]` on the grid `t_j = j·dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedforwardSolution {
    horizon: f64,
    dt: f64,
    eta: Vec<Vec<Vector>>,
    v: Vec<Vec<[Vector; 2]>>,
}

impl FeedforwardSolution {
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn node_count(&self) -> usize {
        self.eta.len()
    }

    pub fn time(&self, node: usize) -> f64 {
        node as f64 * self.dt
    }

    /// Mean-channel offset `η₂(t_node, regime)`.
    pub fn eta(&self, node: usize, regime: usize) -> &Vector {
        &self.eta[node][regime]
    }

    /// Feedforward `v_k(t_node, regime)` with `k` = [`DEVIATION`] or [`MEAN`].
    pub fn v(&self, node: usize, regime: usize, k: usize) -> &Vector {
        &self.v[node][regime][k]
    }

    /// True when every stored offset and control is exactly zero.
    pub fn is_zero(&self) -> bool {
        self.eta.iter().flatten().all(|e| e.iter().all(|&x| x == 0.0))
            && self.v.iter().flatten().flatten().all(|e| e.iter().all(|&x| x == 0.0))
    }

    /// Largest absolute entry of `η₂` and `v` over the grid.
    pub fn max_abs(&self) -> f64 {
        let eta = self.eta.iter().flatten().flat_map(|e| e.iter());
        let v = self.v.iter().flatten().flatten().flat_map(|e| e.iter());
        eta.chain(v).fold(0.0, |a, &x| a.max(x.abs()))
    }

    /// Largest entry of `|scale·self − other|` over `η₂` and `v`.
    pub fn max_abs_diff(&self, other: &Self, scale: f64) -> f64 {
        let eta = self
            .eta
            .iter()
            .flatten()
            .zip(other.eta.iter().flatten())
            .map(|(a, b)| (a * scale - b).amax());
        let v = self
            .v
            .iter()
            .flatten()
            .flatten()
            .zip(other.v.iter().flatten().flatten())
            .map(|(a, b)| (a * scale - b).amax());
        eta.chain(v).fold(0.0, f64::max)
    }

    /// CSV `t,regime,component,value`; components are `eta2[r]`, `v1[r]`, `v2[r]`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,regime,component,value\n");
        for j in 0..self.node_count() {
            let t = self.time(j);
            for (i, eta) in self.eta[j].iter().enumerate() {
                for (r, x) in eta.iter().enumerate() {
                    let _ = writeln!(out, "{t:.16e},{i},eta2[{r}],{x:.16e}");
                }
                for (label, k) in [("v1", DEVIATION), ("v2", MEAN)] {
                    for (r, x) in self.v[j][i][k].iter().enumerate() {
                        let _ = writeln!(out, "{t:.16e},{i},{label}[{r}],{x:.16e}");
                    }
                }
            }
        }
        out
    }
}

/// `Σ_j λ_ij η(j)`.
fn couple(model: &DecomposedModel, eta: &[Vector], i: usize) -> Vector {
    let gen = model.generator();
    let mut out = Vector::zeros(model.n());
    for (j, e) in eta.iter().enumerate() {
        let rate = gen.rate(i, j);
        if rate != 0.0 {
            out.axpy(rate, e, 1.0);
        }
    }
    out
}

/// `φ₂(t, i)` for given `P` and mean-channel gain.
fn source(model: &DecomposedModel, p: &RegimeFamily, theta2: &Mat, t: f64, i: usize) -> Vector {
    let sub = model.sub(i, MEAN);
    let b = model.b_k(MEAN, t, i);
    let sigma = model.sigma(t, i);
    let ccl = &sub.c + &sub.d * theta2;
    &p[i][MEAN] * b
        + ccl.transpose() * (&p[i][DEVIATION] * sigma)
        + model.q_k(MEAN, t, i) * 0.5
        + theta2.transpose() * model.r_k(MEAN, t, i) * 0.5
}

/// `v₂(t, i)`; `v₁` is identically zero.
fn mean_control(model: &DecomposedModel, p: &RegimeFamily, eta: &Vector, t: f64, i: usize) -> Vector {
    let sub = model.sub(i, MEAN);
    let p1 = &p[i][DEVIATION];
    let rhat = &sub.r + sub.d.transpose() * p1 * &sub.d;
    let rhs = sub.b.transpose() * eta
        + sub.d.transpose() * (p1 * model.sigma(t, i))
        + model.r_k(MEAN, t, i) * 0.5;
    let rhs = Mat::from_column_slice(rhs.len(), 1, rhs.as_slice());
    // R̂ was checked positive definite while the Riccati solution was built.
    let sol = spd_solve(&rhat, &rhs).expect("R + DᵀP₁D is positive definite along a Riccati solution");
    -Vector::from_column_slice(sol.as_slice())
}

/// Backward sweep of the offset system along a finite-horizon Riccati solution.
///
/// The sweep repeats the Riccati RK4 step sequence and uses its stage values,
/// so `P` and `η₂` are advanced as one joint RK4 system.
pub fn integrate_eta(model: &DecomposedModel, ric: &RiccatiSolution) -> Result<FeedforwardSolution, FeedforwardError> {
    let nodes = ric.node_count();
    let m0 = model.m0();
    let n = model.n();
    if ric.p(0).len() != m0 || ric.p(0)[0][0].nrows() != n {
        return Err(FeedforwardError::GridMismatch("Riccati solution belongs to another model".into()));
    }
    let dt = ric.dt();
    let zero = vec![Vector::zeros(n); m0];
    let mut eta = vec![zero.clone(); nodes];
    if !model.is_homogeneous() {
        let field = RiccatiField::new(model, ric.weight());
        let h = dt / ric.substeps() as f64;
        for j in (0..nodes - 1).rev() {
            let mut p = ric.p(j + 1).clone();
            let mut e = eta[j + 1].clone();
            for s in 0..ric.substeps() {
                let t = (j + 1) as f64 * dt - s as f64 * h;
                let (next, stages) = field.rk4_stages(&p, h, t)?;
                let times = [t, t - h / 2.0, t - h / 2.0, t - h];
                let weights = [h / 2.0, h / 2.0, h, 0.0];
                let mut incr = vec![Vector::zeros(n); m0];
                let mut arg = e.clone();
                for (l, stage) in stages.iter().enumerate() {
                    let (theta, _) = field.gains(stage, times[l])?;
                    let k = eta_field(model, stage, &theta, &arg, times[l]);
                    let w = if l == 0 || l == 3 { 1.0 } else { 2.0 };
                    for i in 0..m0 {
                        incr[i].axpy(w, &k[i], 1.0);
                    }
                    if l < 3 {
                        arg = e.iter().zip(&k).map(|(x, dx)| x + dx * weights[l]).collect();
                    }
                }
                for i in 0..m0 {
                    e[i].axpy(h / 6.0, &incr[i], 1.0);
                }
                p = next;
            }
            eta[j] = e;
        }
    }
    let v = feedforward_controls(model, ric, &eta)?;
    Ok(FeedforwardSolution {
        horizon: ric.horizon(),
        dt,
        eta,
        v,
    })
}

fn eta_field(model: &DecomposedModel, p: &RegimeFamily, theta: &RegimeGains, eta: &[Vector], t: f64) -> Vec<Vector> {
    (0..model.m0())
        .map(|i| {
            let sub = model.sub(i, MEAN);
            let acl = &sub.a + &sub.b * &theta[i][MEAN];
            couple(model, eta, i) + acl.transpose() * &eta[i] + source(model, p, &theta[i][MEAN], t, i)
        })
        .collect()
}

/// `v[node][regime][k]` from the offsets; `v₁ = 0`.
pub fn feedforward_controls(
    model: &DecomposedModel,
    ric: &RiccatiSolution,
    eta: &[Vec<Vector>],
) -> Result<Vec<Vec<[Vector; 2]>>, FeedforwardError> {
    if eta.len() != ric.node_count() {
        return Err(FeedforwardError::GridMismatch(format!(
            "{} offset nodes for {} Riccati nodes",
            eta.len(),
            ric.node_count()
        )));
    }
    let m = model.m();
    let homogeneous = model.is_homogeneous();
    Ok(eta
        .iter()
        .enumerate()
        .map(|(j, row)| {
            row.iter()
                .enumerate()
                .map(|(i, e)| {
                    let v2 = if homogeneous {
                        Vector::zeros(m)
                    } else {
                        mean_control(model, ric.p(j), e, ric.time(j), i)
                    };
                    [Vector::zeros(m), v2]
                })
                .collect()
        })
        .collect())
}

/// Offsets of the infinite-horizon problem on `t_j = j·dt`, `t_j ≤ t_end`.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryFeedforward {
    pub solution: FeedforwardSolution,
    /// Truncation horizon actually used.
    pub truncation: f64,
    /// Change observed when the truncation horizon was last doubled.
    pub truncation_change: f64,
}

/// Infinite-horizon offsets by truncation with the stationary gains.
///
/// Starts from `T_max = t_end + (8/δ*)·ln(C/tol)`, with `C` the forcing
/// scale, and doubles it until the values on the grid move by less than `tol`.
pub fn stationary_feedforward(
    model: &DecomposedModel,
    stat: &StationarySolution,
    t_end: f64,
    dt: f64,
    tol: f64,
) -> Result<StationaryFeedforward, FeedforwardError> {
    let class = classify_forcing(model.signals())?;
    let steps = grid_steps(t_end, dt).ok_or(RiccatiError::InvalidGrid { horizon: t_end, dt })?;
    let m0 = model.m0();
    let (n, m) = (model.n(), model.m());
    if class == ForcingClass::Homogeneous {
        let solution = FeedforwardSolution {
            horizon: t_end,
            dt,
            eta: vec![vec![Vector::zeros(n); m0]; steps + 1],
            v: vec![vec![[Vector::zeros(m), Vector::zeros(m)]; m0]; steps + 1],
        };
        return Ok(StationaryFeedforward {
            solution,
            truncation: t_end,
            truncation_change: 0.0,
        });
    }
    let scale = (0..=steps)
        .step_by((steps / 64).max(1))
        .map(|j| xi(model.signals(), j as f64 * dt, n, m))
        .fold(1.0, f64::max)
        .sqrt();
    let delta = stat.delta_star();
    let extra = (8.0 / delta) * (scale / tol).ln().max(1.0);
    let mut extra_steps = (extra / dt).ceil() as usize;
    let mut current = truncated_sweep(model, stat, dt, steps, extra_steps);
    let mut change = f64::INFINITY;
    for _ in 0..TRUNCATION_BUDGET {
        extra_steps *= 2;
        let longer = truncated_sweep(model, stat, dt, steps, extra_steps);
        change = current
            .iter()
            .flatten()
            .zip(longer.iter().flatten())
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max);
        current = longer;
        if change < tol {
            break;
        }
    }
    let truncation = t_end + extra_steps as f64 * dt;
    if !(change < tol) {
        return Err(FeedforwardError::ToleranceUnreachable {
            tol,
            horizon: truncation,
            change,
        });
    }
    let v = current
        .iter()
        .enumerate()
        .map(|(j, row)| {
            row.iter()
                .enumerate()
                .map(|(i, e)| [Vector::zeros(m), mean_control(model, &stat.p, e, j as f64 * dt, i)])
                .collect()
        })
        .collect();
    Ok(StationaryFeedforward {
        solution: FeedforwardSolution {
            horizon: t_end,
            dt,
            eta: current,
            v,
        },
        truncation,
        truncation_change: change,
    })
}

/// RK4 sweep of the frozen-gain offset system from `(steps + extra)·dt` down to 0,
/// keeping the first `steps + 1` nodes.
fn truncated_sweep(
    model: &DecomposedModel,
    stat: &StationarySolution,
    dt: f64,
    steps: usize,
    extra: usize,
) -> Vec<Vec<Vector>> {
    let m0 = model.m0();
    let total = steps + extra;
    let mut e = vec![Vector::zeros(model.n()); m0];
    let mut kept = vec![Vec::new(); steps + 1];
    for j in (0..total).rev() {
        let t = (j + 1) as f64 * dt;
        let f = |arg: &[Vector], t: f64| eta_field(model, &stat.p, &stat.theta, arg, t);
        let k1 = f(&e, t);
        let a2: Vec<Vector> = e.iter().zip(&k1).map(|(x, d)| x + d * (dt / 2.0)).collect();
        let k2 = f(&a2, t - dt / 2.0);
        let a3: Vec<Vector> = e.iter().zip(&k2).map(|(x, d)| x + d * (dt / 2.0)).collect();
        let k3 = f(&a3, t - dt / 2.0);
        let a4: Vec<Vector> = e.iter().zip(&k3).map(|(x, d)| x + d * dt).collect();
        let k4 = f(&a4, t - dt);
        for i in 0..m0 {
            let incr = &k1[i] + (&k2[i] + &k3[i]) * 2.0 + &k4[i];
            e[i].axpy(dt / 6.0, &incr, 1.0);
        }
        if j <= steps {
            kept[j] = e.clone();
        }
    }
    if steps == total {
        kept[steps] = vec![Vector::zeros(model.n()); m0];
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::validate_generator;
    use crate::model::{decompose, ForcingSignals, RawCoefficients, RegimeCoefficients, Signal};
    use crate::riccati::{integrate_riccati, solve_are};

    fn scalar(signals: ForcingSignals, d: f64) -> DecomposedModel {
        let mut c = RegimeCoefficients::zeros(1, 1);
        c.a[(0, 0)] = -1.0;
        c.b[(0, 0)] = 1.0;
        c.q[(0, 0)] = 1.0;
        c.d[(0, 0)] = d;
        let raw = RawCoefficients::new(1, 1, vec![c], validate_generator(&Mat::zeros(1, 1)).unwrap()).unwrap();
        decompose(&raw, &signals).unwrap()
    }

    fn constant_b() -> ForcingSignals {
        let mut s = ForcingSignals::homogeneous();
        s.b = Signal::Constant { value: vec![1.0] }.into();
        s
    }

    #[test]
    fn homogeneous_is_exactly_zero() {
        let m = scalar(ForcingSignals::homogeneous(), 0.0);
        let ric = integrate_riccati(&m, 5.0, 0.01).unwrap();
        let ff = integrate_eta(&m, &ric).unwrap();
        assert!(ff.is_zero());
    }

    #[test]
    fn terminal_offset_is_zero() {
        let m = scalar(constant_b(), 0.0);
        let ric = integrate_riccati(&m, 5.0, 0.01).unwrap();
        let ff = integrate_eta(&m, &ric).unwrap();
        let last = ff.node_count() - 1;
        assert_eq!(ff.eta(last, 0)[0], 0.0);
        assert!(ff.eta(0, 0)[0] != 0.0);
    }

    #[test]
    fn constant_b_plateau() {
        // P∞ = √2 − 1, θ∞ = 1 − √2, a + bθ = −√2: η̄ = P∞·1 / √2.
        let m = scalar(constant_b(), 0.0);
        let ric = integrate_riccati(&m, 20.0, 0.01).unwrap();
        let ff = integrate_eta(&m, &ric).unwrap();
        let p = 2f64.sqrt() - 1.0;
        let plateau = p / 2f64.sqrt();
        assert!((ff.eta(0, 0)[0] - plateau).abs() < 1e-6);
        // v₂ = −(bη) / r
        assert!((ff.v(0, 0, MEAN)[0] + plateau).abs() < 1e-6);
        assert_eq!(ff.v(0, 0, DEVIATION)[0], 0.0);
    }

    #[test]
    fn deviation_feedforward_vanishes_with_noise_and_control_diffusion() {
        let mut s = ForcingSignals::homogeneous();
        s.sigma = Signal::Constant { value: vec![1.0] }.into();
        let m = scalar(s, 1.0);
        let ric = integrate_riccati(&m, 10.0, 0.01).unwrap();
        let ff = integrate_eta(&m, &ric).unwrap();
        for j in 0..ff.node_count() {
            assert_eq!(ff.v(j, 0, DEVIATION)[0], 0.0);
        }
        // the mean channel sees D₂ᵀP₁σ
        assert!(ff.v(0, 0, MEAN)[0] != 0.0);
    }

    #[test]
    fn linear_in_forcing() {
        let m = scalar(constant_b(), 0.3);
        let ric = integrate_riccati(&m, 4.0, 0.01).unwrap();
        let base = integrate_eta(&m, &ric).unwrap();
        let scaled = integrate_eta(&m.with_signals(m.signals().scaled(3.0)).unwrap(), &ric).unwrap();
        assert!(base.max_abs_diff(&scaled, 3.0) <= 1e-12 * scaled.max_abs());
    }

    #[test]
    fn stationary_plateau_is_uniform() {
        let m = scalar(constant_b(), 0.0);
        let stat = solve_are(&m, 1e-12).unwrap();
        let sf = stationary_feedforward(&m, &stat, 5.0, 0.01, 1e-10).unwrap();
        let plateau = (2f64.sqrt() - 1.0) / 2f64.sqrt();
        for j in 0..sf.solution.node_count() {
            assert!((sf.solution.eta(j, 0)[0] - plateau).abs() < 1e-8);
        }
    }

    #[test]
    fn stationary_homogeneous_is_zero() {
        let m = scalar(ForcingSignals::homogeneous(), 0.0);
        let stat = solve_are(&m, 1e-12).unwrap();
        let sf = stationary_feedforward(&m, &stat, 2.0, 0.01, 1e-10).unwrap();
        assert!(sf.solution.is_zero());
    }

    #[test]
    fn csv_rows() {
        let m = scalar(constant_b(), 0.0);
        let ric = integrate_riccati(&m, 0.02, 0.01).unwrap();
        let csv = integrate_eta(&m, &ric).unwrap().to_csv();
        assert!(csv.starts_with("t,regime,component,value\n"));
        assert_eq!(csv.lines().count(), 1 + 3 * 3);
    }
}
