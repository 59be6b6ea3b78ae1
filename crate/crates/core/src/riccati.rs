//! Coupled Riccati system for the two subsystems.
//!
//! For `k ∈ {1, 2}` and every regime `i`, with `P₁` the deviation solution,
//!
//! ```text
//! Ṗ_k + Λ[P_k] + P_kA_k + A_kᵀP_k + C_kᵀ W C_k + Q_k
//!     − (P_kB_k + C_kᵀP₁D_k + S_kᵀ) (R_k + D_kᵀP₁D_k)⁻¹ (B_kᵀP_k + D_kᵀP₁C_k + S_k) = 0,
//! P_k(T) = 0,
//! ```
//!
//! where the diffusion weight `W` is `P₁` by default ([`DiffusionWeight::P1`])
//! or `P_k` ([`DiffusionWeight::Pk`]). The optimal feedback is
//! `Θ_k = −(R_k + D_kᵀP₁D_k)⁻¹(B_kᵀP_k + D_kᵀP₁C_k + S_k)`.
//!
//! The system is autonomous, so it is integrated in backward time `τ = T − t`
//! with classical RK4 and the result is stored on the forward grid.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{frobenius, max_abs, min_eigenvalue, spd_solve, symmetrize, to_rows};
use crate::markov::lambda_apply;
use crate::model::DecomposedModel;
use crate::stability::{solve_coupled_lyapunov, LyapunovCertificate, RegimeGains, StabilityError};
use crate::stats::{fit_line, LineFit};
use crate::{Mat, DEVIATION, MEAN};

/// Minimum eigenvalue accepted for `R_k + D_kᵀP₁D_k`.
pub const WELL_POSED_TOL: f64 = 1e-10;
/// Largest dt vs dt/2 discrepancy accepted by [`integrate_riccati`].
pub const HALVING_TOL: f64 = 1e-6;
/// Algebraic residual bound for the stationary solution.
pub const ARE_RESIDUAL_TOL: f64 = 1e-8;
/// Default stationarity tolerance (change of `P` per unit backward time).
pub const DEFAULT_ARE_TOL: f64 = 1e-10;
/// Eigenvalue slack for the Loewner monotonicity checks.
pub const MONOTONE_TOL: f64 = 1e-9;

/// `P[regime][k]`.
pub type RegimeFamily = Vec<[Mat; 2]>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DiffusionWeight {
    /// `C_kᵀP₁C_k` in both equations.
    #[default]
    #[serde(alias = "p1")]
    P1,
    /// `C_kᵀP_kC_k`, the literal alternative.
    #[serde(alias = "pk")]
    Pk,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiccatiError {
    #[error("invalid grid: horizon {horizon}, step {dt}")]
    InvalidGrid { horizon: f64, dt: f64 },
    #[error("R_k + D_kᵀP₁D_k lost definiteness at t={t} (regime {regime}, k={k}, min eigenvalue {min_eigenvalue:e})")]
    WellPosednessLost {
        t: f64,
        regime: usize,
        k: usize,
        min_eigenvalue: f64,
    },
    #[error("step halving did not settle within {budget} refinements (last discrepancy {discrepancy:e})")]
    StepTooLarge { budget: usize, discrepancy: f64 },
    #[error("no stationary limit within backward horizon {horizon}: {reason}")]
    NoConvergence { horizon: f64, reason: String },
    #[error("stationary gains failed the stabilizer check: {0}")]
    StabilizerCheckFailed(StabilityError),
    #[error("horizon list invalid: {0}")]
    HorizonList(String),
    #[error("monotonicity violated at horizon {horizon}: {detail}")]
    MonotonicityViolation { horizon: f64, detail: String },
    #[error("grids do not align: {0}")]
    GridMismatch(String),
}

/// Right-hand side of the backward-time system `dP/dτ = G(P)`.
#[derive(Clone, Copy)]
pub(crate) struct RiccatiField<'a> {
    pub model: &'a DecomposedModel,
    pub weight: DiffusionWeight,
}

impl<'a> RiccatiField<'a> {
    pub fn new(model: &'a DecomposedModel, weight: DiffusionWeight) -> Self {
        Self { model, weight }
    }

    /// `(R̂_k, L_k)` with `R̂_k = R_k + D_kᵀP₁D_k`, `L_k = B_kᵀP_k + D_kᵀP₁C_k + S_k`.
    fn blocks(&self, p: &RegimeFamily, i: usize, k: usize) -> (Mat, Mat) {
        let sub = self.model.sub(i, k);
        let p1 = &p[i][DEVIATION];
        let dt_p1 = sub.d.transpose() * p1;
        let rhat = &sub.r + &dt_p1 * &sub.d;
        let l = sub.b.transpose() * &p[i][k] + &dt_p1 * &sub.c + &sub.s;
        (rhat, l)
    }

    pub fn eval(&self, p: &RegimeFamily, t: f64) -> Result<RegimeFamily, RiccatiError> {
        let n = self.model.n();
        let mut out = Vec::with_capacity(p.len());
        for i in 0..self.model.m0() {
            let mut pair = [Mat::zeros(n, n), Mat::zeros(n, n)];
            for k in [DEVIATION, MEAN] {
                let sub = self.model.sub(i, k);
                let pk = &p[i][k];
                let w = match self.weight {
                    DiffusionWeight::P1 => &p[i][DEVIATION],
                    DiffusionWeight::Pk => pk,
                };
                let (rhat, l) = self.blocks(p, i, k);
                let lam = min_eigenvalue(&rhat);
                if !(lam > WELL_POSED_TOL) {
                    return Err(RiccatiError::WellPosednessLost {
                        t,
                        regime: i,
                        k: k + 1,
                        min_eigenvalue: lam,
                    });
                }
                let rinv_l = spd_solve(&rhat, &l).ok_or(RiccatiError::WellPosednessLost {
                    t,
                    regime: i,
                    k: k + 1,
                    min_eigenvalue: lam,
                })?;
                let g = lambda_apply(self.model.generator(), p.iter().map(|x| &x[k]), i, n, n)
                    + pk * &sub.a
                    + sub.a.transpose() * pk
                    + sub.c.transpose() * w * &sub.c
                    + &sub.q
                    - l.transpose() * rinv_l;
                pair[k] = g;
            }
            out.push(pair);
        }
        Ok(out)
    }

    /// Gains `Θ_k` and the minimum eigenvalue of `R̂_k` for each `(i, k)`.
    pub fn gains(&self, p: &RegimeFamily, t: f64) -> Result<(RegimeGains, Vec<[f64; 2]>), RiccatiError> {
        let mut gains = Vec::with_capacity(p.len());
        let mut eigs = Vec::with_capacity(p.len());
        for i in 0..self.model.m0() {
            let mut g = [Mat::zeros(0, 0), Mat::zeros(0, 0)];
            let mut e = [0.0; 2];
            for k in [DEVIATION, MEAN] {
                let (rhat, l) = self.blocks(p, i, k);
                let lam = min_eigenvalue(&rhat);
                let err = RiccatiError::WellPosednessLost {
                    t,
                    regime: i,
                    k: k + 1,
                    min_eigenvalue: lam,
                };
                if !(lam > WELL_POSED_TOL) {
                    return Err(err);
                }
                g[k] = -spd_solve(&rhat, &l).ok_or(err)?;
                e[k] = lam;
            }
            gains.push(g);
            eigs.push(e);
        }
        Ok((gains, eigs))
    }

    /// One classical RK4 step of length `h` in backward time, then symmetrize.
    pub fn rk4_step(&self, p: &RegimeFamily, h: f64, t: f64) -> Result<RegimeFamily, RiccatiError> {
        self.rk4_stages(p, h, t).map(|(next, _)| next)
    }

    /// As [`Self::rk4_step`], also returning the four stage arguments.
    pub fn rk4_stages(
        &self,
        p: &RegimeFamily,
        h: f64,
        t: f64,
    ) -> Result<(RegimeFamily, [RegimeFamily; 4]), RiccatiError> {
        let k1 = self.eval(p, t)?;
        let y2 = axpy(p, &k1, h / 2.0);
        let k2 = self.eval(&y2, t - h / 2.0)?;
        let y3 = axpy(p, &k2, h / 2.0);
        let k3 = self.eval(&y3, t - h / 2.0)?;
        let y4 = axpy(p, &k3, h);
        let k4 = self.eval(&y4, t - h)?;
        let next = p
            .iter()
            .enumerate()
            .map(|(i, pair)| {
                let mut next = pair.clone();
                for k in 0..2 {
                    let incr = &k1[i][k] + (&k2[i][k] + &k3[i][k]) * 2.0 + &k4[i][k];
                    next[k] = symmetrize(&(&pair[k] + incr * (h / 6.0)));
                }
                next
            })
            .collect();
        Ok((next, [p.clone(), y2, y3, y4]))
    }
}

pub(crate) fn axpy(p: &RegimeFamily, dp: &RegimeFamily, h: f64) -> RegimeFamily {
    p.iter()
        .zip(dp)
        .map(|(a, b)| [&a[0] + &b[0] * h, &a[1] + &b[1] * h])
        .collect()
}

fn zero_family(model: &DecomposedModel) -> RegimeFamily {
    let n = model.n();
    (0..model.m0()).map(|_| [Mat::zeros(n, n), Mat::zeros(n, n)]).collect()
}

fn family_max_abs_diff(a: &RegimeFamily, b: &RegimeFamily) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| (0..2).map(move |k| max_abs(&(&x[k] - &y[k]))))
        .fold(0.0, f64::max)
}

fn family_max_frobenius_diff(a: &RegimeFamily, b: &RegimeFamily) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| (0..2).map(move |k| frobenius(&(&x[k] - &y[k]))))
        .fold(0.0, f64::max)
}

/// Number of grid steps for `horizon / dt`, which must be an integer.
pub(crate) fn grid_steps(horizon: f64, dt: f64) -> Option<usize> {
    if !(horizon >= 0.0) || !(dt > 0.0) || !horizon.is_finite() {
        return None;
    }
    let steps = (horizon / dt).round();
    if (steps * dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return None;
    }
    Some(steps as usize)
}

/// Finite-horizon solution on the grid `t_j = j·dt`, `j = 0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    horizon: f64,
    dt: f64,
    substeps: usize,
    weight: DiffusionWeight,
    p: Vec<RegimeFamily>,
    theta: Vec<RegimeGains>,
    rhat_min_eigenvalue: Vec<Vec<[f64; 2]>>,
}

impl RiccatiSolution {
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// RK4 steps per grid interval.
    pub fn substeps(&self) -> usize {
        self.substeps
    }

    pub fn weight(&self) -> DiffusionWeight {
        self.weight
    }

    pub fn node_count(&self) -> usize {
        self.p.len()
    }

    pub fn time(&self, node: usize) -> f64 {
        node as f64 * self.dt
    }

    pub fn p(&self, node: usize) -> &RegimeFamily {
        &self.p[node]
    }

    pub fn theta(&self, node: usize) -> &RegimeGains {
        &self.theta[node]
    }

    /// Smallest eigenvalue of `R_k + D_kᵀP₁D_k` recorded at each node.
    pub fn rhat_min_eigenvalue(&self, node: usize) -> &[[f64; 2]] {
        &self.rhat_min_eigenvalue[node]
    }

    /// Node index for a time on the grid.
    pub fn node_of(&self, t: f64) -> Option<usize> {
        let j = (t / self.dt).round();
        if j < 0.0 || (j * self.dt - t).abs() > 1e-9 * t.abs().max(1.0) || j as usize >= self.p.len() {
            None
        } else {
            Some(j as usize)
        }
    }

    /// CSV `t,regime,k,row,col,value` for `P` (k = 1 or 2).
    pub fn p_csv(&self) -> String {
        table_csv(&self.p, self.dt)
    }

    /// CSV `t,regime,k,row,col,value` for `Θ`.
    pub fn theta_csv(&self) -> String {
        table_csv(&self.theta, self.dt)
    }
}

fn table_csv(table: &[RegimeFamily], dt: f64) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("t,regime,k,row,col,value\n");
    for (j, fam) in table.iter().enumerate() {
        let t = j as f64 * dt;
        for (i, pair) in fam.iter().enumerate() {
            for (k, m) in pair.iter().enumerate() {
                for r in 0..m.nrows() {
                    for c in 0..m.ncols() {
                        let _ = writeln!(out, "{t:.16e},{i},{},{r},{c},{:.16e}", k + 1, m[(r, c)]);
                    }
                }
            }
        }
    }
    out
}

/// Settings for [`integrate_riccati_with`].
#[derive(Debug, Clone)]
pub struct RiccatiOptions {
    pub weight: DiffusionWeight,
    /// Terminal data `P_k(T, ·)`; zero when `None`.
    pub terminal: Option<RegimeFamily>,
    /// Maximum number of substep doublings tried by the halving check.
    pub halving_budget: usize,
    /// Skip the halving comparison and use exactly `substeps` RK4 steps per interval.
    pub fixed_substeps: Option<usize>,
}

impl Default for RiccatiOptions {
    fn default() -> Self {
        Self {
            weight: DiffusionWeight::P1,
            terminal: None,
            halving_budget: 4,
            fixed_substeps: None,
        }
    }
}

/// Backward RK4 on `[0, horizon]` with step-halving control.
pub fn integrate_riccati(model: &DecomposedModel, horizon: f64, dt: f64) -> Result<RiccatiSolution, RiccatiError> {
    integrate_riccati_with(model, horizon, dt, &RiccatiOptions::default())
}

pub fn integrate_riccati_with(
    model: &DecomposedModel,
    horizon: f64,
    dt: f64,
    opts: &RiccatiOptions,
) -> Result<RiccatiSolution, RiccatiError> {
    let steps = if horizon == 0.0 && dt > 0.0 {
        0
    } else {
        grid_steps(horizon, dt).ok_or(RiccatiError::InvalidGrid { horizon, dt })?
    };
    if steps > 0 && dt > horizon {
        return Err(RiccatiError::InvalidGrid { horizon, dt });
    }
    let field = RiccatiField::new(model, opts.weight);
    let terminal = opts.terminal.clone().unwrap_or_else(|| zero_family(model));
    if let Some(s) = opts.fixed_substeps {
        return sweep(&field, &terminal, horizon, dt, steps, s.max(1));
    }
    let mut substeps = 1;
    let mut coarse = sweep(&field, &terminal, horizon, dt, steps, substeps)?;
    let mut discrepancy = 0.0;
    for _ in 0..=opts.halving_budget {
        let fine = sweep(&field, &terminal, horizon, dt, steps, substeps * 2)?;
        discrepancy = coarse
            .p
            .iter()
            .zip(&fine.p)
            .map(|(a, b)| family_max_frobenius_diff(a, b))
            .fold(0.0, f64::max);
        if discrepancy <= HALVING_TOL {
            return Ok(fine);
        }
        coarse = fine;
        substeps *= 2;
    }
    Err(RiccatiError::StepTooLarge {
        budget: opts.halving_budget,
        discrepancy,
    })
}

fn sweep(
    field: &RiccatiField<'_>,
    terminal: &RegimeFamily,
    horizon: f64,
    dt: f64,
    steps: usize,
    substeps: usize,
) -> Result<RiccatiSolution, RiccatiError> {
    let mut p = vec![terminal.clone(); steps + 1];
    let h = dt / substeps as f64;
    for j in (0..steps).rev() {
        let mut cur = p[j + 1].clone();
        for s in 0..substeps {
            let t = (j + 1) as f64 * dt - s as f64 * h;
            cur = field.rk4_step(&cur, h, t)?;
        }
        if cur.iter().flatten().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(RiccatiError::WellPosednessLost {
                t: j as f64 * dt,
                regime: 0,
                k: 0,
                min_eigenvalue: f64::NAN,
            });
        }
        p[j] = cur;
    }
    let mut theta = Vec::with_capacity(steps + 1);
    let mut eigs = Vec::with_capacity(steps + 1);
    for (j, fam) in p.iter().enumerate() {
        let (g, e) = field.gains(fam, j as f64 * dt)?;
        theta.push(g);
        eigs.push(e);
    }
    Ok(RiccatiSolution {
        horizon,
        dt,
        substeps,
        weight: field.weight,
        p,
        theta,
        rhat_min_eigenvalue: eigs,
    })
}

/// `max_{i,k} ‖P_{k,T}(t,i) − P_{k,T−t}(0,i)‖_F`.
pub fn time_shift_check(sol: &RiccatiSolution, shorter: &RiccatiSolution, t: f64) -> Result<f64, RiccatiError> {
    if sol.dt != shorter.dt || sol.substeps != shorter.substeps || sol.weight != shorter.weight {
        return Err(RiccatiError::GridMismatch(format!(
            "step {} x{} vs {} x{}",
            sol.dt, sol.substeps, shorter.dt, shorter.substeps
        )));
    }
    let node = sol
        .node_of(t)
        .ok_or_else(|| RiccatiError::GridMismatch(format!("t={t} is not a grid time")))?;
    let remaining = sol.horizon - sol.time(node);
    if (remaining - shorter.horizon).abs() > 1e-9 * sol.horizon.max(1.0) {
        return Err(RiccatiError::GridMismatch(format!(
            "shorter horizon {} but T - t = {remaining}",
            shorter.horizon
        )));
    }
    Ok(family_max_frobenius_diff(&sol.p[node], &shorter.p[0]))
}

/// Stationary solution of the algebraic system.
#[derive(Debug, Clone, PartialEq)]
pub struct StationarySolution {
    pub p: RegimeFamily,
    pub theta: RegimeGains,
    /// Frobenius norm of the algebraic residual, `[regime][k]`.
    pub residuals: Vec<[f64; 2]>,
    pub certificate: LyapunovCertificate,
    /// Backward time integrated before stationarity was reached.
    pub horizon_used: f64,
    pub dt: f64,
    pub weight: DiffusionWeight,
}

impl StationarySolution {
    pub fn delta_star(&self) -> f64 {
        self.certificate.delta_star
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().flatten().copied().fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let fam = |f: &RegimeFamily, k: usize| f.iter().map(|x| to_rows(&x[k])).collect::<Vec<_>>();
        serde_json::json!({
            "p_1": fam(&self.p, DEVIATION),
            "p_2": fam(&self.p, MEAN),
            "theta_1": fam(&self.theta, DEVIATION),
            "theta_2": fam(&self.theta, MEAN),
            "residuals": self.residuals,
            "horizon_used": self.horizon_used,
            "dt": self.dt,
            "diffusion_weight": self.weight,
            "certificate": self.certificate.to_json(),
        })
    }
}

/// Settings for [`solve_are_with`].
#[derive(Debug, Clone)]
pub struct AreOptions {
    /// Stop once `max |ΔP| / Δτ < tol`.
    pub tol: f64,
    /// Backward step; chosen from the coefficient scale when `None`.
    pub dt: Option<f64>,
    pub weight: DiffusionWeight,
    /// Cap on backward time before a decay-rate guess is available.
    pub max_horizon: f64,
}

impl Default for AreOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_ARE_TOL,
            dt: None,
            weight: DiffusionWeight::P1,
            max_horizon: 2000.0,
        }
    }
}

/// A step size from the coefficient scale.
pub fn default_are_step(model: &DecomposedModel) -> f64 {
    let mut scale: f64 = 1.0;
    for i in 0..model.m0() {
        for k in [DEVIATION, MEAN] {
            let s = model.sub(i, k);
            let rinv = min_eigenvalue(&s.r).max(1e-3).recip();
            let local = model.generator().exit_rate(i)
                + 2.0 * frobenius(&s.a)
                + frobenius(&s.c).powi(2)
                + frobenius(&s.b).powi(2) * rinv;
            scale = scale.max(local);
        }
    }
    (0.25 / scale).min(0.02)
}

/// Stationary solution by monotone long-horizon integration from `P = 0`.
pub fn solve_are(model: &DecomposedModel, tol: f64) -> Result<StationarySolution, RiccatiError> {
    solve_are_with(
        model,
        &AreOptions {
            tol,
            ..AreOptions::default()
        },
    )
}

pub fn solve_are_with(model: &DecomposedModel, opts: &AreOptions) -> Result<StationarySolution, RiccatiError> {
    let field = RiccatiField::new(model, opts.weight);
    let dt = opts.dt.unwrap_or_else(|| default_are_step(model));
    let mut p = zero_family(model);
    let mut tau = 0.0;
    let mut budget = opts.max_horizon;
    let mut have_guess = false;
    loop {
        let next = field.rk4_step(&p, dt, -tau)?;
        let change = family_max_abs_diff(&next, &p) / dt;
        p = next;
        tau += dt;
        if !change.is_finite() {
            return Err(RiccatiError::NoConvergence {
                horizon: tau,
                reason: "solution diverged".into(),
            });
        }
        if change < opts.tol {
            break;
        }
        if !have_guess && change < 1e-3 {
            let (gains, _) = field.gains(&p, -tau)?;
            if let Ok(cert) = solve_coupled_lyapunov(model, &gains) {
                budget = (50.0 / cert.delta_star).max(tau + 1.0);
                have_guess = true;
            }
        }
        if tau > budget {
            return Err(RiccatiError::NoConvergence {
                horizon: tau,
                reason: format!("change per unit time {change:e} still above {:e}", opts.tol),
            });
        }
    }
    let g = field.eval(&p, 0.0)?;
    let residuals: Vec<[f64; 2]> = g.iter().map(|x| [frobenius(&x[0]), frobenius(&x[1])]).collect();
    let worst = residuals.iter().flatten().copied().fold(0.0, f64::max);
    if worst > ARE_RESIDUAL_TOL {
        return Err(RiccatiError::NoConvergence {
            horizon: tau,
            reason: format!("algebraic residual {worst:e} exceeds {ARE_RESIDUAL_TOL:e}"),
        });
    }
    let (theta, _) = field.gains(&p, 0.0)?;
    let certificate = solve_coupled_lyapunov(model, &theta).map_err(RiccatiError::StabilizerCheckFailed)?;
    Ok(StationarySolution {
        p,
        theta,
        residuals,
        certificate,
        horizon_used: tau,
        dt,
        weight: opts.weight,
    })
}

/// Algebraic residual `max_{i,k} ‖G(P)(i,k)‖_F` of any family.
pub fn are_residual(model: &DecomposedModel, p: &RegimeFamily, weight: DiffusionWeight) -> Result<f64, RiccatiError> {
    let g = RiccatiField::new(model, weight).eval(p, 0.0)?;
    Ok(g.iter().flatten().map(frobenius).fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceEntry {
    pub horizon: f64,
    /// `max_{i,k} ‖P_{k,∞}(i) − P_{k,T}(0,i)‖_F`.
    pub p_gap: f64,
    /// `max_{i,k} ‖Θ_{k,∞}(i) − Θ_{k,T}(0,i)‖_F`.
    pub gain_gap: f64,
    /// `min_{i,k} λ_min(P_{k,∞}(i) − P_{k,T}(0,i))`.
    pub domination_margin: f64,
    /// `min_{i,k} λ_min(P_{k,T}(0,i) − P_{k,T_prev}(0,i))`; `None` for the first horizon.
    pub loewner_step_margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub entries: Vec<ConvergenceEntry>,
    /// Least-squares fit of `ln p_gap` against `T`; `None` when every gap is zero.
    pub fit: Option<LineFit>,
    pub delta_star: f64,
}

/// Measures `P_{k,T}(0) → P_{k,∞}` over increasing horizons.
pub fn convergence_report(
    model: &DecomposedModel,
    horizons: &[f64],
    stat: &StationarySolution,
    dt: f64,
) -> Result<ConvergenceReport, RiccatiError> {
    convergence_report_with(model, horizons, stat, dt, None)
}

/// As [`convergence_report`] with optional terminal data in place of zero.
pub fn convergence_report_with(
    model: &DecomposedModel,
    horizons: &[f64],
    stat: &StationarySolution,
    dt: f64,
    terminal: Option<&RegimeFamily>,
) -> Result<ConvergenceReport, RiccatiError> {
    if horizons.len() < 4 {
        return Err(RiccatiError::HorizonList("need at least 4 horizons".into()));
    }
    if horizons.windows(2).any(|w| !(w[0] < w[1])) || !(horizons[0] >= 0.0) {
        return Err(RiccatiError::HorizonList("horizons must be nonnegative and increasing".into()));
    }
    let delta = stat.delta_star();
    if horizons[horizons.len() - 1] - horizons[0] < 4.0 / delta {
        return Err(RiccatiError::HorizonList(format!(
            "horizons span {} < 4/δ* = {}",
            horizons[horizons.len() - 1] - horizons[0],
            4.0 / delta
        )));
    }
    let steps: Vec<usize> = horizons
        .iter()
        .map(|&h| grid_steps(h, dt).ok_or(RiccatiError::InvalidGrid { horizon: h, dt }))
        .collect::<Result<_, _>>()?;
    // One backward sweep; P_{k,T}(0) is the value after T/dt steps.
    let field = RiccatiField::new(model, stat.weight);
    let mut p = terminal.cloned().unwrap_or_else(|| zero_family(model));
    let mut snapshots = Vec::with_capacity(horizons.len());
    let mut done = 0usize;
    for (idx, &target) in steps.iter().enumerate() {
        while done < target {
            p = field.rk4_step(&p, dt, -(done as f64) * dt)?;
            done += 1;
        }
        let (theta, _) = field.gains(&p, 0.0)?;
        snapshots.push((horizons[idx], p.clone(), theta));
    }
    let mut entries = Vec::with_capacity(horizons.len());
    let mut prev: Option<&RegimeFamily> = None;
    for (horizon, fam, theta) in &snapshots {
        let mut domination = f64::INFINITY;
        let mut step_margin = f64::INFINITY;
        for i in 0..model.m0() {
            for k in 0..2 {
                domination = domination.min(min_eigenvalue(&(&stat.p[i][k] - &fam[i][k])));
                if let Some(pp) = prev {
                    step_margin = step_margin.min(min_eigenvalue(&(&fam[i][k] - &pp[i][k])));
                }
            }
        }
        entries.push(ConvergenceEntry {
            horizon: *horizon,
            p_gap: family_max_frobenius_diff(&stat.p, fam),
            gain_gap: family_max_frobenius_diff(&stat.theta, theta),
            domination_margin: domination,
            loewner_step_margin: prev.map(|_| step_margin),
        });
        prev = Some(fam);
    }
    for (j, e) in entries.iter().enumerate() {
        if let Some(m) = e.loewner_step_margin {
            if m < -MONOTONE_TOL {
                return Err(RiccatiError::MonotonicityViolation {
                    horizon: e.horizon,
                    detail: format!("P_T(0) decreased in Loewner order (min eigenvalue {m:e})"),
                });
            }
        }
        if e.domination_margin < -1e-8 {
            return Err(RiccatiError::MonotonicityViolation {
                horizon: e.horizon,
                detail: format!("P_∞ fails to dominate (min eigenvalue {:e})", e.domination_margin),
            });
        }
        if j > 0 && e.p_gap > entries[j - 1].p_gap + 1e-12 {
            return Err(RiccatiError::MonotonicityViolation {
                horizon: e.horizon,
                detail: format!("gap grew from {:e} to {:e}", entries[j - 1].p_gap, e.p_gap),
            });
        }
    }
    let positive: Vec<(f64, f64)> = entries
        .iter()
        .filter(|e| e.p_gap > 0.0)
        .map(|e| (e.horizon, e.p_gap.ln()))
        .collect();
    let fit = if positive.len() == entries.len() {
        let (xs, ys): (Vec<f64>, Vec<f64>) = positive.into_iter().unzip();
        fit_line(&xs, &ys)
    } else {
        None
    };
    Ok(ConvergenceReport {
        entries,
        fit,
        delta_star: delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::validate_generator;
    use crate::model::{decompose, ForcingSignals, RawCoefficients, RegimeCoefficients};

    /// a = −1, b = 1, q = 1, r = 1, no mean field.
    fn scalar() -> DecomposedModel {
        let mut c = RegimeCoefficients::zeros(1, 1);
        c.a[(0, 0)] = -1.0;
        c.b[(0, 0)] = 1.0;
        c.q[(0, 0)] = 1.0;
        let raw = RawCoefficients::new(1, 1, vec![c], validate_generator(&Mat::zeros(1, 1)).unwrap()).unwrap();
        decompose(&raw, &ForcingSignals::homogeneous()).unwrap()
    }

    /// Scalar Riccati ODE −ṗ = 2ap + q − p²: closed form with p(T) = 0 is
    /// p(t) = q(e^{2λs} − 1) / ((λ − a)e^{2λs} + λ + a), s = T − t, λ = √(a² + q).
    fn scalar_closed_form(a: f64, q: f64, s: f64) -> f64 {
        let lam = (a * a + q).sqrt();
        let e = (2.0 * lam * s).exp();
        q * (e - 1.0) / ((lam - a) * e + lam + a)
    }

    #[test]
    fn zero_horizon_is_terminal() {
        let m = scalar();
        let sol = integrate_riccati(&m, 0.0, 0.1).unwrap();
        assert_eq!(sol.node_count(), 1);
        assert_eq!(sol.p(0)[0][0][(0, 0)], 0.0);
        // Θ = −R⁻¹S = 0 here.
        assert_eq!(sol.theta(0)[0][1][(0, 0)], 0.0);
    }

    #[test]
    fn scalar_matches_closed_form() {
        let m = scalar();
        let sol = integrate_riccati(&m, 20.0, 0.01).unwrap();
        for node in [0, 500, 1500, 1990, 2000] {
            let s = 20.0 - sol.time(node);
            let exact = scalar_closed_form(-1.0, 1.0, s);
            for k in 0..2 {
                assert!((sol.p(node)[0][k][(0, 0)] - exact).abs() < 1e-10, "node {node}");
            }
        }
        assert!((sol.p(0)[0][0][(0, 0)] - (2f64.sqrt() - 1.0)).abs() < 1e-6);
    }

    #[test]
    fn zero_cost_gives_zero_solution() {
        let mut c = RegimeCoefficients::zeros(2, 1);
        c.a = Mat::from_row_slice(2, 2, &[-1.0, 0.3, 0.0, -0.5]);
        c.b = Mat::from_row_slice(2, 1, &[1.0, 1.0]);
        let raw = RawCoefficients::new(2, 1, vec![c], validate_generator(&Mat::zeros(1, 1)).unwrap()).unwrap();
        let m = decompose(&raw, &ForcingSignals::homogeneous()).unwrap();
        let sol = integrate_riccati(&m, 3.0, 0.05).unwrap();
        for j in 0..sol.node_count() {
            assert!(sol.p(j).iter().flatten().all(|x| x.iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn step_halving_ratio_is_fourth_order() {
        let m = scalar();
        let run = |dt: f64| {
            integrate_riccati_with(&m, 4.0, dt, &RiccatiOptions { fixed_substeps: Some(1), ..Default::default() })
                .unwrap()
                .p(0)[0][0][(0, 0)]
        };
        let (a, b, c) = (run(0.1), run(0.05), run(0.025));
        let ratio = (a - b).abs() / (b - c).abs();
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn shift_identity_is_exact() {
        let m = scalar();
        let long = integrate_riccati(&m, 10.0, 0.01).unwrap();
        let short = integrate_riccati(&m, 6.0, 0.01).unwrap();
        assert!(time_shift_check(&long, &short, 4.0).unwrap() <= 1e-9);
        assert_eq!(time_shift_check(&long, &long, 0.0).unwrap(), 0.0);
        let zero = integrate_riccati(&m, 0.0, 0.01).unwrap();
        assert_eq!(time_shift_check(&long, &zero, 10.0).unwrap(), 0.0);
        assert!(matches!(time_shift_check(&long, &short, 3.0), Err(RiccatiError::GridMismatch(_))));
    }

    #[test]
    fn scalar_are() {
        let m = scalar();
        let stat = solve_are(&m, 1e-12).unwrap();
        let root = 2f64.sqrt() - 1.0;
        assert!((stat.p[0][0][(0, 0)] - root).abs() < 1e-9);
        assert!((stat.theta[0][1][(0, 0)] + root).abs() < 1e-9);
        assert!(stat.max_residual() <= ARE_RESIDUAL_TOL);
        // closed loop −√2: Σ = 1/(2√2), δ* = 2√2
        assert!((stat.delta_star() - 2.0 * 2f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn are_diverges_without_stabilizability() {
        // a = 1 with no control authority: P grows without bound.
        let mut c = RegimeCoefficients::zeros(1, 1);
        c.a[(0, 0)] = 1.0;
        c.q[(0, 0)] = 1.0;
        let raw = RawCoefficients::new(1, 1, vec![c], validate_generator(&Mat::zeros(1, 1)).unwrap()).unwrap();
        let m = decompose(&raw, &ForcingSignals::homogeneous()).unwrap();
        let err = solve_are_with(&m, &AreOptions { max_horizon: 50.0, ..Default::default() }).unwrap_err();
        assert!(matches!(err, RiccatiError::NoConvergence { .. }));
    }

    #[test]
    fn scalar_convergence_report() {
        let m = scalar();
        let stat = solve_are(&m, 1e-13).unwrap();
        let rep = convergence_report(&m, &[1.0, 2.0, 3.0, 4.0], &stat, 0.01).unwrap();
        let fit = rep.fit.unwrap();
        assert!(fit.slope < 0.0 && fit.r_squared >= 0.99, "{fit:?}");
        assert!(rep.entries.windows(2).all(|w| w[1].p_gap < w[0].p_gap));
    }

    #[test]
    fn stationary_terminal_is_a_fixed_point() {
        let m = scalar();
        let stat = solve_are(&m, 1e-13).unwrap();
        let rep = convergence_report_with(&m, &[1.0, 2.0, 3.0, 4.0], &stat, 0.01, Some(&stat.p)).unwrap();
        assert!(rep.entries.iter().all(|e| e.p_gap < 1e-12));
    }

    #[test]
    fn horizon_list_validated() {
        let m = scalar();
        let stat = solve_are(&m, 1e-12).unwrap();
        assert!(matches!(
            convergence_report(&m, &[1.0, 2.0, 3.0], &stat, 0.01),
            Err(RiccatiError::HorizonList(_))
        ));
        assert!(matches!(
            convergence_report(&m, &[1.0, 1.1, 1.2, 1.3], &stat, 0.01),
            Err(RiccatiError::HorizonList(_))
        ));
    }

    #[test]
    fn csv_layout() {
        let sol = integrate_riccati(&scalar(), 0.02, 0.01).unwrap();
        let csv = sol.p_csv();
        assert!(csv.starts_with("t,regime,k,row,col,value\n"));
        assert_eq!(csv.lines().count(), 1 + 3 * 2);
    }
}
