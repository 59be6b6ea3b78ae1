//! Monte Carlo of the decomposed closed loop.
//!
//! Each path samples its regime path exactly, splits every grid step at the
//! jump times and advances
//!
//! - the mean channel `dX₂ = [(A₂ + B₂Θ₂)X₂ + B₂v₂ + b] dt` with the explicit midpoint rule,
//! - the deviation channel `dX₁ = [(A₁ + B₁Θ₁)X₁ + B₁v₁] dt
//!   + [(C₁ + D₁Θ₁)X₁ + (C₂ + D₂Θ₂)X₂ + D₁v₁ + D₂v₂ + σ] dW` with Euler–Maruyama,
//!
//! starting from `X₁(0) = 0`, `X₂(0) = x`. The running cost is integrated
//! with the trapezoid rule on the same substeps.
//!
//! Randomness is keyed by `(master_seed, path_index)`: path `p` draws its
//! regime path from ChaCha stream `2p` and its Brownian increments from stream
//! `2p + 1`. Neither depends on the controller, so two runs with the same seed
//! share common random numbers, and results do not depend on the thread
//! count. `MFLQ_THREADS` caps the number of worker threads.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::feedforward::{FeedforwardSolution, StationaryFeedforward};
use crate::markov::{sample_regime_path, RegimePath};
use crate::model::DecomposedModel;
use crate::riccati::{RiccatiSolution, StationarySolution};
use crate::stability::RegimeGains;
use crate::stats::{Estimate, Running};
use crate::{Mat, Vector, DEVIATION, MEAN};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "MFLQ_THREADS";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulationError {
    #[error("invalid simulation settings: {0}")]
    InvalidConfig(String),
    #[error("policy table does not cover the simulation grid: {0}")]
    GridCoverage(String),
    #[error("policy has the wrong shape: {0}")]
    PolicyShape(String),
    #[error("state left the finite range on path {path} at t={t}")]
    NonFinite { path: usize, t: f64 },
}

/// What each path keeps besides its total cost.
#[derive(Debug, Clone, PartialEq)]
pub enum RecordMode {
    CostOnly,
    /// States, controls and accumulated cost at these grid times.
    Checkpoints(Vec<f64>),
    /// Everything at every grid node, plus the Brownian increments per step.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub dt: f64,
    pub horizon: f64,
    pub n_paths: usize,
    pub master_seed: u64,
    /// Deterministic initial state.
    pub x0: Vec<f64>,
    pub initial_regime: usize,
    pub record: RecordMode,
    /// Replaces the sampled regime path on every path.
    pub regime_path: Option<RegimePath>,
}

impl SimulationConfig {
    pub fn new(dt: f64, horizon: f64, n_paths: usize, master_seed: u64, x0: Vec<f64>, initial_regime: usize) -> Self {
        Self {
            dt,
            horizon,
            n_paths,
            master_seed,
            x0,
            initial_regime,
            record: RecordMode::CostOnly,
            regime_path: None,
        }
    }

    pub fn with_record(mut self, record: RecordMode) -> Self {
        self.record = record;
        self
    }

    pub fn with_regime_path(mut self, path: RegimePath) -> Self {
        self.regime_path = Some(path);
        self
    }

    /// Number of grid steps; `dt` must divide the horizon within 1e-12.
    pub fn steps(&self) -> Result<usize, SimulationError> {
        if !(self.dt > 0.0) || !(self.horizon >= 0.0) || !self.horizon.is_finite() {
            return Err(SimulationError::InvalidConfig(format!(
                "step {} and horizon {} must be positive and finite",
                self.dt, self.horizon
            )));
        }
        let steps = (self.horizon / self.dt).round();
        if (steps * self.dt - self.horizon).abs() > 1e-12 * self.horizon.max(1.0) {
            return Err(SimulationError::InvalidConfig(format!(
                "step {} does not divide horizon {}",
                self.dt, self.horizon
            )));
        }
        Ok(steps as usize)
    }

    fn validate(&self, model: &DecomposedModel) -> Result<usize, SimulationError> {
        let steps = self.steps()?;
        if self.n_paths == 0 {
            return Err(SimulationError::InvalidConfig("n_paths must be at least 1".into()));
        }
        if self.x0.len() != model.n() || self.x0.iter().any(|v| !v.is_finite()) {
            return Err(SimulationError::InvalidConfig(format!(
                "initial state needs {} finite entries, got {:?}",
                model.n(),
                self.x0
            )));
        }
        if self.initial_regime >= model.m0() {
            return Err(SimulationError::InvalidConfig(format!(
                "initial regime {} out of range for {} regimes",
                self.initial_regime,
                model.m0()
            )));
        }
        if let Some(p) = &self.regime_path {
            let bad = p.initial_regime >= model.m0() || p.post_jump_regimes.iter().any(|&r| r >= model.m0());
            if bad || p.horizon < self.horizon {
                return Err(SimulationError::InvalidConfig("fixed regime path does not fit the model".into()));
            }
        }
        Ok(steps)
    }

    fn checkpoint_nodes(&self, times: &[f64]) -> Result<Vec<usize>, SimulationError> {
        let steps = self.steps()?;
        let mut nodes = Vec::with_capacity(times.len());
        for &t in times {
            let j = (t / self.dt).round();
            if !(j >= 0.0) || (j * self.dt - t).abs() > 1e-9 * t.abs().max(1.0) || j as usize > steps {
                return Err(SimulationError::InvalidConfig(format!("checkpoint {t} is not a grid time")));
            }
            nodes.push(j as usize);
        }
        if nodes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SimulationError::InvalidConfig("checkpoints must be increasing".into()));
        }
        Ok(nodes)
    }
}

/// Offsets into one flattened policy record. Matrices are row-major.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Layout {
    n: usize,
    m: usize,
    acl: [usize; 2],
    ccl: [usize; 2],
    theta: [usize; 2],
    drift: [usize; 2],
    diff: usize,
    v: [usize; 2],
    q: [usize; 2],
    r: [usize; 2],
    len: usize,
}

impl Layout {
    fn new(n: usize, m: usize) -> Self {
        let mut off = 0;
        let mut take = |size: usize| {
            let o = off;
            off += size;
            o
        };
        let acl = [take(n * n), take(n * n)];
        let ccl = [take(n * n), take(n * n)];
        let theta = [take(m * n), take(m * n)];
        let drift = [take(n), take(n)];
        let diff = take(n);
        let v = [take(m), take(m)];
        let q = [take(n), take(n)];
        let r = [take(m), take(m)];
        Self {
            n,
            m,
            acl,
            ccl,
            theta,
            drift,
            diff,
            v,
            q,
            r,
            len: off,
        }
    }
}

/// Cost weights of one regime, row-major.
#[derive(Debug, Clone, PartialEq)]
struct CostBlock {
    q: Vec<f64>,
    s: Vec<f64>,
    r: Vec<f64>,
    /// False when `S` is zero, so the cross term can be skipped.
    cross: bool,
}

/// Closed-loop coefficients on a time grid, per regime.
///
/// Holds `A_k + B_kΘ_k`, `C_k + D_kΘ_k`, `Θ_k`, `v_k` and the forcing at every
/// grid node; values between nodes are interpolated linearly.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    layout: Layout,
    m0: usize,
    dt: f64,
    steps: usize,
    records: Vec<f64>,
    /// Records halfway between consecutive nodes, used by the midpoint rule.
    midpoints: Vec<f64>,
    cost: Vec<[CostBlock; 2]>,
    /// False when every `q_k`, `r_k` entry is zero.
    linear_cost: bool,
}

fn put_row_major(dst: &mut [f64], m: &Mat) {
    let cols = m.ncols();
    for r in 0..m.nrows() {
        for c in 0..cols {
            dst[r * cols + c] = m[(r, c)];
        }
    }
}

fn row_major(m: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; m.len()];
    put_row_major(&mut out, m);
    out
}

impl PolicyTable {
    /// Builds a table from `policy(node, regime) -> (Θ, v)` on `t_j = j·dt`, `j ≤ steps`.
    pub fn build(
        model: &DecomposedModel,
        dt: f64,
        steps: usize,
        mut policy: impl FnMut(usize, usize) -> ([Mat; 2], [Vector; 2]),
    ) -> Result<Self, SimulationError> {
        let (n, m, m0) = (model.n(), model.m(), model.m0());
        let layout = Layout::new(n, m);
        let mut records = vec![0.0; (steps + 1) * m0 * layout.len];
        for j in 0..=steps {
            let t = j as f64 * dt;
            for i in 0..m0 {
                let (theta, v) = policy(j, i);
                for k in 0..2 {
                    if theta[k].shape() != (m, n) || v[k].len() != m {
                        return Err(SimulationError::PolicyShape(format!(
                            "node {j}, regime {i}, k={}: gain {:?}, feedforward {}",
                            k + 1,
                            theta[k].shape(),
                            v[k].len()
                        )));
                    }
                    if theta[k].iter().chain(v[k].iter()).any(|x| !x.is_finite()) {
                        return Err(SimulationError::PolicyShape(format!(
                            "node {j}, regime {i}, k={}: non-finite entry",
                            k + 1
                        )));
                    }
                }
                let rec = &mut records[(j * m0 + i) * layout.len..][..layout.len];
                let mut diff = model.sigma(t, i);
                for k in 0..2 {
                    let sub = model.sub(i, k);
                    put_row_major(&mut rec[layout.acl[k]..], &(&sub.a + &sub.b * &theta[k]));
                    put_row_major(&mut rec[layout.ccl[k]..], &(&sub.c + &sub.d * &theta[k]));
                    put_row_major(&mut rec[layout.theta[k]..], &theta[k]);
                    let drift = &sub.b * &v[k] + model.b_k(k, t, i);
                    rec[layout.drift[k]..][..n].copy_from_slice(drift.as_slice());
                    diff += &sub.d * &v[k];
                    rec[layout.v[k]..][..m].copy_from_slice(v[k].as_slice());
                    rec[layout.q[k]..][..n].copy_from_slice(model.q_k(k, t, i).as_slice());
                    rec[layout.r[k]..][..m].copy_from_slice(model.r_k(k, t, i).as_slice());
                }
                rec[layout.diff..][..n].copy_from_slice(diff.as_slice());
            }
        }
        let stride = m0 * layout.len;
        let midpoints = (0..steps * stride)
            .map(|idx| {
                let (x, y) = (records[idx], records[idx + stride]);
                x + 0.5 * (y - x)
            })
            .collect();
        let cost = (0..m0)
            .map(|i| {
                let block = |k: usize| {
                    let sub = model.sub(i, k);
                    CostBlock {
                        q: row_major(&sub.q),
                        s: row_major(&sub.s),
                        r: row_major(&sub.r),
                        cross: sub.s.iter().any(|&x| x != 0.0),
                    }
                };
                [block(DEVIATION), block(MEAN)]
            })
            .collect();
        let linear_cost = records.chunks_exact(layout.len).any(|rec| {
            (0..2).any(|k| {
                rec[layout.q[k]..][..n]
                    .iter()
                    .chain(&rec[layout.r[k]..][..m])
                    .any(|&x| x != 0.0)
            })
        });
        Ok(Self {
            layout,
            m0,
            dt,
            steps,
            records,
            midpoints,
            cost,
            linear_cost,
        })
    }

    /// Finite-horizon optimal controller.
    pub fn finite(
        model: &DecomposedModel,
        ric: &RiccatiSolution,
        ff: &FeedforwardSolution,
    ) -> Result<Self, SimulationError> {
        if ric.dt() != ff.dt() || ric.node_count() != ff.node_count() {
            return Err(SimulationError::GridCoverage(format!(
                "Riccati grid {}x{} vs feedforward grid {}x{}",
                ric.dt(),
                ric.node_count(),
                ff.dt(),
                ff.node_count()
            )));
        }
        Self::build(model, ric.dt(), ric.node_count() - 1, |j, i| {
            (
                ric.theta(j)[i].clone(),
                [ff.v(j, i, DEVIATION).clone(), ff.v(j, i, MEAN).clone()],
            )
        })
    }

    /// Infinite-horizon controller on the grid of the stationary offsets.
    pub fn stationary(
        model: &DecomposedModel,
        stat: &StationarySolution,
        ff: &StationaryFeedforward,
    ) -> Result<Self, SimulationError> {
        let sol = &ff.solution;
        Self::build(model, sol.dt(), sol.node_count() - 1, |j, i| {
            (
                stat.theta[i].clone(),
                [sol.v(j, i, DEVIATION).clone(), sol.v(j, i, MEAN).clone()],
            )
        })
    }

    /// Time-invariant gains without feedforward.
    pub fn constant_gains(
        model: &DecomposedModel,
        gains: &RegimeGains,
        dt: f64,
        steps: usize,
    ) -> Result<Self, SimulationError> {
        if gains.len() != model.m0() {
            return Err(SimulationError::PolicyShape(format!(
                "{} gain pairs for {} regimes",
                gains.len(),
                model.m0()
            )));
        }
        let m = model.m();
        Self::build(model, dt, steps, |_, i| (gains[i].clone(), [Vector::zeros(m), Vector::zeros(m)]))
    }

    /// Rebuilds the table after editing gains and feedforward node by node.
    pub fn perturbed(
        &self,
        model: &DecomposedModel,
        mut edit: impl FnMut(usize, usize, &mut [Mat; 2], &mut [Vector; 2]),
    ) -> Result<Self, SimulationError> {
        Self::build(model, self.dt, self.steps, |j, i| {
            let mut theta = [self.theta(j, i, DEVIATION), self.theta(j, i, MEAN)];
            let mut v = [self.v(j, i, DEVIATION), self.v(j, i, MEAN)];
            edit(j, i, &mut theta, &mut v);
            (theta, v)
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    /// `Θ_k(t_node, regime)`.
    pub fn theta(&self, node: usize, regime: usize, k: usize) -> Mat {
        let Layout { n, m, .. } = self.layout;
        Mat::from_row_slice(m, n, &self.record(node, regime)[self.layout.theta[k]..][..m * n])
    }

    /// `v_k(t_node, regime)`.
    pub fn v(&self, node: usize, regime: usize, k: usize) -> Vector {
        let m = self.layout.m;
        Vector::from_column_slice(&self.record(node, regime)[self.layout.v[k]..][..m])
    }

    fn record(&self, node: usize, regime: usize) -> &[f64] {
        let len = self.layout.len;
        &self.records[(node * self.m0 + regime) * len..][..len]
    }

    fn midpoint(&self, node: usize, regime: usize) -> &[f64] {
        let len = self.layout.len;
        &self.midpoints[(node * self.m0 + regime) * len..][..len]
    }

    fn covers(&self, model: &DecomposedModel, cfg: &SimulationConfig, steps: usize) -> Result<(), SimulationError> {
        if self.layout.n != model.n() || self.layout.m != model.m() || self.m0 != model.m0() {
            return Err(SimulationError::PolicyShape("table built for another model".into()));
        }
        if (self.dt - cfg.dt).abs() > 1e-15 * cfg.dt || self.steps < steps {
            return Err(SimulationError::GridCoverage(format!(
                "table covers [0, {}] with step {}, simulation needs [0, {}] with step {}",
                self.horizon(),
                self.dt,
                cfg.horizon,
                cfg.dt
            )));
        }
        Ok(())
    }
}

/// Record at `t_node + w·dt`; borrows the table directly on nodes.
fn fetch<'r>(table: &'r PolicyTable, node: usize, regime: usize, w: f64, buf: &'r mut [f64]) -> &'r [f64] {
    if w == 0.0 {
        table.record(node, regime)
    } else if w == 1.0 {
        table.record(node + 1, regime)
    } else if w == 0.5 {
        table.midpoint(node, regime)
    } else {
        let a = table.record(node, regime);
        let b = table.record(node + 1, regime);
        for ((o, x), y) in buf.iter_mut().zip(a).zip(b) {
            *o = x + w * (y - x);
        }
        buf
    }
}

/// `out += M x` for row-major `M` with `rows × x.len()`.
#[inline]
fn matvec_add(out: &mut [f64], mat: &[f64], x: &[f64]) {
    for (o, row) in out.iter_mut().zip(mat.chunks_exact(x.len())) {
        *o += dot(row, x);
    }
}

#[inline]
fn quad(mat: &[f64], x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(mat.chunks_exact(y.len())).map(|(xr, row)| xr * dot(row, y)).sum()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// State of one controller along one path.
pub(crate) struct Stepper<'a> {
    table: &'a PolicyTable,
    pub x: [Vec<f64>; 2],
    pub u: [Vec<f64>; 2],
    /// Controls at the start of the last substep.
    pub u_start: [Vec<f64>; 2],
    /// Running cost rate at the current time.
    g: f64,
    pub cost: f64,
    /// `∫₀ᵗ |X₁ + X₂|² ds`.
    pub x_sq_integral: f64,
    x_sq: f64,
    left: Vec<f64>,
    mid: Vec<f64>,
    right: Vec<f64>,
    x1_next: Vec<f64>,
    slope: Vec<f64>,
    x2_mid: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(table: &'a PolicyTable, x0: &[f64], regime: usize) -> Self {
        let Layout { n, m, len, .. } = table.layout;
        let mut s = Self {
            table,
            x: [vec![0.0; n], x0.to_vec()],
            u: [vec![0.0; m], vec![0.0; m]],
            u_start: [vec![0.0; m], vec![0.0; m]],
            g: 0.0,
            cost: 0.0,
            x_sq_integral: 0.0,
            x_sq: 0.0,
            left: vec![0.0; len],
            mid: vec![0.0; len],
            right: vec![0.0; len],
            x1_next: vec![0.0; n],
            slope: vec![0.0; n],
            x2_mid: vec![0.0; n],
        };
        s.refresh(0, regime, 0.0);
        s
    }

    /// Recomputes controls and cost rate at `t_node + w·dt` in `regime`.
    pub fn refresh(&mut self, node: usize, regime: usize, w: f64) {
        let table = self.table;
        let rec = fetch(table, node, regime, w, &mut self.right);
        Self::controls(table, rec, &self.x, &mut self.u);
        self.g = Self::running_cost(table, rec, regime, &self.x, &self.u);
        self.x_sq = self.x[0].iter().zip(&self.x[1]).map(|(a, b)| (a + b) * (a + b)).sum();
    }

    fn controls(table: &PolicyTable, rec: &[f64], x: &[Vec<f64>; 2], u: &mut [Vec<f64>; 2]) {
        let l = &table.layout;
        for k in 0..2 {
            u[k].copy_from_slice(&rec[l.v[k]..][..l.m]);
            matvec_add(&mut u[k], &rec[l.theta[k]..], &x[k]);
        }
    }

    fn running_cost(table: &PolicyTable, rec: &[f64], regime: usize, x: &[Vec<f64>; 2], u: &[Vec<f64>; 2]) -> f64 {
        let l = &table.layout;
        let mut g = 0.0;
        for k in 0..2 {
            let c = &table.cost[regime][k];
            g += quad(&c.q, &x[k], &x[k]) + quad(&c.r, &u[k], &u[k]);
            if c.cross {
                g += 2.0 * quad(&c.s, &u[k], &x[k]);
            }
            if table.linear_cost {
                g += dot(&rec[l.q[k]..][..l.n], &x[k]) + dot(&rec[l.r[k]..][..l.m], &u[k]);
            }
        }
        g
    }

    /// Advances over `[t_node + wa·dt, t_node + wb·dt]` in `regime` with increment `dw`.
    pub fn advance(&mut self, node: usize, regime: usize, wa: f64, wb: f64, h: f64, dw: f64) {
        let table = self.table;
        let l = table.layout;
        let n = l.n;
        let left = fetch(table, node, regime, wa, &mut self.left);
        let mid = fetch(table, node, regime, 0.5 * (wa + wb), &mut self.mid);
        for k in 0..2 {
            self.u_start[k].copy_from_slice(&self.u[k]);
        }
        let [x1, x2] = &mut self.x;

        // deviation channel, Euler–Maruyama with left-point coefficients
        let noise = &mut self.slope;
        noise.copy_from_slice(&left[l.diff..][..n]);
        matvec_add(noise, &left[l.ccl[DEVIATION]..], x1);
        matvec_add(noise, &left[l.ccl[MEAN]..], x2);
        let next = &mut self.x1_next;
        next.copy_from_slice(&left[l.drift[DEVIATION]..][..n]);
        matvec_add(next, &left[l.acl[DEVIATION]..], x1);
        for r in 0..n {
            next[r] = x1[r] + h * next[r] + dw * noise[r];
        }

        // mean channel, explicit midpoint
        let k1 = &mut self.slope;
        k1.copy_from_slice(&left[l.drift[MEAN]..][..n]);
        matvec_add(k1, &left[l.acl[MEAN]..], x2);
        let xm = &mut self.x2_mid;
        for r in 0..n {
            xm[r] = x2[r] + 0.5 * h * k1[r];
        }
        let k2 = &mut self.slope;
        k2.copy_from_slice(&mid[l.drift[MEAN]..][..n]);
        matvec_add(k2, &mid[l.acl[MEAN]..], xm);
        for r in 0..n {
            x2[r] += h * k2[r];
        }
        x1.copy_from_slice(next);

        let right = fetch(table, node, regime, wb, &mut self.right);
        Self::controls(table, right, &self.x, &mut self.u);
        let g = Self::running_cost(table, right, regime, &self.x, &self.u);
        self.cost += 0.5 * h * (self.g + g);
        self.g = g;
        let x_sq: f64 = self.x[0].iter().zip(&self.x[1]).map(|(a, b)| (a + b) * (a + b)).sum();
        self.x_sq_integral += 0.5 * h * (self.x_sq + x_sq);
        self.x_sq = x_sq;
    }

    fn is_finite(&self) -> bool {
        self.g.is_finite() && self.cost.is_finite()
    }
}

/// Per-path hooks driven by [`run_ensemble`].
pub(crate) trait Observer {
    type Output: Send;
    fn at_node(&mut self, _node: usize, _t: f64, _regime: usize, _s: &[Stepper<'_>]) {}
    fn after_substep(&mut self, _h: f64, _dw: f64, _s: &[Stepper<'_>]) {}
    fn finish(self, s: &[Stepper<'_>], path: RegimePath) -> Self::Output;
}

/// One path in flight: its regime path, noise stream, steppers and observer.
struct PathRun<'t, O> {
    index: usize,
    path: RegimePath,
    rng: ChaCha8Rng,
    regime: usize,
    next_jump: usize,
    steppers: Vec<Stepper<'t>>,
    obs: O,
}

impl<'t, O: Observer> PathRun<'t, O> {
    fn start(model: &DecomposedModel, tables: &[&'t PolicyTable], cfg: &SimulationConfig, index: usize, mut obs: O) -> Self {
        let path = match &cfg.regime_path {
            Some(p) => p.clone(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
                rng.set_stream(2 * index as u64);
                sample_regime_path(model.generator(), cfg.initial_regime, cfg.horizon, &mut rng)
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
        rng.set_stream(2 * index as u64 + 1);
        let regime = path.initial_regime;
        let steppers: Vec<Stepper<'t>> = tables.iter().map(|t| Stepper::new(t, &cfg.x0, regime)).collect();
        obs.at_node(0, 0.0, regime, &steppers);
        Self {
            index,
            path,
            rng,
            regime,
            next_jump: 0,
            steppers,
            obs,
        }
    }

    /// Advances over grid step `j`, splitting it at regime jumps.
    fn step(&mut self, j: usize, dt: f64) -> Result<(), SimulationError> {
        let t0 = j as f64 * dt;
        let t1 = (j + 1) as f64 * dt;
        let jumps = &self.path.jump_times;
        while self.next_jump < jumps.len() && jumps[self.next_jump] <= t0 {
            self.regime = self.path.post_jump_regimes[self.next_jump];
            self.next_jump += 1;
            for s in &mut self.steppers {
                s.refresh(j, self.regime, 0.0);
            }
        }
        let mut a = t0;
        let mut wa = 0.0;
        loop {
            let in_step = self.next_jump < jumps.len() && jumps[self.next_jump] < t1;
            let (b, wb) = if in_step {
                let tau = jumps[self.next_jump];
                (tau, ((tau - t0) / dt).clamp(0.0, 1.0))
            } else {
                (t1, 1.0)
            };
            let h = b - a;
            let z: f64 = StandardNormal.sample(&mut self.rng);
            let dw = h.sqrt() * z;
            for s in &mut self.steppers {
                s.advance(j, self.regime, wa, wb, h, dw);
            }
            self.obs.after_substep(h, dw, &self.steppers);
            if !in_step {
                break;
            }
            self.regime = self.path.post_jump_regimes[self.next_jump];
            self.next_jump += 1;
            for s in &mut self.steppers {
                s.refresh(j, self.regime, wb);
            }
            a = b;
            wa = wb;
        }
        if self.steppers.iter().any(|s| !s.is_finite()) {
            return Err(SimulationError::NonFinite { path: self.index, t: t1 });
        }
        self.obs.at_node(j + 1, t1, self.regime, &self.steppers);
        Ok(())
    }

    fn finish(self) -> O::Output {
        self.obs.finish(&self.steppers, self.path)
    }
}

/// Paths advanced together, one grid step at a time. Independent paths
/// interleave well on one core and share the table rows they read.
const BLOCK: usize = 8;

fn run_block<O: Observer>(
    model: &DecomposedModel,
    tables: &[&PolicyTable],
    cfg: &SimulationConfig,
    steps: usize,
    first: usize,
    make: &(impl Fn(usize) -> O + Sync),
) -> Result<Vec<O::Output>, SimulationError> {
    let last = (first + BLOCK).min(cfg.n_paths);
    let mut runs: Vec<PathRun<'_, O>> = (first..last).map(|p| PathRun::start(model, tables, cfg, p, make(p))).collect();
    for j in 0..steps {
        for r in &mut runs {
            r.step(j, cfg.dt)?;
        }
    }
    Ok(runs.into_iter().map(PathRun::finish).collect())
}

/// Worker-thread cap from `MFLQ_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&k| k > 0)
}

fn with_pool<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    let pool = thread_cap().and_then(|k| rayon::ThreadPoolBuilder::new().num_threads(k).build().ok());
    match pool {
        Some(pool) => pool.install(f),
        None => f(),
    }
}

/// Runs every path in parallel; outputs are in path order.
pub(crate) fn run_ensemble<O, F>(
    model: &DecomposedModel,
    tables: &[&PolicyTable],
    cfg: &SimulationConfig,
    make: F,
) -> Result<Vec<O::Output>, SimulationError>
where
    O: Observer,
    F: Fn(usize) -> O + Sync,
{
    let steps = cfg.validate(model)?;
    for t in tables {
        t.covers(model, cfg, steps)?;
    }
    with_pool(|| {
        let blocks: Vec<Vec<O::Output>> = (0..cfg.n_paths.div_ceil(BLOCK))
            .into_par_iter()
            .map(|b| run_block(model, tables, cfg, steps, b * BLOCK, &make))
            .collect::<Result<_, _>>()?;
        Ok(blocks.into_iter().flatten().collect())
    })
}

/// One simulated path. Vectors are flattened per recorded time.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub path_id: usize,
    /// Kept unless the run records cost only.
    pub regime_path: Option<RegimePath>,
    pub times: Vec<f64>,
    /// Regime in force on `[t, t + dt)` at each recorded time.
    pub regimes: Vec<usize>,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    /// Accumulated cost at each recorded time.
    pub cost_at: Vec<f64>,
    /// `∫₀ᵗ |X|² ds` at each recorded time.
    pub x_sq_integral: Vec<f64>,
    /// Brownian increment of each grid step (full recording only).
    pub brownian_increments: Vec<f64>,
    /// Total cost over the horizon.
    pub cost: f64,
    n: usize,
    m: usize,
}

impl PathBundle {
    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn control_dim(&self) -> usize {
        self.m
    }

    pub fn x1_at(&self, idx: usize) -> &[f64] {
        &self.x1[idx * self.n..][..self.n]
    }

    pub fn x2_at(&self, idx: usize) -> &[f64] {
        &self.x2[idx * self.n..][..self.n]
    }
}

/// Full state and control `X = X₁ + X₂`, `u = u₁ + u₂` at the recorded times.
#[derive(Debug, Clone, PartialEq)]
pub struct Recomposed {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
}

pub fn recompose(bundle: &PathBundle) -> Recomposed {
    Recomposed {
        x: bundle.x1.iter().zip(&bundle.x2).map(|(a, b)| a + b).collect(),
        u: bundle.u1.iter().zip(&bundle.u2).map(|(a, b)| a + b).collect(),
    }
}

struct RecordObserver<'c> {
    nodes: &'c [usize],
    full: bool,
    keep_path: bool,
    next: usize,
    bundle: PathBundle,
    step_dw: f64,
}

impl Observer for RecordObserver<'_> {
    type Output = PathBundle;

    fn at_node(&mut self, node: usize, t: f64, regime: usize, s: &[Stepper<'_>]) {
        if self.full && node > 0 {
            self.bundle.brownian_increments.push(self.step_dw);
            self.step_dw = 0.0;
        }
        let hit = self.full || (self.next < self.nodes.len() && self.nodes[self.next] == node);
        if !hit {
            return;
        }
        self.next += 1;
        let st = &s[0];
        let b = &mut self.bundle;
        b.times.push(t);
        b.regimes.push(regime);
        b.x1.extend_from_slice(&st.x[DEVIATION]);
        b.x2.extend_from_slice(&st.x[MEAN]);
        b.u1.extend_from_slice(&st.u[DEVIATION]);
        b.u2.extend_from_slice(&st.u[MEAN]);
        b.cost_at.push(st.cost);
        b.x_sq_integral.push(st.x_sq_integral);
    }

    fn after_substep(&mut self, _h: f64, dw: f64, _s: &[Stepper<'_>]) {
        if self.full {
            self.step_dw += dw;
        }
    }

    fn finish(mut self, s: &[Stepper<'_>], path: RegimePath) -> PathBundle {
        self.bundle.cost = s[0].cost;
        if self.keep_path {
            self.bundle.regime_path = Some(path);
        }
        self.bundle
    }
}

/// Paths of one controller.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub config: SimulationConfig,
    pub paths: Vec<PathBundle>,
}

/// Ensemble moments at one recorded time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentPoint {
    pub t: f64,
    /// `E|X|²`.
    pub x_sq: Estimate,
    pub x1_sq: Estimate,
    pub x2_sq: Estimate,
    /// `E⟨X₁, X₂⟩`, zero for an orthogonal decomposition.
    pub cross: Estimate,
    /// Componentwise `E[X]`.
    pub mean_x: Vec<Estimate>,
    /// Componentwise `E[X₂]`.
    pub mean_x2: Vec<Estimate>,
    /// Componentwise `E[X₁] = E[X − X₂]`.
    pub mean_x1: Vec<Estimate>,
    /// `E ∫₀ᵗ |X|² ds`.
    pub x_sq_integral: Estimate,
    /// Accumulated cost.
    pub cost: Estimate,
}

impl Ensemble {
    /// Sample mean and standard error of the total cost.
    pub fn cost(&self) -> Estimate {
        self.paths.iter().map(|p| p.cost).collect::<Running>().estimate()
    }

    pub fn costs(&self) -> Vec<f64> {
        self.paths.iter().map(|p| p.cost).collect()
    }

    /// Moments at every recorded time.
    pub fn moments(&self) -> Vec<MomentPoint> {
        let Some(first) = self.paths.first() else {
            return Vec::new();
        };
        let n = first.n;
        (0..first.times.len())
            .map(|idx| {
                let mut x_sq = Running::default();
                let mut x1_sq = Running::default();
                let mut x2_sq = Running::default();
                let mut cross = Running::default();
                let mut mean_x = vec![Running::default(); n];
                let mut mean_x1 = vec![Running::default(); n];
                let mut mean_x2 = vec![Running::default(); n];
                let mut integral = Running::default();
                let mut cost = Running::default();
                for p in &self.paths {
                    let (a, b) = (p.x1_at(idx), p.x2_at(idx));
                    x_sq.push(a.iter().zip(b).map(|(x, y)| (x + y) * (x + y)).sum());
                    x1_sq.push(dot(a, a));
                    x2_sq.push(dot(b, b));
                    cross.push(dot(a, b));
                    for r in 0..n {
                        mean_x[r].push(a[r] + b[r]);
                        mean_x1[r].push(a[r]);
                        mean_x2[r].push(b[r]);
                    }
                    integral.push(p.x_sq_integral[idx]);
                    cost.push(p.cost_at[idx]);
                }
                MomentPoint {
                    t: first.times[idx],
                    x_sq: x_sq.estimate(),
                    x1_sq: x1_sq.estimate(),
                    x2_sq: x2_sq.estimate(),
                    cross: cross.estimate(),
                    mean_x: mean_x.iter().map(Running::estimate).collect(),
                    mean_x2: mean_x2.iter().map(Running::estimate).collect(),
                    mean_x1: mean_x1.iter().map(Running::estimate).collect(),
                    x_sq_integral: integral.estimate(),
                    cost: cost.estimate(),
                }
            })
            .collect()
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "n_paths": self.config.n_paths,
            "master_seed": self.config.master_seed,
            "dt": self.config.dt,
            "horizon": self.config.horizon,
            "cost": self.cost(),
            "moments": self.moments(),
        })
    }

    /// CSV `path_id,t,regime,x1[..],x2[..],x[..],u[..]` over recorded times.
    pub fn paths_csv(&self) -> String {
        let n = self.paths.first().map_or(0, |p| p.n);
        let m = self.paths.first().map_or(0, |p| p.m);
        let mut out = String::from("path_id,t,regime");
        for (label, dim) in [("x1", n), ("x2", n), ("x", n), ("u", m)] {
            for r in 0..dim {
                let _ = write!(out, ",{label}[{r}]");
            }
        }
        out.push('\n');
        for p in &self.paths {
            let full = recompose(p);
            for (idx, t) in p.times.iter().enumerate() {
                let _ = write!(out, "{},{t:.16e},{}", p.path_id, p.regimes[idx]);
                let cols = [
                    p.x1_at(idx),
                    p.x2_at(idx),
                    &full.x[idx * n..][..n],
                    &full.u[idx * m..][..m],
                ];
                for v in cols.iter().flat_map(|c| c.iter()) {
                    let _ = write!(out, ",{v:.16e}");
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Simulates one controller over `cfg.horizon`.
pub fn simulate_closed_loop(
    model: &DecomposedModel,
    table: &PolicyTable,
    cfg: &SimulationConfig,
) -> Result<Ensemble, SimulationError> {
    let (nodes, full) = match &cfg.record {
        RecordMode::CostOnly => (Vec::new(), false),
        RecordMode::Checkpoints(ts) => (cfg.checkpoint_nodes(ts)?, false),
        RecordMode::Full => (Vec::new(), true),
    };
    let keep_path = cfg.record != RecordMode::CostOnly;
    let (n, m) = (model.n(), model.m());
    let paths = run_ensemble(model, &[table], cfg, |p| RecordObserver {
        nodes: &nodes,
        full,
        keep_path,
        next: 0,
        step_dw: 0.0,
        bundle: PathBundle {
            path_id: p,
            regime_path: None,
            times: Vec::new(),
            regimes: Vec::new(),
            x1: Vec::new(),
            x2: Vec::new(),
            u1: Vec::new(),
            u2: Vec::new(),
            cost_at: Vec::new(),
            x_sq_integral: Vec::new(),
            brownian_increments: Vec::new(),
            cost: 0.0,
            n,
            m,
        },
    })?;
    Ok(Ensemble {
        config: cfg.clone(),
        paths,
    })
}

/// Finite-horizon cost estimate `Ĵ_T` with its standard error.
pub fn evaluate_cost(ensemble: &Ensemble) -> Estimate {
    ensemble.cost()
}

/// Recomputes `X₂` at every grid node from the regime path alone.
pub fn mean_channel_path(table: &PolicyTable, path: &RegimePath, x0: &[f64], dt: f64, steps: usize) -> Vec<Vec<f64>> {
    let mut s = Stepper::new(table, x0, path.initial_regime);
    let mut regime = path.initial_regime;
    let mut out = vec![s.x[MEAN].clone()];
    let jumps = &path.jump_times;
    let mut next_jump = 0;
    for j in 0..steps {
        let t0 = j as f64 * dt;
        let t1 = (j + 1) as f64 * dt;
        while next_jump < jumps.len() && jumps[next_jump] <= t0 {
            regime = path.post_jump_regimes[next_jump];
            next_jump += 1;
        }
        let (mut a, mut wa) = (t0, 0.0);
        loop {
            let in_step = next_jump < jumps.len() && jumps[next_jump] < t1;
            let (b, wb) = if in_step {
                let tau = jumps[next_jump];
                (tau, ((tau - t0) / dt).clamp(0.0, 1.0))
            } else {
                (t1, 1.0)
            };
            s.advance(j, regime, wa, wb, b - a, 0.0);
            if !in_step {
                break;
            }
            regime = path.post_jump_regimes[next_jump];
            next_jump += 1;
            a = b;
            wa = wb;
        }
        out.push(s.x[MEAN].clone());
    }
    out
}

/// Paired comparison of two controllers on common random numbers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoupledEnsemble {
    pub times: Vec<f64>,
    /// `E Σ_k |X_k^a(t) − X_k^b(t)|²`.
    pub gap_x: Vec<Estimate>,
    /// `E Σ_k ∫₀ᵗ e^{−κ(t−r)} |u_k^a(r) − u_k^b(r)|² dr`.
    pub gap_u: Vec<Estimate>,
    pub cost_a: Estimate,
    pub cost_b: Estimate,
    /// Paired `J_b − J_a`.
    pub cost_difference: Estimate,
    pub n_paths: usize,
}

struct CoupledObserver<'c> {
    nodes: &'c [usize],
    next: usize,
    kappa: f64,
    discounted: f64,
    gaps: Vec<(f64, f64)>,
}

fn control_gap(a: &[Vec<f64>; 2], b: &[Vec<f64>; 2]) -> f64 {
    (0..2)
        .map(|k| a[k].iter().zip(&b[k]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
        .sum()
}

impl Observer for CoupledObserver<'_> {
    type Output = (Vec<(f64, f64)>, f64, f64);

    fn at_node(&mut self, node: usize, _t: f64, _regime: usize, s: &[Stepper<'_>]) {
        if self.next < self.nodes.len() && self.nodes[self.next] == node {
            self.next += 1;
            let dx = control_gap(&s[0].x, &s[1].x);
            self.gaps.push((dx, self.discounted));
        }
    }

    fn after_substep(&mut self, h: f64, _dw: f64, s: &[Stepper<'_>]) {
        let g0 = control_gap(&s[0].u_start, &s[1].u_start);
        let g1 = control_gap(&s[0].u, &s[1].u);
        let decay = (-self.kappa * h).exp();
        self.discounted = decay * self.discounted + 0.5 * h * (decay * g0 + g1);
    }

    fn finish(self, s: &[Stepper<'_>], _path: RegimePath) -> Self::Output {
        (self.gaps, s[0].cost, s[1].cost)
    }
}

/// Runs two controllers in lockstep on the same regime paths and increments.
///
/// `kappa` is the discount rate of the control gap.
pub fn simulate_coupled(
    model: &DecomposedModel,
    a: &PolicyTable,
    b: &PolicyTable,
    cfg: &SimulationConfig,
    checkpoints: &[f64],
    kappa: f64,
) -> Result<CoupledEnsemble, SimulationError> {
    let nodes = cfg.checkpoint_nodes(checkpoints)?;
    let out = run_ensemble(model, &[a, b], cfg, |_| CoupledObserver {
        nodes: &nodes,
        next: 0,
        kappa,
        discounted: 0.0,
        gaps: Vec::with_capacity(nodes.len()),
    })?;
    let mut gx = vec![Running::default(); nodes.len()];
    let mut gu = vec![Running::default(); nodes.len()];
    let (mut ca, mut cb, mut diff) = (Running::default(), Running::default(), Running::default());
    for (gaps, ja, jb) in &out {
        for (idx, (dx, du)) in gaps.iter().enumerate() {
            gx[idx].push(*dx);
            gu[idx].push(*du);
        }
        ca.push(*ja);
        cb.push(*jb);
        diff.push(jb - ja);
    }
    Ok(CoupledEnsemble {
        times: checkpoints.to_vec(),
        gap_x: gx.iter().map(Running::estimate).collect(),
        gap_u: gu.iter().map(Running::estimate).collect(),
        cost_a: ca.estimate(),
        cost_b: cb.estimate(),
        cost_difference: diff.estimate(),
        n_paths: cfg.n_paths,
    })
}

/// Time-averaged cost `(1/T)·Ĵ_T` at one horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErgodicPoint {
    pub horizon: f64,
    pub average: Estimate,
}

/// Simulates once to the largest horizon and reads `(1/T)·Ĵ_T` at each `T`.
pub fn evaluate_ergodic_cost(
    model: &DecomposedModel,
    table: &PolicyTable,
    cfg: &SimulationConfig,
    horizons: &[f64],
) -> Result<Vec<ErgodicPoint>, SimulationError> {
    if horizons.is_empty() || horizons.iter().any(|&t| !(t > 0.0)) {
        return Err(SimulationError::InvalidConfig("horizons must be positive".into()));
    }
    let longest = horizons.iter().copied().fold(0.0, f64::max);
    let mut run = cfg.clone();
    run.horizon = longest;
    let mut sorted = horizons.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    run.record = RecordMode::Checkpoints(sorted.clone());
    let ens = simulate_closed_loop(model, table, &run)?;
    Ok(horizons
        .iter()
        .map(|&h| {
            let idx = sorted.iter().position(|&x| x == h).unwrap_or(0);
            let avg: Running = ens.paths.iter().map(|p| p.cost_at[idx] / h).collect();
            ErgodicPoint {
                horizon: h,
                average: avg.estimate(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedforward::integrate_eta;
    use crate::markov::validate_generator;
    use crate::model::{decompose, ForcingSignals, RawCoefficients, RegimeCoefficients, Signal};
    use crate::riccati::{integrate_riccati, solve_are};

    fn scalar(c: f64, d: f64, signals: ForcingSignals) -> DecomposedModel {
        let mut co = RegimeCoefficients::zeros(1, 1);
        co.a[(0, 0)] = -1.0;
        co.b[(0, 0)] = 1.0;
        co.q[(0, 0)] = 1.0;
        co.c[(0, 0)] = c;
        co.d[(0, 0)] = d;
        let raw = RawCoefficients::new(1, 1, vec![co], validate_generator(&Mat::zeros(1, 1)).unwrap()).unwrap();
        decompose(&raw, &signals).unwrap()
    }

    fn two_regime() -> DecomposedModel {
        let mut a = RegimeCoefficients::zeros(1, 1);
        a.a[(0, 0)] = -0.5;
        a.a_bar[(0, 0)] = 0.2;
        a.b[(0, 0)] = 1.0;
        a.c[(0, 0)] = 0.3;
        a.q[(0, 0)] = 1.0;
        let mut b = a.clone();
        b.a[(0, 0)] = 0.1;
        b.c_bar[(0, 0)] = 0.2;
        b.d[(0, 0)] = 0.2;
        let gen = validate_generator(&Mat::from_row_slice(2, 2, &[-1.0, 1.0, 2.0, -2.0])).unwrap();
        let raw = RawCoefficients::new(1, 1, vec![a, b], gen).unwrap();
        decompose(&raw, &ForcingSignals::homogeneous()).unwrap()
    }

    fn optimal(model: &DecomposedModel, horizon: f64, dt: f64) -> PolicyTable {
        let ric = integrate_riccati(model, horizon, dt).unwrap();
        let ff = integrate_eta(model, &ric).unwrap();
        PolicyTable::finite(model, &ric, &ff).unwrap()
    }

    #[test]
    fn zero_state_stays_zero() {
        let m = two_regime();
        let table = optimal(&m, 2.0, 0.01);
        let cfg = SimulationConfig::new(0.01, 2.0, 20, 7, vec![0.0], 0).with_record(RecordMode::Full);
        let ens = simulate_closed_loop(&m, &table, &cfg).unwrap();
        for p in &ens.paths {
            assert!(p.x1.iter().chain(&p.x2).chain(&p.u1).chain(&p.u2).all(|&v| v == 0.0));
            assert_eq!(p.cost, 0.0);
        }
    }

    #[test]
    fn deterministic_loop_matches_exponential() {
        // stationary gain: ẋ = −√2 x
        let m = scalar(0.0, 0.0, ForcingSignals::homogeneous());
        let stat = solve_are(&m, 1e-12).unwrap();
        let table = PolicyTable::constant_gains(&m, &stat.theta, 1e-3, 5000).unwrap();
        let cfg = SimulationConfig::new(1e-3, 5.0, 1, 1, vec![1.0], 0).with_record(RecordMode::Checkpoints(vec![5.0]));
        let ens = simulate_closed_loop(&m, &table, &cfg).unwrap();
        let exact = (-(2f64.sqrt()) * 5.0).exp();
        assert!((ens.paths[0].x2[0] - exact).abs() < 1e-6);
        assert_eq!(ens.paths[0].x1[0], 0.0);
    }

    #[test]
    fn deterministic_finite_horizon_matches_reference() {
        // θ(t) = −p(t) with the closed-form scalar Riccati solution
        let m = scalar(0.0, 0.0, ForcingSignals::homogeneous());
        let table = optimal(&m, 5.0, 1e-3);
        let cfg = SimulationConfig::new(1e-3, 5.0, 1, 1, vec![1.0], 0).with_record(RecordMode::Checkpoints(vec![5.0]));
        let ens = simulate_closed_loop(&m, &table, &cfg).unwrap();
        let lam = 2f64.sqrt();
        let p = |t: f64| {
            let e = (2.0 * lam * (5.0 - t)).exp();
            (e - 1.0) / ((lam + 1.0) * e + lam - 1.0)
        };
        let f = |t: f64, x: f64| (-1.0 - p(t)) * x;
        let (mut x, h) = (1.0, 1e-4);
        for j in 0..50_000 {
            let t = j as f64 * h;
            let k1 = f(t, x);
            let k2 = f(t + h / 2.0, x + h / 2.0 * k1);
            let k3 = f(t + h / 2.0, x + h / 2.0 * k2);
            let k4 = f(t + h, x + h * k3);
            x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        assert!((ens.paths[0].x2[0] - x).abs() < 1e-6, "{} vs {x}", ens.paths[0].x2[0]);
    }

    #[test]
    fn same_seed_same_paths() {
        let m = two_regime();
        let table = optimal(&m, 2.0, 0.01);
        let cfg = SimulationConfig::new(0.01, 2.0, 16, 42, vec![1.0], 1).with_record(RecordMode::Full);
        let a = simulate_closed_loop(&m, &table, &cfg).unwrap();
        let b = simulate_closed_loop(&m, &table, &cfg).unwrap();
        assert_eq!(a, b);
        let other = SimulationConfig { master_seed: 43, ..cfg };
        assert_ne!(a.paths[0].x1, simulate_closed_loop(&m, &table, &other).unwrap().paths[0].x1);
    }

    #[test]
    fn mean_channel_depends_on_regimes_only() {
        let m = two_regime();
        let table = optimal(&m, 3.0, 0.01);
        let cfg = SimulationConfig::new(0.01, 3.0, 8, 3, vec![1.0], 0).with_record(RecordMode::Full);
        let ens = simulate_closed_loop(&m, &table, &cfg).unwrap();
        for p in &ens.paths {
            let again = mean_channel_path(&table, p.regime_path.as_ref().unwrap(), &[1.0], 0.01, 300);
            let flat: Vec<f64> = again.into_iter().flatten().collect();
            assert_eq!(flat, p.x2);
            assert_eq!(p.brownian_increments.len(), 300);
        }
    }

    #[test]
    fn recompose_sums_channels() {
        let m = two_regime();
        let table = optimal(&m, 1.0, 0.01);
        let cfg = SimulationConfig::new(0.01, 1.0, 2, 3, vec![1.0], 0).with_record(RecordMode::Full);
        let ens = simulate_closed_loop(&m, &table, &cfg).unwrap();
        let p = &ens.paths[1];
        let r = recompose(p);
        for idx in 0..p.times.len() {
            assert_eq!(r.x[idx], p.x1[idx] + p.x2[idx]);
            assert_eq!(r.u[idx], p.u1[idx] + p.u2[idx]);
        }
        assert_eq!(p.x1[0], 0.0);
        assert_eq!(p.x2[0], 1.0);
    }

    #[test]
    fn identical_tables_have_zero_gap() {
        let m = two_regime();
        let table = optimal(&m, 2.0, 0.01);
        let cfg = SimulationConfig::new(0.01, 2.0, 50, 9, vec![1.0], 0);
        let c = simulate_coupled(&m, &table, &table, &cfg, &[0.5, 1.0, 2.0], 0.25).unwrap();
        assert!(c.gap_x.iter().chain(&c.gap_u).all(|e| e.mean == 0.0));
        assert_eq!(c.cost_difference.mean, 0.0);
    }

    #[test]
    fn dynamic_programming_identity_small() {
        let m = two_regime();
        let (t, dt) = (2.0, 0.002);
        let ric = integrate_riccati(&m, t, dt).unwrap();
        let ff = integrate_eta(&m, &ric).unwrap();
        let table = PolicyTable::finite(&m, &ric, &ff).unwrap();
        let cfg = SimulationConfig::new(dt, t, 4000, 11, vec![1.0], 0);
        let ens = simulate_closed_loop(&m, &table, &cfg).unwrap();
        let est = evaluate_cost(&ens);
        let exact = ric.p(0)[0][MEAN][(0, 0)];
        assert!((est.mean - exact).abs() <= (3.0 * est.std_error).max(0.05 * exact), "{est:?} vs {exact}");
    }

    #[test]
    fn perturbation_costs_more() {
        let m = two_regime();
        let table = optimal(&m, 2.0, 0.01);
        let pert = table
            .perturbed(&m, |_, _, th, _| th[MEAN][(0, 0)] += 0.3)
            .unwrap();
        let cfg = SimulationConfig::new(0.01, 2.0, 2000, 5, vec![1.0], 0);
        let c = simulate_coupled(&m, &table, &pert, &cfg, &[], 0.25).unwrap();
        assert!(c.cost_difference.mean > 0.0);
    }

    #[test]
    fn additive_noise_has_strong_order_one() {
        let mut s = ForcingSignals::homogeneous();
        s.sigma = Signal::Constant { value: vec![1.0] }.into();
        let m = scalar(0.0, 0.0, s);
        let stat = solve_are(&m, 1e-12).unwrap();
        // a time-varying gain makes the drift non-trivial along the grid
        let fine_steps = 1024;
        let table_for = |steps: usize| {
            PolicyTable::build(&m, 1.0 / steps as f64, steps, |j, _| {
                let t = j as f64 / steps as f64;
                let mut th = stat.theta[0].clone();
                th[DEVIATION][(0, 0)] *= 1.0 + t;
                (th, [Vector::zeros(1), Vector::zeros(1)])
            })
            .unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut errs = [0.0f64; 3];
        let paths = 200;
        for _ in 0..paths {
            let h = 1.0 / fine_steps as f64;
            let inc: Vec<f64> = (0..fine_steps)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    h.sqrt() * z
                })
                .collect();
            let run = |steps: usize| {
                let table = table_for(steps);
                let mut st = Stepper::new(&table, &[0.0], 0);
                let group = fine_steps / steps;
                for j in 0..steps {
                    let dw: f64 = inc[j * group..(j + 1) * group].iter().sum();
                    st.advance(j, 0, 0.0, 1.0, 1.0 / steps as f64, dw);
                }
                st.x[DEVIATION][0]
            };
            let reference = run(fine_steps);
            for (e, steps) in errs.iter_mut().zip([16, 32, 64]) {
                *e += (run(steps) - reference).abs() / paths as f64;
            }
        }
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((1.6..=2.4).contains(&ratio), "ratio {ratio}, errors {errs:?}");
        }
    }

    #[test]
    fn grid_coverage_checked() {
        let m = two_regime();
        let table = optimal(&m, 1.0, 0.01);
        let cfg = SimulationConfig::new(0.01, 2.0, 1, 0, vec![1.0], 0);
        assert!(matches!(
            simulate_closed_loop(&m, &table, &cfg),
            Err(SimulationError::GridCoverage(_))
        ));
        let cfg = SimulationConfig::new(0.03, 1.0, 1, 0, vec![1.0], 0);
        assert!(matches!(cfg.steps(), Err(SimulationError::InvalidConfig(_))));
    }

    #[test]
    fn ergodic_zero_state_is_zero() {
        let m = scalar(0.2, 0.0, ForcingSignals::homogeneous());
        let stat = solve_are(&m, 1e-12).unwrap();
        let table = PolicyTable::constant_gains(&m, &stat.theta, 0.01, 1000).unwrap();
        let cfg = SimulationConfig::new(0.01, 10.0, 10, 1, vec![0.0], 0);
        let pts = evaluate_ergodic_cost(&m, &table, &cfg, &[2.5, 5.0, 10.0]).unwrap();
        assert!(pts.iter().all(|p| p.average.mean == 0.0));
    }
}
