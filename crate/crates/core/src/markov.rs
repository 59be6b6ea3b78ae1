//! Finite-state continuous-time Markov chains: generator validation, the
//! regime-coupling operator `Λ`, exact path sampling and stationary laws.

use std::fmt::Write as _;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::{Mat, Vector};

/// Row-sum tolerance for generators.
pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarkovError {
    #[error("generator must be a non-empty square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("generator entry ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("negative off-diagonal rate {value} at ({row}, {col})")]
    NegativeOffDiagonal { row: usize, col: usize, value: f64 },
    #[error("row {row} sums to {sum}, expected 0")]
    RowSumViolation { row: usize, sum: f64 },
    #[error("expected {expected} regime entries of size {size}x{size}, got {got}")]
    DimensionMismatch {
        expected: usize,
        size: usize,
        got: String,
    },
    #[error("regime index {index} out of range for {m0} regimes")]
    RegimeOutOfRange { index: usize, m0: usize },
    #[error("chain is reducible: no unique stationary distribution")]
    Reducible,
}

/// A validated generator `(λ_ij)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneratorMatrix {
    #[serde(serialize_with = "serialize_rows")]
    lambda: Mat,
    has_zero_rate: bool,
}

fn serialize_rows<S: serde::Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(crate::linalg::to_rows(m))
}

/// Validates a raw rate matrix.
///
/// Off-diagonal zeros are accepted with a logged warning so that absorbing or
/// degenerate test chains stay expressible. The diagonal is rebuilt as the
/// negative off-diagonal row sum once the row sum passes the tolerance.
pub fn validate_generator(raw: &Mat) -> Result<GeneratorMatrix, MarkovError> {
    let m0 = raw.nrows();
    if m0 == 0 || !raw.is_square() {
        return Err(MarkovError::NotSquare {
            rows: raw.nrows(),
            cols: raw.ncols(),
        });
    }
    for i in 0..m0 {
        for j in 0..m0 {
            if !raw[(i, j)].is_finite() {
                return Err(MarkovError::NonFinite { row: i, col: j });
            }
        }
    }
    let mut has_zero_rate = false;
    for i in 0..m0 {
        for j in 0..m0 {
            if i == j {
                continue;
            }
            let v = raw[(i, j)];
            if v < 0.0 {
                return Err(MarkovError::NegativeOffDiagonal {
                    row: i,
                    col: j,
                    value: v,
                });
            }
            if v == 0.0 {
                has_zero_rate = true;
            }
        }
    }
    let mut lambda = raw.clone();
    for i in 0..m0 {
        let sum: f64 = raw.row(i).iter().sum();
        if sum.abs() > ROW_SUM_TOL {
            return Err(MarkovError::RowSumViolation { row: i, sum });
        }
        let off: f64 = (0..m0).filter(|&j| j != i).map(|j| raw[(i, j)]).sum();
        lambda[(i, i)] = -off;
    }
    if has_zero_rate {
        log::warn!("generator has zero off-diagonal rates; strict positivity is not satisfied");
    }
    Ok(GeneratorMatrix {
        lambda,
        has_zero_rate,
    })
}

impl GeneratorMatrix {
    /// Number of regimes `m₀`.
    pub fn m0(&self) -> usize {
        self.lambda.nrows()
    }

    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.lambda[(i, j)]
    }

    pub fn matrix(&self) -> &Mat {
        &self.lambda
    }

    /// Exit rate `−λ_ii` of regime `i`.
    pub fn exit_rate(&self, i: usize) -> f64 {
        -self.lambda[(i, i)]
    }

    /// True when some off-diagonal rate is exactly zero.
    pub fn has_zero_rate(&self) -> bool {
        self.has_zero_rate
    }

    /// Strong connectivity of the jump graph.
    pub fn is_irreducible(&self) -> bool {
        let m0 = self.m0();
        let reach = |forward: bool| -> bool {
            let mut seen = vec![false; m0];
            let mut stack = vec![0usize];
            seen[0] = true;
            while let Some(i) = stack.pop() {
                for j in 0..m0 {
                    let rate = if forward { self.lambda[(i, j)] } else { self.lambda[(j, i)] };
                    if i != j && rate > 0.0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            seen.into_iter().all(|s| s)
        };
        reach(true) && reach(false)
    }
}

/// `Λ[P](i) = Σ_j λ_ij P(j)`.
pub fn lambda_op(gen: &GeneratorMatrix, family: &[Mat], i: usize) -> Result<Mat, MarkovError> {
    let m0 = gen.m0();
    if i >= m0 {
        return Err(MarkovError::RegimeOutOfRange { index: i, m0 });
    }
    let size = family.first().map_or(0, Mat::nrows);
    if family.len() != m0 || family.iter().any(|p| p.nrows() != size || p.ncols() != size) {
        let shapes: Vec<String> = family
            .iter()
            .map(|p| format!("{}x{}", p.nrows(), p.ncols()))
            .collect();
        return Err(MarkovError::DimensionMismatch {
            expected: m0,
            size,
            got: shapes.join(","),
        });
    }
    Ok(lambda_apply(gen, family.iter(), i, size, size))
}

/// Unchecked `Λ` over any iterator of equally shaped matrices.
pub(crate) fn lambda_apply<'a>(
    gen: &GeneratorMatrix,
    family: impl Iterator<Item = &'a Mat>,
    i: usize,
    rows: usize,
    cols: usize,
) -> Mat {
    let mut out = Mat::zeros(rows, cols);
    for (j, p) in family.enumerate() {
        let rate = gen.rate(i, j);
        if rate != 0.0 {
            out += p * rate;
        }
    }
    out
}

/// A right-continuous piecewise-constant regime trajectory on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegimePath {
    pub initial_regime: usize,
    pub jump_times: Vec<f64>,
    pub post_jump_regimes: Vec<usize>,
    pub horizon: f64,
}

impl RegimePath {
    /// A path that never jumps.
    pub fn constant(regime: usize, horizon: f64) -> Self {
        Self {
            initial_regime: regime,
            jump_times: Vec::new(),
            post_jump_regimes: Vec::new(),
            horizon,
        }
    }

    pub fn jump_count(&self) -> usize {
        self.jump_times.len()
    }

    /// Regime in force at time `t` (right-continuous).
    pub fn regime_at(&self, t: f64) -> usize {
        let k = self.jump_times.partition_point(|&s| s <= t);
        if k == 0 {
            self.initial_regime
        } else {
            self.post_jump_regimes[k - 1]
        }
    }

    /// Time spent in each regime over `[0, horizon]`.
    pub fn occupation_times(&self, m0: usize) -> Vec<f64> {
        let mut occ = vec![0.0; m0];
        let mut t = 0.0;
        let mut cur = self.initial_regime;
        for (&s, &next) in self.jump_times.iter().zip(&self.post_jump_regimes) {
            occ[cur] += s - t;
            t = s;
            cur = next;
        }
        occ[cur] += self.horizon - t;
        occ
    }

    /// CSV with columns `t_jump,new_regime`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_jump,new_regime\n");
        for (t, r) in self.jump_times.iter().zip(&self.post_jump_regimes) {
            let _ = writeln!(out, "{t:.16e},{r}");
        }
        out
    }
}

/// Samples the chain exactly with exponential holding clocks.
///
/// Holding time in `i` is `Exp(−λ_ii)` drawn by inverse CDF; the next regime
/// is `j` with probability `λ_ij / (−λ_ii)`. Absorbing regimes end the path.
pub fn sample_regime_path<R: Rng + ?Sized>(
    gen: &GeneratorMatrix,
    i0: usize,
    horizon: f64,
    rng: &mut R,
) -> RegimePath {
    assert!(i0 < gen.m0(), "initial regime out of range");
    let mut path = RegimePath::constant(i0, horizon);
    let mut t = 0.0;
    let mut cur = i0;
    loop {
        let exit = gen.exit_rate(cur);
        if exit <= 0.0 {
            break;
        }
        let u: f64 = rng.random();
        t += -(1.0 - u).ln() / exit;
        if t > horizon {
            break;
        }
        let target = rng.random::<f64>() * exit;
        let mut acc = 0.0;
        let mut next = cur;
        for j in 0..gen.m0() {
            if j == cur {
                continue;
            }
            acc += gen.rate(cur, j);
            next = j;
            if target < acc {
                break;
            }
        }
        // Rounding can leave `next` on a zero-rate tail entry.
        while gen.rate(cur, next) <= 0.0 && next > 0 {
            next -= 1;
        }
        path.jump_times.push(t);
        path.post_jump_regimes.push(next);
        cur = next;
    }
    path
}

/// Solves `πᵀΛ = 0`, `Σπ = 1`.
pub fn stationary_distribution(gen: &GeneratorMatrix) -> Result<Vector, MarkovError> {
    stationary_distribution_with(gen, false)
}

/// As [`stationary_distribution`]; `allow_reducible` skips the connectivity
/// check and relies on the linear solve alone.
pub fn stationary_distribution_with(
    gen: &GeneratorMatrix,
    allow_reducible: bool,
) -> Result<Vector, MarkovError> {
    let m0 = gen.m0();
    if m0 == 1 {
        return Ok(Vector::from_element(1, 1.0));
    }
    if !allow_reducible && !gen.is_irreducible() {
        return Err(MarkovError::Reducible);
    }
    // Λᵀπ = 0 with the last equation replaced by normalization.
    let mut sys = gen.matrix().transpose();
    for j in 0..m0 {
        sys[(m0 - 1, j)] = 1.0;
    }
    let mut rhs = Vector::zeros(m0);
    rhs[m0 - 1] = 1.0;
    let pi = sys.lu().solve(&rhs).ok_or(MarkovError::Reducible)?;
    if pi.iter().any(|&p| p < -1e-12 || !p.is_finite()) {
        return Err(MarkovError::Reducible);
    }
    Ok(pi.map(|p| p.max(0.0)))
}
