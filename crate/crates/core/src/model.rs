//! Raw mean-field coefficients, forcing signals and the orthogonal
//! decomposition into the deviation (`k = 1`) and mean (`k = 2`) subsystems.
//!
//! For every coefficient family `Γ ∈ {A, B, C, D, Q, R, S}` the decomposition
//! sets `Γ₁ = Γ` and `Γ₂ = Γ + Γ̄`. Forcing is deterministic in `(t, regime)`,
//! so its conditional mean given the regime history is itself: `b` lives
//! entirely in the mean subsystem and `σ` is shared by both.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{all_finite, is_symmetric, min_eigenvalue, spd_solve};
use crate::markov::GeneratorMatrix;
use crate::{Mat, Vector, DEVIATION, MEAN};

/// Symmetry tolerance for `Q`, `Q̄`, `R`, `R̄`.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Smallest eigenvalue accepted as positive in the definiteness check.
pub const PD_MARGIN: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("regime {regime}: block {block} has shape {got}, expected {expected}")]
    Shape {
        regime: usize,
        block: &'static str,
        got: String,
        expected: String,
    },
    #[error("regime {regime}: block {block} has non-finite entries")]
    NonFinite { regime: usize, block: &'static str },
    #[error("regime {regime}: block {block} is not symmetric")]
    NotSymmetric { regime: usize, block: &'static str },
    #[error("expected {expected} regime blocks, got {got}")]
    RegimeCount { expected: usize, got: usize },
    #[error("signal {signal}: {reason}")]
    Signal { signal: &'static str, reason: String },
    #[error("positive definiteness fails in regime {regime}, subsystem k={k}: margin {margin:e}")]
    AssumptionViolated { regime: usize, k: usize, margin: f64 },
    #[error("signal {signal} is outside the supported forcing classes: {reason}")]
    Unclassifiable { signal: &'static str, reason: String },
}

/// Per-regime mean-field coefficients.
///
/// Shapes: `A, Ā, C, C̄, Q, Q̄` are n×n; `B, B̄, D, D̄` are n×m; `S, S̄` are m×n;
/// `R, R̄` are m×m.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeCoefficients {
    pub a: Mat,
    pub a_bar: Mat,
    pub b: Mat,
    pub b_bar: Mat,
    pub c: Mat,
    pub c_bar: Mat,
    pub d: Mat,
    pub d_bar: Mat,
    pub q: Mat,
    pub q_bar: Mat,
    pub s: Mat,
    pub s_bar: Mat,
    pub r: Mat,
    pub r_bar: Mat,
}

impl RegimeCoefficients {
    /// All blocks zero except `R = I`.
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            a: Mat::zeros(n, n),
            a_bar: Mat::zeros(n, n),
            b: Mat::zeros(n, m),
            b_bar: Mat::zeros(n, m),
            c: Mat::zeros(n, n),
            c_bar: Mat::zeros(n, n),
            d: Mat::zeros(n, m),
            d_bar: Mat::zeros(n, m),
            q: Mat::zeros(n, n),
            q_bar: Mat::zeros(n, n),
            s: Mat::zeros(m, n),
            s_bar: Mat::zeros(m, n),
            r: Mat::identity(m, m),
            r_bar: Mat::zeros(m, m),
        }
    }

    fn blocks(&self) -> [(&'static str, &Mat, BlockShape); 14] {
        use BlockShape::*;
        [
            ("A", &self.a, NN),
            ("A_bar", &self.a_bar, NN),
            ("B", &self.b, NM),
            ("B_bar", &self.b_bar, NM),
            ("C", &self.c, NN),
            ("C_bar", &self.c_bar, NN),
            ("D", &self.d, NM),
            ("D_bar", &self.d_bar, NM),
            ("Q", &self.q, NN),
            ("Q_bar", &self.q_bar, NN),
            ("S", &self.s, MN),
            ("S_bar", &self.s_bar, MN),
            ("R", &self.r, MM),
            ("R_bar", &self.r_bar, MM),
        ]
    }
}

#[derive(Clone, Copy)]
enum BlockShape {
    NN,
    NM,
    MN,
    MM,
}

/// Validated raw coefficients of the mean-field state equation and cost.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCoefficients {
    n: usize,
    m: usize,
    regimes: Vec<RegimeCoefficients>,
    generator: GeneratorMatrix,
}

impl RawCoefficients {
    pub fn new(
        n: usize,
        m: usize,
        regimes: Vec<RegimeCoefficients>,
        generator: GeneratorMatrix,
    ) -> Result<Self, ModelError> {
        if regimes.len() != generator.m0() {
            return Err(ModelError::RegimeCount {
                expected: generator.m0(),
                got: regimes.len(),
            });
        }
        for (i, reg) in regimes.iter().enumerate() {
            for (name, block, shape) in reg.blocks() {
                let (rows, cols) = match shape {
                    BlockShape::NN => (n, n),
                    BlockShape::NM => (n, m),
                    BlockShape::MN => (m, n),
                    BlockShape::MM => (m, m),
                };
                if block.shape() != (rows, cols) {
                    return Err(ModelError::Shape {
                        regime: i,
                        block: name,
                        got: format!("{}x{}", block.nrows(), block.ncols()),
                        expected: format!("{rows}x{cols}"),
                    });
                }
                if !all_finite(block) {
                    return Err(ModelError::NonFinite {
                        regime: i,
                        block: name,
                    });
                }
                if matches!(name, "Q" | "Q_bar" | "R" | "R_bar") && !is_symmetric(block, SYMMETRY_TOL) {
                    return Err(ModelError::NotSymmetric {
                        regime: i,
                        block: name,
                    });
                }
            }
        }
        Ok(Self {
            n,
            m,
            regimes,
            generator,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn m0(&self) -> usize {
        self.generator.m0()
    }

    pub fn regimes(&self) -> &[RegimeCoefficients] {
        &self.regimes
    }

    pub fn generator(&self) -> &GeneratorMatrix {
        &self.generator
    }
}

/// A deterministic vector-valued signal of time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Signal {
    Zero,
    Constant {
        value: Vec<f64>,
    },
    /// `amplitude · sin(omega·t + phase)`.
    Sinusoid {
        amplitude: Vec<f64>,
        omega: f64,
        #[serde(default)]
        phase: f64,
    },
    /// `v0 · exp(−rate·t)`.
    ExpDecay {
        v0: Vec<f64>,
        rate: f64,
    },
    /// `values[0]` before `breakpoints[0]`, `values[j]` on `[breakpoints[j-1], breakpoints[j])`,
    /// and the last value from the final breakpoint on.
    PiecewiseConstant {
        breakpoints: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
}

/// Integrability class of one signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum SignalClass {
    Zero,
    SquareIntegrable,
    Bounded,
}

impl Signal {
    pub fn eval(&self, t: f64, dim: usize) -> Vector {
        match self {
            Signal::Zero => Vector::zeros(dim),
            Signal::Constant { value } => Vector::from_column_slice(value),
            Signal::Sinusoid {
                amplitude,
                omega,
                phase,
            } => Vector::from_column_slice(amplitude) * (omega * t + phase).sin(),
            Signal::ExpDecay { v0, rate } => Vector::from_column_slice(v0) * (-rate * t).exp(),
            Signal::PiecewiseConstant {
                breakpoints,
                values,
            } => {
                let k = breakpoints.partition_point(|&b| b <= t);
                Vector::from_column_slice(&values[k])
            }
        }
    }

    fn vectors(&self) -> Vec<&[f64]> {
        match self {
            Signal::Zero => vec![],
            Signal::Constant { value } => vec![value],
            Signal::Sinusoid { amplitude, .. } => vec![amplitude],
            Signal::ExpDecay { v0, .. } => vec![v0],
            Signal::PiecewiseConstant { values, .. } => values.iter().map(Vec::as_slice).collect(),
        }
    }

    fn validate(&self, name: &'static str, dim: usize) -> Result<(), ModelError> {
        let bad = |reason: String| ModelError::Signal { signal: name, reason };
        for v in self.vectors() {
            if v.len() != dim {
                return Err(bad(format!("vector of length {} where {dim} is required", v.len())));
            }
        }
        match self {
            Signal::ExpDecay { rate, .. } if !(*rate > 0.0) => {
                Err(bad(format!("exp_decay rate must be positive, got {rate}")))
            }
            Signal::Sinusoid { omega, phase, .. } if !omega.is_finite() || !phase.is_finite() => {
                Err(bad("non-finite sinusoid parameters".into()))
            }
            Signal::PiecewiseConstant {
                breakpoints,
                values,
            } => {
                if values.len() != breakpoints.len() + 1 {
                    return Err(bad(format!(
                        "{} values for {} breakpoints (need one more value than breakpoints)",
                        values.len(),
                        breakpoints.len()
                    )));
                }
                if breakpoints.windows(2).any(|w| !(w[0] < w[1])) || breakpoints.iter().any(|b| !b.is_finite()) {
                    return Err(bad("breakpoints must be finite and strictly increasing".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn is_zero_vector(v: &[f64]) -> bool {
        v.iter().all(|&x| x == 0.0)
    }

    fn class(&self) -> Result<SignalClass, String> {
        if self.vectors().iter().flat_map(|v| v.iter()).any(|x| !x.is_finite()) {
            return Err("non-finite values".into());
        }
        Ok(match self {
            Signal::Zero => SignalClass::Zero,
            Signal::Constant { value } if Self::is_zero_vector(value) => SignalClass::Zero,
            Signal::Constant { .. } => SignalClass::Bounded,
            Signal::Sinusoid { amplitude, .. } if Self::is_zero_vector(amplitude) => SignalClass::Zero,
            Signal::Sinusoid { .. } => SignalClass::Bounded,
            Signal::ExpDecay { v0, .. } if Self::is_zero_vector(v0) => SignalClass::Zero,
            Signal::ExpDecay { rate, .. } if *rate > 0.0 => SignalClass::SquareIntegrable,
            Signal::ExpDecay { rate, .. } => return Err(format!("exp_decay with non-decaying rate {rate}")),
            Signal::PiecewiseConstant { values, .. } => {
                if values.iter().all(|v| Self::is_zero_vector(v)) {
                    SignalClass::Zero
                } else if values.last().is_some_and(|v| Self::is_zero_vector(v)) {
                    SignalClass::SquareIntegrable
                } else {
                    SignalClass::Bounded
                }
            }
        })
    }
}

/// A signal shared by all regimes or given per regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SignalSpec {
    PerRegime { per_regime: Vec<Signal> },
    Shared(Signal),
}

impl Default for SignalSpec {
    fn default() -> Self {
        SignalSpec::Shared(Signal::Zero)
    }
}

impl From<Signal> for SignalSpec {
    fn from(s: Signal) -> Self {
        SignalSpec::Shared(s)
    }
}

impl SignalSpec {
    pub fn eval(&self, t: f64, regime: usize, dim: usize) -> Vector {
        match self {
            SignalSpec::Shared(s) => s.eval(t, dim),
            SignalSpec::PerRegime { per_regime } => per_regime[regime].eval(t, dim),
        }
    }

    fn signals(&self) -> &[Signal] {
        match self {
            SignalSpec::Shared(s) => std::slice::from_ref(s),
            SignalSpec::PerRegime { per_regime } => per_regime,
        }
    }

    pub fn is_regime_dependent(&self) -> bool {
        matches!(self, SignalSpec::PerRegime { .. })
    }

    /// `max_i |s(t, i)|²`.
    fn max_sq_norm(&self, t: f64, dim: usize) -> f64 {
        self.signals()
            .iter()
            .map(|s| s.eval(t, dim).norm_squared())
            .fold(0.0, f64::max)
    }
}

/// Which forcing term a value belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    B,
    Sigma,
    Q,
    QBar,
    R,
    RBar,
}

impl Channel {
    pub const ALL: [Channel; 6] = [
        Channel::B,
        Channel::Sigma,
        Channel::Q,
        Channel::QBar,
        Channel::R,
        Channel::RBar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Channel::B => "b",
            Channel::Sigma => "sigma",
            Channel::Q => "q",
            Channel::QBar => "q_bar",
            Channel::R => "r",
            Channel::RBar => "r_bar",
        }
    }
}

/// Forcing terms `b, σ, q, q̄` (ℝⁿ) and `r, r̄` (ℝᵐ).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForcingSignals {
    #[serde(default)]
    pub b: SignalSpec,
    #[serde(default)]
    pub sigma: SignalSpec,
    #[serde(default)]
    pub q: SignalSpec,
    #[serde(default)]
    pub q_bar: SignalSpec,
    #[serde(default)]
    pub r: SignalSpec,
    #[serde(default)]
    pub r_bar: SignalSpec,
}

impl ForcingSignals {
    /// All-zero forcing.
    pub fn homogeneous() -> Self {
        Self::default()
    }

    pub fn spec(&self, ch: Channel) -> &SignalSpec {
        match ch {
            Channel::B => &self.b,
            Channel::Sigma => &self.sigma,
            Channel::Q => &self.q,
            Channel::QBar => &self.q_bar,
            Channel::R => &self.r,
            Channel::RBar => &self.r_bar,
        }
    }

    pub fn spec_mut(&mut self, ch: Channel) -> &mut SignalSpec {
        match ch {
            Channel::B => &mut self.b,
            Channel::Sigma => &mut self.sigma,
            Channel::Q => &mut self.q,
            Channel::QBar => &mut self.q_bar,
            Channel::R => &mut self.r,
            Channel::RBar => &mut self.r_bar,
        }
    }

    fn dim(ch: Channel, n: usize, m: usize) -> usize {
        match ch {
            Channel::R | Channel::RBar => m,
            _ => n,
        }
    }

    /// Checks vector lengths, regime counts and per-signal parameters.
    pub fn validate(&self, n: usize, m: usize, m0: usize) -> Result<(), ModelError> {
        for ch in Channel::ALL {
            let spec = self.spec(ch);
            if let SignalSpec::PerRegime { per_regime } = spec {
                if per_regime.len() != m0 {
                    return Err(ModelError::Signal {
                        signal: ch.name(),
                        reason: format!("{} per-regime entries for {m0} regimes", per_regime.len()),
                    });
                }
            }
            for s in spec.signals() {
                s.validate(ch.name(), Self::dim(ch, n, m))?;
            }
        }
        Ok(())
    }

    pub fn eval(&self, ch: Channel, t: f64, regime: usize, n: usize, m: usize) -> Vector {
        self.spec(ch).eval(t, regime, Self::dim(ch, n, m))
    }

    /// Multiplies every signal by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let scale_vec = |v: &Vec<f64>| v.iter().map(|x| x * c).collect::<Vec<_>>();
        let scale = |s: &Signal| match s {
            Signal::Zero => Signal::Zero,
            Signal::Constant { value } => Signal::Constant {
                value: scale_vec(value),
            },
            Signal::Sinusoid {
                amplitude,
                omega,
                phase,
            } => Signal::Sinusoid {
                amplitude: scale_vec(amplitude),
                omega: *omega,
                phase: *phase,
            },
            Signal::ExpDecay { v0, rate } => Signal::ExpDecay {
                v0: scale_vec(v0),
                rate: *rate,
            },
            Signal::PiecewiseConstant {
                breakpoints,
                values,
            } => Signal::PiecewiseConstant {
                breakpoints: breakpoints.clone(),
                values: values.iter().map(scale_vec).collect(),
            },
        };
        let mut out = self.clone();
        for ch in Channel::ALL {
            let spec = match self.spec(ch) {
                SignalSpec::Shared(s) => SignalSpec::Shared(scale(s)),
                SignalSpec::PerRegime { per_regime } => SignalSpec::PerRegime {
                    per_regime: per_regime.iter().map(scale).collect(),
                },
            };
            *out.spec_mut(ch) = spec;
        }
        out
    }
}

/// Integrability class of the forcing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ForcingClass {
    /// Every signal is identically zero.
    Homogeneous,
    /// Every signal is square-integrable on `[0, ∞)`.
    Integrable,
    /// Every signal is bounded, so both the discounted-convolution bound and
    /// the bounded-average condition hold.
    LocalIntegrable,
}

/// Classifies forcing by the weakest class among its signals.
pub fn classify_forcing(signals: &ForcingSignals) -> Result<ForcingClass, ModelError> {
    let mut worst = SignalClass::Zero;
    for ch in Channel::ALL {
        for s in signals.spec(ch).signals() {
            let class = s.class().map_err(|reason| ModelError::Unclassifiable {
                signal: ch.name(),
                reason,
            })?;
            worst = worst.max(class);
        }
    }
    Ok(match worst {
        SignalClass::Zero => ForcingClass::Homogeneous,
        SignalClass::SquareIntegrable => ForcingClass::Integrable,
        SignalClass::Bounded => ForcingClass::LocalIntegrable,
    })
}

/// `ξ(t) = |b|² + |σ|² + |q|² + |r|² + |q̄|² + |r̄|²`.
///
/// Regime-dependent signals contribute their largest value over regimes.
pub fn xi(signals: &ForcingSignals, t: f64, n: usize, m: usize) -> f64 {
    Channel::ALL
        .iter()
        .map(|&ch| signals.spec(ch).max_sq_norm(t, ForcingSignals::dim(ch, n, m)))
        .sum()
}

/// Coefficients of one subsystem in one regime.
#[derive(Debug, Clone, PartialEq)]
pub struct Subsystem {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub d: Mat,
    pub q: Mat,
    pub s: Mat,
    pub r: Mat,
}

/// The two-subsystem form of the problem.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedModel {
    n: usize,
    m: usize,
    subsystems: Vec<[Subsystem; 2]>,
    generator: GeneratorMatrix,
    signals: ForcingSignals,
}

/// Applies `Γ₁ = Γ`, `Γ₂ = Γ + Γ̄` to every family and attaches the forcing.
pub fn decompose(raw: &RawCoefficients, signals: &ForcingSignals) -> Result<DecomposedModel, ModelError> {
    signals.validate(raw.n(), raw.m(), raw.m0())?;
    let subsystems = raw
        .regimes()
        .iter()
        .map(|c| {
            [
                Subsystem {
                    a: c.a.clone(),
                    b: c.b.clone(),
                    c: c.c.clone(),
                    d: c.d.clone(),
                    q: c.q.clone(),
                    s: c.s.clone(),
                    r: c.r.clone(),
                },
                Subsystem {
                    a: &c.a + &c.a_bar,
                    b: &c.b + &c.b_bar,
                    c: &c.c + &c.c_bar,
                    d: &c.d + &c.d_bar,
                    q: &c.q + &c.q_bar,
                    s: &c.s + &c.s_bar,
                    r: &c.r + &c.r_bar,
                },
            ]
        })
        .collect();
    Ok(DecomposedModel {
        n: raw.n(),
        m: raw.m(),
        subsystems,
        generator: raw.generator().clone(),
        signals: signals.clone(),
    })
}

impl DecomposedModel {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn m0(&self) -> usize {
        self.generator.m0()
    }

    pub fn generator(&self) -> &GeneratorMatrix {
        &self.generator
    }

    /// Subsystem `k` (0 = deviation, 1 = mean) in regime `i`.
    pub fn sub(&self, i: usize, k: usize) -> &Subsystem {
        &self.subsystems[i][k]
    }

    pub fn signals(&self) -> &ForcingSignals {
        &self.signals
    }

    /// Same coefficients with different forcing.
    pub fn with_signals(&self, signals: ForcingSignals) -> Result<Self, ModelError> {
        signals.validate(self.n, self.m, self.m0())?;
        Ok(Self {
            signals,
            ..self.clone()
        })
    }

    /// Maps every subsystem block through `f`; used to build variants in tests
    /// and experiments (for instance a sign-flipped drift).
    pub fn map_subsystems(&self, mut f: impl FnMut(usize, usize, &mut Subsystem)) -> Self {
        let mut out = self.clone();
        for (i, pair) in out.subsystems.iter_mut().enumerate() {
            for (k, sub) in pair.iter_mut().enumerate() {
                f(i, k, sub);
            }
        }
        out
    }

    pub fn is_homogeneous(&self) -> bool {
        matches!(classify_forcing(&self.signals), Ok(ForcingClass::Homogeneous))
    }

    /// `b₁ = 0`, `b₂ = b`.
    pub fn b_k(&self, k: usize, t: f64, i: usize) -> Vector {
        if k == DEVIATION {
            Vector::zeros(self.n)
        } else {
            self.signals.eval(Channel::B, t, i, self.n, self.m)
        }
    }

    pub fn sigma(&self, t: f64, i: usize) -> Vector {
        self.signals.eval(Channel::Sigma, t, i, self.n, self.m)
    }

    /// `q₁ = q`, `q₂ = q + q̄`.
    pub fn q_k(&self, k: usize, t: f64, i: usize) -> Vector {
        let q = self.signals.eval(Channel::Q, t, i, self.n, self.m);
        if k == MEAN {
            q + self.signals.eval(Channel::QBar, t, i, self.n, self.m)
        } else {
            q
        }
    }

    /// `r₁ = r`, `r₂ = r + r̄`.
    pub fn r_k(&self, k: usize, t: f64, i: usize) -> Vector {
        let r = self.signals.eval(Channel::R, t, i, self.n, self.m);
        if k == MEAN {
            r + self.signals.eval(Channel::RBar, t, i, self.n, self.m)
        } else {
            r
        }
    }
}

/// Definiteness margins for one `(regime, k)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PdMargin {
    pub regime: usize,
    /// Subsystem label, 1 (deviation) or 2 (mean).
    pub k: usize,
    pub r_min_eigenvalue: f64,
    /// `None` when `R_k` is not positive definite, so the complement is undefined.
    pub schur_min_eigenvalue: Option<f64>,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub margins: Vec<PdMargin>,
    pub passed: bool,
}

/// Margins of `R_k ≻ 0` and `Q_k − S_kᵀ R_k⁻¹ S_k ≻ 0` for every `(i, k)`.
pub fn assumption_report(model: &DecomposedModel) -> AssumptionReport {
    let mut margins = Vec::new();
    for i in 0..model.m0() {
        for k in [DEVIATION, MEAN] {
            let sub = model.sub(i, k);
            let r_min = min_eigenvalue(&sub.r);
            let schur_min = if r_min > 0.0 {
                spd_solve(&sub.r, &sub.s).map(|rinv_s| min_eigenvalue(&(&sub.q - sub.s.transpose() * rinv_s)))
            } else {
                None
            };
            margins.push(PdMargin {
                regime: i,
                k: k + 1,
                r_min_eigenvalue: r_min,
                schur_min_eigenvalue: schur_min,
                margin: schur_min.map_or(r_min.min(0.0), |s| r_min.min(s)),
            });
        }
    }
    let passed = margins.iter().all(|m| m.margin > PD_MARGIN);
    AssumptionReport { margins, passed }
}

/// Errors on the first `(i, k)` whose margin does not exceed [`PD_MARGIN`].
pub fn check_positive_definiteness(model: &DecomposedModel) -> Result<AssumptionReport, ModelError> {
    let report = assumption_report(model);
    if let Some(bad) = report.margins.iter().find(|m| !(m.margin > PD_MARGIN)) {
        return Err(ModelError::AssumptionViolated {
            regime: bad.regime,
            k: bad.k,
            margin: bad.margin,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::validate_generator;

    fn scalar_raw(a: f64, a_bar: f64, q: f64, s: f64, r: f64) -> RawCoefficients {
        let mut c = RegimeCoefficients::zeros(1, 1);
        c.a[(0, 0)] = a;
        c.a_bar[(0, 0)] = a_bar;
        c.b[(0, 0)] = 1.0;
        c.q[(0, 0)] = q;
        c.s[(0, 0)] = s;
        c.r[(0, 0)] = r;
        RawCoefficients::new(1, 1, vec![c], validate_generator(&Mat::zeros(1, 1)).unwrap()).unwrap()
    }

    #[test]
    fn barred_zero_keeps_blocks() {
        let raw = scalar_raw(-1.5, 0.0, 1.0, 0.0, 1.0);
        let model = decompose(&raw, &ForcingSignals::homogeneous()).unwrap();
        for k in 0..2 {
            assert_eq!(model.sub(0, k).a, raw.regimes()[0].a);
            assert_eq!(model.sub(0, k).q, raw.regimes()[0].q);
            assert_eq!(model.sub(0, k).r, raw.regimes()[0].r);
        }
    }

    #[test]
    fn mean_subsystem_adds_barred_blocks() {
        let raw = scalar_raw(1.0, 2.0, 1.0, 0.0, 1.0);
        let model = decompose(&raw, &ForcingSignals::homogeneous()).unwrap();
        assert_eq!(model.sub(0, DEVIATION).a[(0, 0)], 1.0);
        assert_eq!(model.sub(0, MEAN).a[(0, 0)], 3.0);
    }

    #[test]
    fn linear_forcing_decomposition() {
        let mut raw_c = RegimeCoefficients::zeros(2, 1);
        raw_c.q = Mat::identity(2, 2);
        let raw = RawCoefficients::new(2, 1, vec![raw_c], validate_generator(&Mat::zeros(1, 1)).unwrap()).unwrap();
        let signals = ForcingSignals {
            q: Signal::Constant { value: vec![1.0, 0.0] }.into(),
            q_bar: Signal::Constant { value: vec![0.0, 2.0] }.into(),
            b: Signal::Constant { value: vec![5.0, 5.0] }.into(),
            ..Default::default()
        };
        let model = decompose(&raw, &signals).unwrap();
        assert_eq!(model.q_k(DEVIATION, 0.0, 0).as_slice(), &[1.0, 0.0]);
        assert_eq!(model.q_k(MEAN, 0.0, 0).as_slice(), &[1.0, 2.0]);
        assert_eq!(model.b_k(DEVIATION, 0.0, 0).as_slice(), &[0.0, 0.0]);
        assert_eq!(model.b_k(MEAN, 0.0, 0).as_slice(), &[5.0, 5.0]);
    }

    #[test]
    fn shape_errors_name_the_block() {
        let mut c = RegimeCoefficients::zeros(2, 1);
        c.a = Mat::zeros(2, 3);
        let err = RawCoefficients::new(2, 1, vec![c], validate_generator(&Mat::zeros(1, 1)).unwrap()).unwrap_err();
        assert!(matches!(err, ModelError::Shape { block: "A", .. }));
    }

    #[test]
    fn asymmetric_cost_rejected() {
        let mut c = RegimeCoefficients::zeros(2, 1);
        c.q = Mat::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        let err = RawCoefficients::new(2, 1, vec![c], validate_generator(&Mat::zeros(1, 1)).unwrap()).unwrap_err();
        assert!(matches!(err, ModelError::NotSymmetric { block: "Q", .. }));
    }

    #[test]
    fn definiteness_examples() {
        let ok = decompose(&scalar_raw(-1.0, 0.0, 1.0, 0.0, 1.0), &ForcingSignals::homogeneous()).unwrap();
        let report = check_positive_definiteness(&ok).unwrap();
        assert!(report.margins.iter().all(|m| (m.margin - 1.0).abs() < 1e-14));

        let boundary = decompose(&scalar_raw(-1.0, 0.0, 1.0, 1.0, 1.0), &ForcingSignals::homogeneous()).unwrap();
        assert!(matches!(
            check_positive_definiteness(&boundary),
            Err(ModelError::AssumptionViolated { .. })
        ));

        let zero_q = decompose(&scalar_raw(-1.0, 0.0, 0.0, 0.0, 1.0), &ForcingSignals::homogeneous()).unwrap();
        assert!(check_positive_definiteness(&zero_q).is_err());
    }

    #[test]
    fn classification_examples() {
        assert_eq!(classify_forcing(&ForcingSignals::homogeneous()).unwrap(), ForcingClass::Homogeneous);
        let integrable = ForcingSignals {
            b: Signal::ExpDecay { v0: vec![1.0], rate: 0.5 }.into(),
            ..Default::default()
        };
        assert_eq!(classify_forcing(&integrable).unwrap(), ForcingClass::Integrable);
        let lic = ForcingSignals {
            q: Signal::Sinusoid { amplitude: vec![1.0], omega: 1.0, phase: 0.0 }.into(),
            ..Default::default()
        };
        assert_eq!(classify_forcing(&lic).unwrap(), ForcingClass::LocalIntegrable);
        let compact = ForcingSignals {
            r: Signal::PiecewiseConstant { breakpoints: vec![1.0, 2.0], values: vec![vec![1.0], vec![3.0], vec![0.0]] }.into(),
            ..Default::default()
        };
        assert_eq!(classify_forcing(&compact).unwrap(), ForcingClass::Integrable);
        let growing = ForcingSignals {
            b: Signal::ExpDecay { v0: vec![1.0], rate: -0.1 }.into(),
            ..Default::default()
        };
        assert!(matches!(classify_forcing(&growing), Err(ModelError::Unclassifiable { signal: "b", .. })));
    }

    #[test]
    fn mixed_classes_take_the_weakest() {
        let mixed = ForcingSignals {
            b: Signal::ExpDecay { v0: vec![1.0], rate: 1.0 }.into(),
            sigma: Signal::Constant { value: vec![0.3] }.into(),
            ..Default::default()
        };
        assert_eq!(classify_forcing(&mixed).unwrap(), ForcingClass::LocalIntegrable);
    }

    #[test]
    fn xi_examples() {
        assert_eq!(xi(&ForcingSignals::homogeneous(), 3.0, 2, 1), 0.0);
        let b34 = ForcingSignals {
            b: Signal::Constant { value: vec![3.0, 4.0] }.into(),
            ..Default::default()
        };
        assert!((xi(&b34, 1.7, 2, 1) - 25.0).abs() < 1e-12);
        let mixed = ForcingSignals {
            b: Signal::ExpDecay { v0: vec![1.0, 0.0], rate: 1.0 }.into(),
            q: Signal::Constant { value: vec![0.0, 2.0] }.into(),
            ..Default::default()
        };
        for t in [0.0, 0.5, 2.0] {
            assert!((xi(&mixed, t, 2, 1) - ((-2.0 * t).exp() + 4.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn per_regime_xi_uses_max() {
        let s = ForcingSignals {
            sigma: SignalSpec::PerRegime {
                per_regime: vec![Signal::Constant { value: vec![1.0] }, Signal::Constant { value: vec![2.0] }],
            },
            ..Default::default()
        };
        assert_eq!(xi(&s, 0.0, 1, 1), 4.0);
        assert_eq!(s.eval(Channel::Sigma, 0.0, 0, 1, 1)[0], 1.0);
    }

    #[test]
    fn piecewise_eval_and_validation() {
        let s = Signal::PiecewiseConstant { breakpoints: vec![1.0, 2.0], values: vec![vec![1.0], vec![2.0], vec![3.0]] };
        assert_eq!(s.eval(0.5, 1)[0], 1.0);
        assert_eq!(s.eval(1.0, 1)[0], 2.0);
        assert_eq!(s.eval(5.0, 1)[0], 3.0);
        let bad = Signal::PiecewiseConstant { breakpoints: vec![2.0, 1.0], values: vec![vec![1.0], vec![2.0], vec![3.0]] };
        assert!(bad.validate("b", 1).is_err());
        let bad_rate = Signal::ExpDecay { v0: vec![1.0], rate: 0.0 };
        assert!(bad_rate.validate("b", 1).is_err());
        assert!(Signal::Constant { value: vec![1.0, 2.0] }.validate("b", 1).is_err());
    }

    #[test]
    fn signal_json_is_strict() {
        let ok: Signal = serde_json::from_str(r#"{"kind":"exp_decay","v0":[1.0],"rate":2.0}"#).unwrap();
        assert_eq!(ok, Signal::ExpDecay { v0: vec![1.0], rate: 2.0 });
        assert!(serde_json::from_str::<Signal>(r#"{"kind":"constant","value":[1.0],"extra":1}"#).is_err());
        let spec: SignalSpec = serde_json::from_str(r#"{"per_regime":[{"kind":"zero"},{"kind":"zero"}]}"#).unwrap();
        assert!(spec.is_regime_dependent());
    }
}
