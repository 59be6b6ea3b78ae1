//! Mean-square stabilizer certificates.
//!
//! A gain pair `(Θ₁, Θ₂)` is certified by solving, for `k = 1` then `k = 2`,
//!
//! ```text
//! Λ[Σ_k](i) + A_kᶿ(i)ᵀ Σ_k(i) + Σ_k(i) A_kᶿ(i) + C_kᶿ(i)ᵀ Σ₁(i) C_kᶿ(i) = −I
//! ```
//!
//! with `A_kᶿ = A_k + B_kΘ_k`, `C_kᶿ = C_k + D_kΘ_k`, and checking that every
//! `Σ_k(i)` is positive definite. The `k = 1` system contains `Σ₁` on both
//! sides and is solved on its own; the `k = 2` system then takes `Σ₁` as data.

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{max_eigenvalue, min_eigenvalue, symmetrize, to_rows};
use crate::markov::lambda_apply;
use crate::model::DecomposedModel;
use crate::{Mat, DEVIATION, MEAN};

/// Eigenvalue threshold for positive definiteness of `Σ`.
pub const SIGMA_PD_TOL: f64 = 1e-10;
/// Tolerance for the negative-semidefinite residual check.
pub const RESIDUAL_TOL: f64 = 1e-8;

/// Feedback gains indexed `[regime][k]`, each `m×n`.
pub type RegimeGains = Vec<[Mat; 2]>;

/// The all-zero gain pair.
pub fn zero_gains(model: &DecomposedModel) -> RegimeGains {
    (0..model.m0())
        .map(|_| [Mat::zeros(model.m(), model.n()), Mat::zeros(model.m(), model.n())])
        .collect()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StabilityError {
    #[error("gain for regime {regime}, k={k} has shape {got}, expected {expected}")]
    GainShape {
        regime: usize,
        k: usize,
        got: String,
        expected: String,
    },
    #[error("non-finite gain for regime {regime}, k={k}")]
    NonFiniteGain { regime: usize, k: usize },
    #[error("coupled Lyapunov system for k={k} is singular")]
    SingularSystem { k: usize },
    #[error("Σ_{k}({regime}) is not positive definite (min eigenvalue {min_eigenvalue:e})")]
    Infeasible {
        k: usize,
        regime: usize,
        min_eigenvalue: f64,
    },
}

/// Positive-definite `Σ₁, Σ₂` with the decay rate `δ*` they imply.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovCertificate {
    /// `sigma[k][i]`.
    pub sigma: [Vec<Mat>; 2],
    pub delta_star: f64,
}

#[derive(Serialize)]
struct CertificateJson {
    delta_star: f64,
    sigma_1: Vec<Vec<Vec<f64>>>,
    sigma_2: Vec<Vec<Vec<f64>>>,
    min_eigenvalue: f64,
}

impl LyapunovCertificate {
    pub fn min_eigenvalue(&self) -> f64 {
        self.sigma
            .iter()
            .flatten()
            .map(min_eigenvalue)
            .fold(f64::INFINITY, f64::min)
    }

    /// JSON value with row-major matrices.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(CertificateJson {
            delta_star: self.delta_star,
            sigma_1: self.sigma[DEVIATION].iter().map(to_rows).collect(),
            sigma_2: self.sigma[MEAN].iter().map(to_rows).collect(),
            min_eigenvalue: self.min_eigenvalue(),
        })
        .expect("certificate serializes")
    }
}

fn check_gains(model: &DecomposedModel, gains: &RegimeGains) -> Result<(), StabilityError> {
    let (n, m) = (model.n(), model.m());
    if gains.len() != model.m0() {
        return Err(StabilityError::GainShape {
            regime: gains.len(),
            k: 0,
            got: format!("{} regimes", gains.len()),
            expected: format!("{} regimes", model.m0()),
        });
    }
    for (i, pair) in gains.iter().enumerate() {
        for (k, g) in pair.iter().enumerate() {
            if g.shape() != (m, n) {
                return Err(StabilityError::GainShape {
                    regime: i,
                    k: k + 1,
                    got: format!("{}x{}", g.nrows(), g.ncols()),
                    expected: format!("{m}x{n}"),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(StabilityError::NonFiniteGain { regime: i, k: k + 1 });
            }
        }
    }
    Ok(())
}

fn closed_loop(model: &DecomposedModel, gains: &RegimeGains, i: usize, k: usize) -> (Mat, Mat) {
    let sub = model.sub(i, k);
    (&sub.a + &sub.b * &gains[i][k], &sub.c + &sub.d * &gains[i][k])
}

/// Solves the coupled Lyapunov equations with right-hand side `−I` and
/// returns a certificate when both solutions are positive definite.
pub fn solve_coupled_lyapunov(
    model: &DecomposedModel,
    gains: &RegimeGains,
) -> Result<LyapunovCertificate, StabilityError> {
    solve_coupled_lyapunov_scaled(model, gains, 1.0)
}

/// As [`solve_coupled_lyapunov`] with right-hand side `−scale·I`.
pub fn solve_coupled_lyapunov_scaled(
    model: &DecomposedModel,
    gains: &RegimeGains,
    scale: f64,
) -> Result<LyapunovCertificate, StabilityError> {
    check_gains(model, gains)?;
    let sigma1 = solve_block(model, gains, DEVIATION, scale, None)?;
    let sigma2 = solve_block(model, gains, MEAN, scale, Some(&sigma1))?;
    for (k, family) in [&sigma1, &sigma2].into_iter().enumerate() {
        for (i, s) in family.iter().enumerate() {
            let lam = min_eigenvalue(s);
            if !(lam >= SIGMA_PD_TOL) {
                return Err(StabilityError::Infeasible {
                    k: k + 1,
                    regime: i,
                    min_eigenvalue: lam,
                });
            }
        }
    }
    let mut cert = LyapunovCertificate {
        sigma: [sigma1, sigma2],
        delta_star: 0.0,
    };
    // Scaling the right-hand side scales every Σ, so normalize to keep δ*
    // defined relative to −I.
    cert.delta_star = scale * decay_rate(&cert);
    Ok(cert)
}

fn solve_block(
    model: &DecomposedModel,
    gains: &RegimeGains,
    k: usize,
    scale: f64,
    sigma1: Option<&[Mat]>,
) -> Result<Vec<Mat>, StabilityError> {
    let n = model.n();
    let m0 = model.m0();
    let nn = n * n;
    let gen = model.generator();
    let eye_n = Mat::identity(n, n);
    let mut sys = DMatrix::<f64>::zeros(m0 * nn, m0 * nn);
    let mut rhs = nalgebra::DVector::<f64>::zeros(m0 * nn);
    for i in 0..m0 {
        let (acl, ccl) = closed_loop(model, gains, i, k);
        let at = acl.transpose();
        // vec(AᵀΣ + ΣA) = (I⊗Aᵀ + Aᵀ⊗I) vec Σ, column-major.
        let mut diag = eye_n.kronecker(&at) + at.kronecker(&eye_n);
        let mut r = Mat::identity(n, n) * -scale;
        match sigma1 {
            None => {
                let ct = ccl.transpose();
                diag += ct.kronecker(&ct);
            }
            Some(s1) => r -= ccl.transpose() * &s1[i] * &ccl,
        }
        for j in 0..m0 {
            let rate = gen.rate(i, j);
            let mut block = sys.view_mut((i * nn, j * nn), (nn, nn));
            if i == j {
                block += &diag;
            }
            if rate != 0.0 {
                for d in 0..nn {
                    block[(d, d)] += rate;
                }
            }
        }
        rhs.rows_mut(i * nn, nn).copy_from(&nalgebra::DVector::from_column_slice(r.as_slice()));
    }
    let lu = sys.lu();
    let sol = lu.solve(&rhs).ok_or(StabilityError::SingularSystem { k: k + 1 })?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(StabilityError::SingularSystem { k: k + 1 });
    }
    Ok((0..m0)
        .map(|i| symmetrize(&Mat::from_column_slice(n, n, &sol.as_slice()[i * nn..(i + 1) * nn])))
        .collect())
}

/// `δ* = 1 / max_{k,i} λ_max(Σ_k(i))`.
pub fn decay_rate(cert: &LyapunovCertificate) -> f64 {
    let lmax = cert
        .sigma
        .iter()
        .flatten()
        .map(max_eigenvalue)
        .fold(f64::NEG_INFINITY, f64::max);
    1.0 / lmax
}

/// Largest eigenvalue over `(i, k)` of
/// `Λ[Σ_k] + A_kᶿᵀΣ_k + Σ_kA_kᶿ + C_kᶿᵀΣ₁C_kᶿ + δ*·Σ_k`.
///
/// A valid certificate has this at most [`RESIDUAL_TOL`].
pub fn certificate_residual(model: &DecomposedModel, gains: &RegimeGains, cert: &LyapunovCertificate) -> f64 {
    let n = model.n();
    let mut worst = f64::NEG_INFINITY;
    for k in [DEVIATION, MEAN] {
        for i in 0..model.m0() {
            let (acl, ccl) = closed_loop(model, gains, i, k);
            let s = &cert.sigma[k][i];
            let res = lambda_apply(model.generator(), cert.sigma[k].iter(), i, n, n)
                + acl.transpose() * s
                + s * &acl
                + ccl.transpose() * &cert.sigma[DEVIATION][i] * &ccl
                + s * cert.delta_star;
            worst = worst.max(max_eigenvalue(&res));
        }
    }
    worst
}

/// Stabilizer test; `(A2)'` is `check_stabilizer(model, &zero_gains(model))`.
pub fn check_stabilizer(model: &DecomposedModel, gains: &RegimeGains) -> (bool, Option<LyapunovCertificate>) {
    match solve_coupled_lyapunov(model, gains) {
        Ok(cert) => (true, Some(cert)),
        Err(_) => (false, None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::validate_generator;
    use crate::model::{decompose, ForcingSignals, RawCoefficients, RegimeCoefficients};

    fn scalar(a: f64) -> DecomposedModel {
        let mut c = RegimeCoefficients::zeros(1, 1);
        c.a[(0, 0)] = a;
        c.q[(0, 0)] = 1.0;
        let raw = RawCoefficients::new(1, 1, vec![c], validate_generator(&Mat::zeros(1, 1)).unwrap()).unwrap();
        decompose(&raw, &ForcingSignals::homogeneous()).unwrap()
    }

    #[test]
    fn stable_scalar_certificate() {
        let m = scalar(-1.0);
        let cert = solve_coupled_lyapunov(&m, &zero_gains(&m)).unwrap();
        assert!((cert.sigma[0][0][(0, 0)] - 0.5).abs() < 1e-14);
        assert!((cert.sigma[1][0][(0, 0)] - 0.5).abs() < 1e-14);
        assert!((cert.delta_star - 2.0).abs() < 1e-12);
        assert!(certificate_residual(&m, &zero_gains(&m), &cert) <= RESIDUAL_TOL);
        assert!(check_stabilizer(&m, &zero_gains(&m)).0);
    }

    #[test]
    fn unstable_scalar_is_infeasible() {
        let m = scalar(1.0);
        let err = solve_coupled_lyapunov(&m, &zero_gains(&m)).unwrap_err();
        match err {
            StabilityError::Infeasible { min_eigenvalue, .. } => assert!((min_eigenvalue + 0.5).abs() < 1e-14),
            other => panic!("unexpected {other:?}"),
        }
        assert!(!check_stabilizer(&m, &zero_gains(&m)).0);
    }

    #[test]
    fn regime_constant_data_gives_half_identity() {
        let gen = validate_generator(&Mat::from_row_slice(3, 3, &[-2.0, 1.0, 1.0, 0.5, -1.0, 0.5, 1.0, 1.0, -2.0])).unwrap();
        let mut c = RegimeCoefficients::zeros(2, 2);
        c.b = Mat::identity(2, 2);
        c.q = Mat::identity(2, 2);
        let raw = RawCoefficients::new(2, 2, vec![c.clone(), c.clone(), c], gen).unwrap();
        let m = decompose(&raw, &ForcingSignals::homogeneous()).unwrap();
        // Θ = −I makes A + BΘ = −I.
        let gains: RegimeGains = (0..3).map(|_| [-Mat::identity(2, 2), -Mat::identity(2, 2)]).collect();
        let cert = solve_coupled_lyapunov(&m, &gains).unwrap();
        for k in 0..2 {
            for s in &cert.sigma[k] {
                assert!((s - Mat::identity(2, 2) * 0.5).norm() < 1e-13);
            }
        }
    }

    #[test]
    fn delta_uses_largest_eigenvalue() {
        let cert = LyapunovCertificate {
            sigma: [
                vec![Mat::identity(2, 2) * 0.5, Mat::identity(2, 2) * 2.0],
                vec![Mat::identity(2, 2) * 0.25, Mat::identity(2, 2) * 0.25],
            ],
            delta_star: 0.0,
        };
        assert!((decay_rate(&cert) - 0.5).abs() < 1e-15);
        let quarter = LyapunovCertificate {
            sigma: [vec![Mat::identity(2, 2) * 0.25], vec![Mat::identity(2, 2) * 0.25]],
            delta_star: 0.0,
        };
        assert!((decay_rate(&quarter) - 4.0).abs() < 1e-14);
    }

    #[test]
    fn scaling_rhs_scales_sigma() {
        let m = scalar(-0.7);
        let g = zero_gains(&m);
        let base = solve_coupled_lyapunov(&m, &g).unwrap();
        let scaled = solve_coupled_lyapunov_scaled(&m, &g, 3.0).unwrap();
        assert!((scaled.sigma[0][0][(0, 0)] - 3.0 * base.sigma[0][0][(0, 0)]).abs() < 1e-13);
        assert!((scaled.delta_star - base.delta_star).abs() < 1e-12);
    }

    #[test]
    fn diffusion_can_destroy_stability() {
        // a = −1 with c = 2: drift 2a + c² = 2 > 0 for the deviation channel.
        let mut c = RegimeCoefficients::zeros(1, 1);
        c.a[(0, 0)] = -1.0;
        c.c[(0, 0)] = 2.0;
        c.q[(0, 0)] = 1.0;
        let raw = RawCoefficients::new(1, 1, vec![c], validate_generator(&Mat::zeros(1, 1)).unwrap()).unwrap();
        let m = decompose(&raw, &ForcingSignals::homogeneous()).unwrap();
        assert!(!check_stabilizer(&m, &zero_gains(&m)).0);
    }

    #[test]
    fn gain_shape_checked() {
        let m = scalar(-1.0);
        let bad: RegimeGains = vec![[Mat::zeros(2, 1), Mat::zeros(1, 1)]];
        assert!(matches!(solve_coupled_lyapunov(&m, &bad), Err(StabilityError::GainShape { .. })));
    }
}
