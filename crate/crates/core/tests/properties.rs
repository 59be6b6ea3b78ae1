use mflq::markov::{sample_regime_path, stationary_distribution, validate_generator};
use mflq::model::{decompose, ForcingSignals, RawCoefficients, RegimeCoefficients};
use mflq::riccati::integrate_riccati;
use mflq::{Mat, DEVIATION, MEAN};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Off-diagonal rates in `[0, 3)`, diagonal closing each row.
fn generator(m0: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(0.0..3.0f64, m0 * m0).prop_map(move |rates| {
        let mut q = Mat::from_row_slice(m0, m0, &rates);
        for i in 0..m0 {
            q[(i, i)] = 0.0;
            let exit: f64 = q.row(i).sum();
            q[(i, i)] = -exit;
        }
        q
    })
}

fn square(n: usize, scale: f64) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-scale..scale, n * n).prop_map(move |v| Mat::from_row_slice(n, n, &v))
}

/// `G Gᵀ + floor·I`, symmetric and at least `floor`-definite.
fn spd(n: usize, floor: f64) -> impl Strategy<Value = Mat> {
    square(n, 1.0).prop_map(move |g| &g * g.transpose() + Mat::identity(n, n) * floor)
}

fn regime(n: usize) -> impl Strategy<Value = RegimeCoefficients> {
    (square(n, 1.0), square(n, 0.5), square(n, 1.0), square(n, 0.3), spd(n, 0.1), spd(n, 0.5)).prop_map(
        move |(a, a_bar, b, c, q, r)| RegimeCoefficients {
            a,
            a_bar,
            b,
            c,
            q,
            r,
            ..RegimeCoefficients::zeros(n, n)
        },
    )
}

fn min_eigenvalue(m: &Mat) -> f64 {
    m.clone().symmetric_eigenvalues().min()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generators_with_closed_rows_validate(q in (1usize..5).prop_flat_map(generator)) {
        let gen = validate_generator(&q).unwrap();
        for i in 0..gen.m0() {
            prop_assert!(gen.exit_rate(i) >= 0.0);
        }
    }

    #[test]
    fn stationary_law_is_a_fixed_point(q in (2usize..5).prop_flat_map(generator)) {
        let mut q = q;
        // strictly positive rates keep the chain irreducible
        let m0 = q.nrows();
        for i in 0..m0 {
            for j in 0..m0 {
                if i != j {
                    q[(i, j)] += 0.1;
                    q[(i, i)] -= 0.1;
                }
            }
        }
        let gen = validate_generator(&q).unwrap();
        let pi = stationary_distribution(&gen).unwrap();
        prop_assert!((pi.sum() - 1.0).abs() < 1e-10);
        prop_assert!(pi.iter().all(|&p| p > 0.0));
        let flow = q.transpose() * &pi;
        prop_assert!(flow.amax() < 1e-9, "πQ = {flow}");
    }

    #[test]
    fn occupation_times_fill_the_horizon(
        q in (1usize..4).prop_flat_map(generator),
        horizon in 0.1..20.0f64,
        seed in any::<u64>(),
    ) {
        let gen = validate_generator(&q).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let path = sample_regime_path(&gen, 0, horizon, &mut rng);
        let occ = path.occupation_times(gen.m0());
        prop_assert!((occ.iter().sum::<f64>() - horizon).abs() < 1e-9 * horizon.max(1.0));
        prop_assert!(path.jump_times.windows(2).all(|w| w[0] < w[1]));
        for (t, &j) in path.jump_times.iter().zip(&path.post_jump_regimes) {
            prop_assert_eq!(path.regime_at(*t), j);
        }
    }

    #[test]
    fn mean_channel_adds_the_bar_blocks(
        (q, regimes) in (1usize..4).prop_flat_map(|m0| (generator(m0), prop::collection::vec(regime(2), m0))),
    ) {
        let gen = validate_generator(&q).unwrap();
        let raw = RawCoefficients::new(2, 2, regimes.clone(), gen).unwrap();
        let model = decompose(&raw, &ForcingSignals::homogeneous()).unwrap();
        for (i, reg) in regimes.iter().enumerate() {
            prop_assert_eq!(&model.sub(i, DEVIATION).a, &reg.a);
            prop_assert_eq!(&model.sub(i, MEAN).a, &(&reg.a + &reg.a_bar));
            prop_assert_eq!(&model.sub(i, MEAN).r, &(&reg.r + &reg.r_bar));
        }
    }

    #[test]
    fn riccati_solutions_are_symmetric_and_nonnegative(
        (q, regimes) in (1usize..3).prop_flat_map(|m0| (generator(m0), prop::collection::vec(regime(2), m0))),
    ) {
        let gen = validate_generator(&q).unwrap();
        let raw = RawCoefficients::new(2, 2, regimes, gen).unwrap();
        let model = decompose(&raw, &ForcingSignals::homogeneous()).unwrap();
        let sol = integrate_riccati(&model, 1.0, 0.05).unwrap();
        for node in 0..sol.node_count() {
            for pair in sol.p(node) {
                for p in pair {
                    let asym = (p - p.transpose()).amax();
                    prop_assert!(asym < 1e-9 * p.amax().max(1.0), "asymmetry {asym}");
                    prop_assert!(min_eigenvalue(p) > -1e-9, "{p}");
                }
            }
        }
    }
}
