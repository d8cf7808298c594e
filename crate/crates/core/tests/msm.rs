use proptest::prelude::*;
use slowdyn::msm::*;
use slowdyn::surrogate::sample_markov_chain;
use slowdyn::{DMatrix, Trajectory, TransitionModel};

fn stochastic(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.01f64..1.0, n), n).prop_map(|rows| {
        rows.into_iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.into_iter().map(|x| x / s).collect()
            })
            .collect()
    })
}

fn counts(n: usize) -> impl Strategy<Value = Vec<u64>> {
    prop::collection::vec(1u64..500, n * n)
}

fn four_state() -> TransitionModel {
    TransitionModel::from_rows(
        &[
            vec![0.85, 0.10, 0.04, 0.01],
            vec![0.05, 0.80, 0.10, 0.05],
            vec![0.02, 0.08, 0.85, 0.05],
            vec![0.03, 0.02, 0.15, 0.80],
        ],
        1.0,
    )
    .unwrap()
}

#[test]
fn estimated_chain_and_passage_times_track_truth() {
    let truth = four_state();
    let traj = sample_markov_chain(&truth, 200_000, &[0.25; 4], 7).unwrap();
    let est = transition_matrix(&count_transitions(&[traj], 1).unwrap(), false).unwrap();
    let err = (est.matrix() - truth.matrix()).abs().max();
    assert!(err <= 0.01, "max abs error {err}");
    let a = mfpt(&truth).unwrap();
    let b = mfpt(&est).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                let rel = (b.times[(i, j)] - a.times[(i, j)]).abs() / a.times[(i, j)];
                assert!(rel < 0.03, "mfpt {i}->{j} off by {rel}");
            }
        }
    }
}

#[test]
fn lagged_counts_of_markov_chain_match_matrix_power() {
    let truth = four_state();
    let traj = sample_markov_chain(&truth, 200_000, &[0.25; 4], 8).unwrap();
    let est = transition_matrix(&count_transitions(&[traj], 3).unwrap(), false).unwrap();
    let p3 = truth.matrix().pow(3);
    assert!((est.matrix() - p3).abs().max() < 0.01);
    assert_eq!(est.lag_time(), 3.0);
}

#[test]
fn its_of_markov_chain_is_flat_in_lag() {
    let truth = four_state();
    let exact = eigen_spectrum(&truth, 2).unwrap().its[0].as_f64();
    let trajs: Vec<Trajectory> =
        (0..4).map(|i| sample_markov_chain(&truth, 100_000, &[0.25; 4], 20 + i).unwrap()).collect();
    let table = implied_timescales(&trajs, &[1, 2, 4], 1, false).unwrap();
    for its in table.curve(0) {
        assert!((its - exact).abs() / exact < 0.05, "{its} vs {exact}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn estimated_rows_are_stochastic(n in 2usize..7, seed in any::<u64>(), rev in any::<bool>()) {
        let raw: Vec<u64> = (0..n * n).map(|k| (seed.rotate_left(k as u32) % 97) + 1).collect();
        let t = transition_matrix(&CountMatrix::from_counts(1, 0.5, n, raw).unwrap(), rev).unwrap();
        for i in 0..t.n_states() {
            let s: f64 = t.matrix().row(i).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(t.matrix().row(i).iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn reversible_estimate_obeys_detailed_balance(c in counts(4)) {
        let t = transition_matrix(&CountMatrix::from_counts(1, 1.0, 4, c).unwrap(), true).unwrap();
        let pi = t.stationary().unwrap();
        let m = t.matrix();
        for i in 0..4 {
            for j in 0..4 {
                prop_assert!((pi[i] * m[(i, j)] - pi[j] * m[(j, i)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stationary_is_fixed_point(rows in stochastic(5)) {
        let t = TransitionModel::from_rows(&rows, 1.0).unwrap();
        let pi = t.stationary().unwrap();
        prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for j in 0..5 {
            let flow: f64 = (0..5).map(|i| pi[i] * rows[i][j]).sum();
            prop_assert!((flow - pi[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn passage_times_solve_their_equations(rows in stochastic(5), tau in 0.1f64..10.0) {
        let t = TransitionModel::from_rows(&rows, tau).unwrap();
        let times = mfpt(&t).unwrap();
        prop_assert!(mfpt_residual(&t, &times) < 1e-6 * tau.max(1.0));
        for i in 0..5 {
            prop_assert_eq!(times.times[(i, i)], 0.0);
            for j in 0..5 {
                if i != j {
                    prop_assert!(times.times[(i, j)] >= tau);
                }
            }
        }
    }

    #[test]
    fn leading_eigenvalue_is_one(rows in stochastic(4)) {
        let t = TransitionModel::from_rows(&rows, 2.0).unwrap();
        let s = eigen_spectrum(&t, 2).unwrap();
        prop_assert!((s.eigenvalues[0].re - 1.0).abs() < 1e-10);
        prop_assert!(s.eigenvalues[1].norm() <= 1.0 + 1e-10);
    }

    #[test]
    fn its_scales_with_lag_time(rows in stochastic(3), tau in 0.1f64..5.0) {
        let a = eigen_spectrum(&TransitionModel::from_rows(&rows, 1.0).unwrap(), 2).unwrap();
        let b = eigen_spectrum(&TransitionModel::from_rows(&rows, tau).unwrap(), 2).unwrap();
        if let (Some(x), Some(y)) = (a.its[0].finite(), b.its[0].finite()) {
            prop_assert!((y - tau * x).abs() <= 1e-9 * y.abs().max(1.0));
        }
    }

    #[test]
    fn free_energy_is_shift_free_log(pops in prop::collection::vec(0.01f64..1.0, 2..8)) {
        let s: f64 = pops.iter().sum();
        let p: Vec<f64> = pops.iter().map(|x| x / s).collect();
        let f = free_energy(&p);
        for (fi, pi) in f.iter().zip(&p) {
            prop_assert!((fi + pi.ln()).abs() < 1e-12);
        }
    }
}

#[test]
fn count_matrix_rows_match_histogram_of_sources() {
    let traj = Trajectory::new(1.0, 3, vec![0, 1, 2, 2, 1, 0, 0, 2]).unwrap();
    let c = count_transitions(std::slice::from_ref(&traj), 2).unwrap();
    assert_eq!(c.total(), 6);
    let m: DMatrix<f64> = c.to_matrix();
    let from0: f64 = m.row(0).sum();
    assert_eq!(from0, 2.0);
}
