use ndarray::{Array1, Array2};
use slowdyn::eval::*;
use slowdyn::msm::*;
use slowdyn::seqmodel::*;
use slowdyn::surrogate::sample_markov_chain;
use slowdyn::{Trajectory, TransitionModel};

fn two_state() -> TransitionModel {
    TransitionModel::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]], 1.0).unwrap()
}

fn oracle_ensemble(t: &TransitionModel, n: usize, len: usize, seed: u64) -> Vec<Trajectory> {
    let k = t.n_states();
    (0..n).map(|i| sample_markov_chain(t, len, &vec![1.0 / k as f64; k], seed + i as u64).unwrap()).collect()
}

fn quick_report() -> ReportConfig {
    ReportConfig { lags: vec![1, 2, 5], k_its: 1, n_boot: 20, ..ReportConfig::default() }
}

/// A checkpoint whose LSTM predicts `T[x]` after seeing state `x`, to
/// machine precision: saturated gates make the cell a one-hot of the
/// current input and the read-out adds `ln T` columns.
fn exact_chain_checkpoint(t: &TransitionModel) -> Checkpoint {
    let n = t.n_states();
    let data = oracle_ensemble(t, 1, 500, 0);
    let mut cfg = TrainConfig::desk_lstm();
    cfg.model = ModelConfig::Lstm(LstmConfig { vocab: n, embed: n, hidden: n });
    cfg.seq_len = 10;
    cfg.batch_size = 2;
    let mut ck = Trainer::new(&data, cfg).unwrap().checkpoint();
    let gain = 3.0f64;
    let y = gain.tanh().tanh();
    let mut w_input = Array2::zeros((4 * n, n));
    let mut bias = Array1::zeros(4 * n);
    for i in 0..n {
        bias[i] = -60.0;
        bias[n + i] = 60.0;
        bias[2 * n + i] = 60.0;
        w_input[(3 * n + i, i)] = gain;
    }
    let w_out = Array2::from_shape_fn((n, n), |(j, x)| t.matrix()[(x, j)].ln() / y);
    ck.params = ModelParams::Lstm(LstmParams {
        embedding: Array2::eye(n),
        w_input,
        w_recurrent: Array2::zeros((4 * n, n)),
        bias,
        w_out,
        b_out: Array1::zeros(n),
    });
    ck
}

#[test]
fn exact_model_reproduces_chain_rows() {
    let t = TransitionModel::from_rows(&[vec![0.7, 0.2, 0.1], vec![0.1, 0.6, 0.3], vec![0.3, 0.3, 0.4]], 1.0).unwrap();
    let ck = exact_chain_checkpoint(&t);
    let rows = predictive_rows(&ck, &oracle_ensemble(&t, 2, 300, 5)).unwrap();
    assert!((rows - t.matrix()).abs().max() < 1e-12);
}

#[test]
fn generated_histogram_converges_to_stationary_distribution() {
    let t = TransitionModel::from_rows(&[vec![0.7, 0.2, 0.1], vec![0.1, 0.6, 0.3], vec![0.3, 0.3, 0.4]], 1.0).unwrap();
    let ck = exact_chain_checkpoint(&t);
    let reference = oracle_ensemble(&t, 5, 200, 9);
    let cfg = GenerationConfig { seed: 4, ..GenerationConfig::default() };
    let gen = generate(&ck, &reference, &cfg).unwrap();
    assert_eq!(gen.len(), 100);
    assert!(gen.iter().all(|g| g.len() == 10_000));
    let pi = t.stationary().unwrap();
    for (s, &p) in pi.iter().enumerate() {
        let fracs: Vec<f64> = gen.iter().map(|g| g.histogram()[s] as f64 / g.len() as f64).collect();
        let m = fracs.iter().sum::<f64>() / fracs.len() as f64;
        let var = fracs.iter().map(|f| (f - m).powi(2)).sum::<f64>() / (fracs.len() - 1) as f64;
        let se = (var / fracs.len() as f64).sqrt();
        assert!((m - p).abs() < 3.0 * se, "state {s}: {m} vs {p} (se {se})");
    }
}

#[test]
fn trained_model_regenerates_two_state_chain() {
    let t = two_state();
    let data = oracle_ensemble(&t, 10, 10_000, 40);
    let ck = train(&data, TrainConfig::desk_lstm()).unwrap();
    let gen = generate(&ck, &data, &GenerationConfig { seed: 1, ..GenerationConfig::default() }).unwrap();
    let est = transition_matrix(&count_transitions(&gen, 1).unwrap(), false).unwrap();
    let err = (est.matrix() - t.matrix()).abs().max();
    assert!(err <= 0.03, "max abs error {err}");
}

#[test]
fn generation_is_deterministic_and_seed_sensitive() {
    let t = two_state();
    let ck = exact_chain_checkpoint(&t);
    let reference = oracle_ensemble(&t, 3, 100, 2);
    let cfg = GenerationConfig { n_trajectories: 5, length: 400, seed: 8, ..GenerationConfig::default() };
    let a = generate(&ck, &reference, &cfg).unwrap();
    assert_eq!(a, generate(&ck, &reference, &cfg).unwrap());
    assert_ne!(a, generate(&ck, &reference, &GenerationConfig { seed: 9, ..cfg.clone() }).unwrap());
}

#[test]
fn context_out_of_vocabulary_is_rejected() {
    let ck = exact_chain_checkpoint(&two_state());
    let bad = vec![Trajectory::new(1.0, 3, vec![2; 50]).unwrap()];
    assert!(generate(&ck, &bad, &GenerationConfig { n_trajectories: 1, length: 60, ..GenerationConfig::default() }).is_err());
}

#[test]
fn transformer_generation_is_deterministic_under_parallelism() {
    let t = two_state();
    let data = oracle_ensemble(&t, 2, 400, 3);
    let mut cfg = TrainConfig::desk_transformer();
    cfg.seq_len = 12;
    cfg.batch_size = 4;
    cfg.epochs = 1;
    let ck = train(&data, cfg).unwrap();
    let g = GenerationConfig { n_trajectories: 6, length: 80, seed: 2, ..GenerationConfig::default() };
    let a = generate(&ck, &data, &g).unwrap();
    assert_eq!(a, generate(&ck, &data, &g).unwrap());
    assert!(a.iter().all(|x| x.len() == 80 && x.states()[..12] == data[0].states()[..12] || x.states()[..12] == data[1].states()[..12]));
}

#[test]
fn zero_temperature_continuation_of_sticky_chain_is_constant() {
    let t = TransitionModel::from_rows(&[vec![0.9, 0.1], vec![0.3, 0.7]], 1.0).unwrap();
    let ck = exact_chain_checkpoint(&t);
    let reference = oracle_ensemble(&t, 4, 100, 6);
    let g = GenerationConfig { n_trajectories: 4, length: 200, temperature: 0.0, seed: 0, context: Some(10) };
    for traj in generate(&ck, &reference, &g).unwrap() {
        let last = traj.states()[9];
        assert!(traj.states()[10..].iter().all(|&s| s == last));
    }
}

#[test]
fn self_comparison_matches_exactly() {
    let a = oracle_ensemble(&two_state(), 8, 500, 1);
    let r = build_report(&a, &a, &quick_report(), serde_json::Value::Null).unwrap();
    assert_eq!(r.reference, r.generated);
}

#[test]
fn swapping_ensembles_swaps_columns_only() {
    let a = oracle_ensemble(&two_state(), 8, 500, 1);
    let b = oracle_ensemble(&two_state(), 6, 700, 50);
    let cfg = quick_report();
    let ab = build_report(&a, &b, &cfg, serde_json::Value::Null).unwrap();
    let ba = build_report(&b, &a, &cfg, serde_json::Value::Null).unwrap();
    assert_eq!(ab.swapped(), ba);
    assert_ne!(ab.reference, ab.generated);
}

#[test]
fn uniform_ensemble_has_flat_free_energy() {
    let n = 4;
    let gen: Vec<Trajectory> = (0..10).map(|k| Trajectory::new(1.0, n, (0..400).map(|i| (i + k) % n).collect()).unwrap()).collect();
    let r = build_report(&gen, &gen, &quick_report(), serde_json::Value::Null).unwrap();
    for f in &r.generated.free_energy {
        assert!((f.value - (n as f64).ln()).abs() < 1e-12);
        assert!(f.std < 1e-12);
    }
}

#[test]
fn mismatched_alphabets_are_rejected() {
    let a = vec![Trajectory::new(1.0, 2, vec![0, 1, 0, 1]).unwrap()];
    let b = vec![Trajectory::new(1.0, 3, vec![0, 1, 2, 1]).unwrap()];
    assert!(build_report(&a, &b, &quick_report(), serde_json::Value::Null).is_err());
    let c = vec![Trajectory::new(2.0, 2, vec![0, 1, 0, 1]).unwrap()];
    assert!(build_report(&a, &c, &quick_report(), serde_json::Value::Null).is_err());
}

#[test]
fn report_files_round_trip_with_non_finite_entries() {
    // State 2 is absorbing for the generated side: MFPTs out of it are infinite.
    let reference = oracle_ensemble(&TransitionModel::from_rows(&[vec![0.8, 0.1, 0.1], vec![0.1, 0.8, 0.1], vec![0.1, 0.1, 0.8]], 1.0).unwrap(), 4, 300, 7);
    let generated = vec![Trajectory::new(1.0, 3, [vec![0, 1, 0, 1, 0], vec![2; 40]].concat()).unwrap(); 3];
    let r = build_report(&reference, &generated, &quick_report(), serde_json::json!({"note": "test"})).unwrap();
    assert!(r.generated.mfpt[2][0].value.is_infinite());
    let dir = tempfile::tempdir().unwrap();
    write_report(dir.path(), &r).unwrap();
    for f in ["report.json", "free_energy.csv", "its.csv", "mfpt.csv", "plots/its_1.svg", "plots/free_energy.svg"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    assert_eq!(read_report(dir.path()).unwrap(), r);
    let its = std::fs::read_to_string(dir.path().join("its.csv")).unwrap();
    assert_eq!(its.lines().count(), 1 + 2 * 3);
}

#[test]
fn bootstrap_spread_shrinks_with_ensemble_size() {
    let t = two_state();
    let first_its = |e: &[Trajectory]| -> slowdyn::Result<Vec<f64>> {
        Ok(vec![implied_timescales(e, &[1], 1, false)?.its[0][0].as_f64()])
    };
    let small = bootstrap_metric(&oracle_ensemble(&t, 10, 1000, 100), first_its, 50, 1).unwrap();
    let large = bootstrap_metric(&oracle_ensemble(&t, 100, 1000, 100), first_its, 50, 1).unwrap();
    assert!(large.std[0] < small.std[0], "{} vs {}", large.std[0], small.std[0]);
    assert_eq!(small.n_ok, 50);
}
