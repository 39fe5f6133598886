use clipmean::bench::{run_benchmark, BenchConfig, ProfileSource, SampleDistribution, Schedule};
use clipmean::MechanismKind;

fn config(trials: usize, seed: u64) -> BenchConfig {
    BenchConfig {
        trials,
        seed,
        epsilons: vec![0.5, 1.0],
        ..BenchConfig::new(ProfileSource::Extreme { users: 31, m_star: 6 }, SampleDistribution::Uniform, 65.0)
    }
}

#[test]
fn standard_error_shrinks_with_root_trials() {
    let small = run_benchmark(&config(500, 1), Schedule::Parallel).unwrap();
    let large = run_benchmark(&config(2000, 2), Schedule::Parallel).unwrap();
    for (a, b) in small.rows.iter().zip(&large.rows) {
        assert_eq!((a.epsilon, a.mechanism), (b.epsilon, b.mechanism));
        let ratio = a.std_err / b.std_err;
        assert!((ratio / 2.0 - 1.0).abs() <= 0.2, "{:?} at ε={}: ratio {ratio}", a.mechanism, a.epsilon);
    }
}

#[test]
fn rows_are_nonnegative_and_preprocessing_is_exact() {
    let res = run_benchmark(&config(300, 3), Schedule::Serial).unwrap();
    assert!(res.max_preprocess_shift <= 1e-12);
    for r in &res.rows {
        assert!(r.mean_abs_error >= 0.0 && r.std_err >= 0.0);
        assert_eq!(r.trials, 300);
    }
    assert_eq!(res.rows.len(), 2 * MechanismKind::ALL.len());
}

#[test]
fn laplace_error_tracks_its_scale() {
    // unbiased estimator: E|M − f| = Δ/ε = U·m⋆/(Σm·ε)
    let cfg = config(4000, 4);
    let profile = cfg.resolve_profile().unwrap();
    let res = run_benchmark(&cfg, Schedule::Parallel).unwrap();
    for &eps in &cfg.epsilons {
        let row = res.row(eps, MechanismKind::Laplace).unwrap();
        let scale = profile.upper() * profile.max_count() as f64 / (profile.total() as f64 * eps);
        assert!((row.mean_abs_error - scale).abs() <= 4.0 * row.std_err, "{row:?} vs {scale}");
    }
}
