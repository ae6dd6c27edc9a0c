use dualtpp::event_stream::SECONDS_PER_DAY;
use dualtpp::synthetic::{
    attach_marks, cyclic_transition, deterministic_stream, simulate_hawkes, simulate_poisson, simulate_seasonal_poisson,
};

/// 0.99 quantile of χ² with 24 degrees of freedom.
const CHI2_99_24: f64 = 42.979_820_139_351_65;
/// 0.99 quantile of χ² with 4 degrees of freedom.
const CHI2_99_4: f64 = 13.276_704_135_987_622;

fn chi2(observed: &[f64], expected: &[f64]) -> f64 {
    observed.iter().zip(expected).map(|(o, e)| (o - e) * (o - e) / e).sum()
}

#[test]
fn hawkes_rate_matches_branching() {
    // stationary rate μ / (1 - α/β) = 1
    let (mu, alpha, beta, t) = (0.5, 0.5, 1.0, 20_000.0);
    let seq = simulate_hawkes(mu, alpha, beta, t, 11).unwrap();
    let rate = seq.len() as f64 / t;
    let want = mu / (1.0 - alpha / beta);
    assert!((rate - want).abs() / want < 0.05, "rate {rate}");
    assert!(seq.times().iter().all(|&x| (0.0..t).contains(&x)));
}

#[test]
fn hawkes_is_seeded() {
    let a = simulate_hawkes(0.3, 0.4, 1.0, 500.0, 2).unwrap();
    assert_eq!(a, simulate_hawkes(0.3, 0.4, 1.0, 500.0, 2).unwrap());
    assert_ne!(a, simulate_hawkes(0.3, 0.4, 1.0, 500.0, 3).unwrap());
}

#[test]
fn poisson_gap_mean_is_inverse_rate() {
    let seq = simulate_poisson(2.0, 10_000.0, 5).unwrap();
    let t = seq.times();
    let gaps: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    // exponential gaps: mean 1/2, std of the mean (1/2)/sqrt(n)
    assert!((mean - 0.5).abs() < 4.0 * 0.5 / (gaps.len() as f64).sqrt());
}

#[test]
fn seasonal_counts_follow_profile() {
    let profile: [f64; 24] = std::array::from_fn(|h| 3.0 + 22.0 * (h as f64 / 23.0));
    let days = 40;
    let seq = simulate_seasonal_poisson(&profile, days, 8).unwrap();
    let mut observed = [0.0; 24];
    for t in seq.times() {
        observed[((t % SECONDS_PER_DAY) / 3600.0) as usize] += 1.0;
    }
    let expected: Vec<f64> = profile.iter().map(|r| r * days as f64).collect();
    let stat = chi2(&observed, &expected);
    assert!(stat < CHI2_99_24, "χ² = {stat}");
}

#[test]
fn uniform_chain_gives_uniform_marks() {
    let base = simulate_poisson(1.0, 5_000.0, 1).unwrap();
    let k = 5;
    let seq = attach_marks(&base, &vec![vec![0.2; k]; k], 4).unwrap();
    let mut freq = vec![0.0; k];
    for m in seq.marks() {
        freq[m as usize] += 1.0;
    }
    let expected = vec![seq.len() as f64 / k as f64; k];
    assert!(chi2(&freq, &expected) < CHI2_99_4);
    assert_eq!(seq.times(), base.times());
}

#[test]
fn cyclic_chain_mostly_steps_forward() {
    let base = simulate_poisson(1.0, 5_000.0, 2).unwrap();
    let seq = attach_marks(&base, &cyclic_transition(4, 0.8), 6).unwrap();
    let m = seq.marks();
    let forward = m.windows(2).filter(|w| w[1] == (w[0] + 1) % 4).count() as f64 / (m.len() - 1) as f64;
    assert!((forward - 0.8).abs() < 0.02, "{forward}");
}

#[test]
fn deterministic_stream_is_exact() {
    let s = deterministic_stream(100.0, 7.5, 6, 2).unwrap();
    assert_eq!(s.times(), vec![100.0, 107.5, 115.0, 122.5, 130.0, 137.5]);
    assert_eq!(s.marks(), vec![0, 1, 0, 1, 0, 1]);
    assert!(deterministic_stream(0.0, 0.0, 3, 1).is_err());
}
