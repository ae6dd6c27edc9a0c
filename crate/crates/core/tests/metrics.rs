mod common;

use common::*;
use dualtpp::inference::{Forecast, ForecastEvent, Method};
use dualtpp::metrics::{
    bleu_score, count_mae, evaluate, wasserstein_breakdown, wasserstein_distance, CountMaeMode, BLEU_SMOOTHING,
};
use dualtpp::{Event, EventSequence, ForecastInstance};
use proptest::prelude::*;
use rand::Rng;

/// Wasserstein distance from its definition: pad the shorter sequence with
/// copies of `t_end` and sum the sorted pairwise differences.
fn padded_wasserstein(a: &[f64], b: &[f64], t_end: f64) -> f64 {
    let n = a.len().max(b.len());
    let pad = |x: &[f64]| {
        let mut v = x.to_vec();
        v.resize(n, t_end);
        v
    };
    pad(a).iter().zip(pad(b)).map(|(x, y)| (x - y).abs()).sum()
}

fn sorted_times() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..100.0, 0..20).prop_map(|mut v| {
        v.sort_by(f64::total_cmp);
        v
    })
}

#[test]
fn bleu_matches_reference_on_random_pairs() {
    let mut r = rng(31);
    for _ in 0..50 {
        let k = r.random_range(1..5);
        let a: Vec<u32> = (0..r.random_range(0..15)).map(|_| r.random_range(0..k)).collect();
        let b: Vec<u32> = (0..r.random_range(0..15)).map(|_| r.random_range(0..k)).collect();
        let got = bleu_score(&a, &b, 4);
        let want = reference_bleu(&a, &b, 4, BLEU_SMOOTHING);
        assert!((got - want).abs() < 1e-6, "{a:?} {b:?}: {got} vs {want}");
    }
}

#[test]
fn bleu_identity_and_edges() {
    assert_eq!(bleu_score(&[1, 2, 3, 4, 5], &[1, 2, 3, 4, 5], 4), 1.0);
    assert_eq!(bleu_score(&[], &[], 4), 1.0);
    assert_eq!(bleu_score(&[1, 2], &[], 4), 0.0);
    assert_eq!(bleu_score(&[], &[1, 2], 4), 0.0);
    // one-token prediction uses unigrams only, brevity penalty exp(1 - 3)
    assert!((bleu_score(&[7, 8, 9], &[8], 4) - (-2.0f64).exp()).abs() < 1e-12);
}

#[test]
fn count_mae_matches_direct_counting() {
    let mut r = rng(32);
    for _ in 0..100 {
        let gen = |r: &mut rand_chacha::ChaCha8Rng| {
            let mut v: Vec<f64> = (0..r.random_range(0..30)).map(|_| r.random_range(0.0..30.0)).collect();
            v.sort_by(f64::total_cmp);
            v
        };
        let (a, b) = (gen(&mut r), gen(&mut r));
        let intervals = [(0.0, 10.0), (10.0, 20.0), (20.0, 30.0)];
        let count = |v: &[f64], (s, e): (f64, f64)| v.iter().filter(|&&t| t >= s && t < e).count() as f64;
        let abs: f64 = intervals.iter().map(|&iv| (count(&a, iv) - count(&b, iv)).abs()).sum::<f64>() / 3.0;
        let rel: f64 =
            intervals.iter().map(|&iv| (count(&a, iv) - count(&b, iv)).abs() / count(&a, iv).max(1.0)).sum::<f64>() / 3.0;
        assert!((count_mae(&a, &b, &intervals, CountMaeMode::Absolute).unwrap() - abs).abs() < 1e-12);
        assert!((count_mae(&a, &b, &intervals, CountMaeMode::Relative).unwrap() - rel).abs() < 1e-12);
    }
}

#[test]
fn unsorted_or_late_times_are_contract_errors() {
    assert!(wasserstein_distance(&[2.0, 1.0], &[], 5.0).is_err());
    assert!(wasserstein_distance(&[1.0], &[5.0], 5.0).is_err());
    assert!(wasserstein_breakdown(&[1.0], &[2.0], 0.0, 5.0, 0).is_err());
}

fn instance(gold: &[f64], start: f64, bins: usize) -> ForecastInstance {
    let seq = |t: &[f64]| EventSequence::new(t.iter().map(|&x| Event::new(x, 0)).collect(), vocab(1)).unwrap();
    ForecastInstance {
        history_start: 0.0,
        history: seq(&[start - 1.0]),
        horizon_start: start,
        horizon_end: start + bins as f64 * 10.0,
        delta: 10.0,
        gold: seq(gold),
    }
}

fn forecast_at(times: &[f64], start: f64) -> Forecast {
    Forecast {
        method: Method::Dual,
        events: times
            .iter()
            .map(|&t| ForecastEvent { time: t, mark: 0, bin: ((t - start) / 10.0) as usize + 1 })
            .collect(),
        bins: Vec::new(),
        truncated: false,
    }
}

#[test]
fn perfect_forecast_scores_perfectly() {
    let inst = instance(&[101.0, 105.0, 117.0], 100.0, 3);
    let r = evaluate(Method::Dual, &[inst], &[forecast_at(&[101.0, 105.0, 117.0], 100.0)], CountMaeMode::Absolute).unwrap();
    assert_eq!(r.wass_dist, 0.0);
    assert_eq!(r.count_mae, 0.0);
    assert_eq!(r.bleu, 1.0);
    assert_eq!(r.tick_breakdown, vec![0.0; 3]);
}

#[test]
fn evaluate_averages_instances() {
    let insts = [instance(&[101.0, 105.0], 100.0, 3), instance(&[212.0], 200.0, 3)];
    let fs = [forecast_at(&[102.0], 100.0), forecast_at(&[211.0, 225.0], 200.0)];
    let r = evaluate(Method::Dual, &insts, &fs, CountMaeMode::Relative).unwrap();
    // instance 1: |101-102| + (130-105) = 26; instance 2: |212-211| + (230-225) = 6
    assert!((r.wass_dist - 16.0).abs() < 1e-12);
    // absolute: (1/3 + 1/3) / 2; relative: (1/2 / 3 + (0 + 1/1) / 3) / 2
    assert!((r.count_mae_absolute - 1.0 / 3.0).abs() < 1e-12);
    assert!((r.count_mae_relative - 0.25).abs() < 1e-12);
    assert_eq!(r.count_mae, r.count_mae_relative);
    // thirds: [26, 0, 0] and [0, 1, 5]; surplus terms follow their own time
    for (got, want) in r.tick_breakdown.iter().zip([13.0, 0.5, 2.5]) {
        assert!((got - want).abs() < 1e-12);
    }
    assert!(evaluate(Method::Dual, &insts, &fs[..1], CountMaeMode::Absolute).is_err());
}

proptest! {
    #[test]
    fn wasserstein_is_symmetric_and_matches_padding(a in sorted_times(), b in sorted_times()) {
        let ab = wasserstein_distance(&a, &b, 100.0).unwrap();
        prop_assert!((ab - wasserstein_distance(&b, &a, 100.0).unwrap()).abs() < 1e-9);
        prop_assert!((ab - padded_wasserstein(&a, &b, 100.0)).abs() < 1e-9);
        prop_assert_eq!(wasserstein_distance(&a, &a, 100.0).unwrap(), 0.0);
        let parts = wasserstein_breakdown(&a, &b, 0.0, 100.0, 3).unwrap();
        prop_assert!((parts.iter().sum::<f64>() - ab).abs() < 1e-9);
        prop_assert!(parts.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn bleu_is_bounded(a in prop::collection::vec(0u32..4, 0..12), b in prop::collection::vec(0u32..4, 0..12)) {
        let s = bleu_score(&a, &b, 4);
        prop_assert!((0.0..=1.0).contains(&s));
    }
}
