//! Synthetic event streams with known generating processes.

use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{Error, Result};
use crate::event_stream::{Event, EventSequence, MarkVocab, SECONDS_PER_DAY};
use crate::neural::seeded_rng;

fn single_mark_vocab() -> MarkVocab {
    MarkVocab::open(vec!["event".into()])
}

/// Univariate Hawkes process with exponential kernel, simulated by Ogata
/// thinning on `[0, t_max)`.
///
/// Intensity is `μ + Σ α exp(-β (t - t_i))`. Between events it only
/// decays, so the intensity at the current time bounds it until the next
/// candidate.
pub fn simulate_hawkes(mu: f64, alpha: f64, beta: f64, t_max: f64, seed: u64) -> Result<EventSequence> {
    if !(mu > 0.0) || alpha < 0.0 || !(beta > 0.0) || !t_max.is_finite() {
        return Err(Error::Domain(format!("invalid Hawkes parameters mu={mu} alpha={alpha} beta={beta}")));
    }
    if alpha >= beta {
        return Err(Error::NonStationary { alpha, beta });
    }
    let mut rng = seeded_rng(seed);
    let mut t = 0.0;
    let mut excite = 0.0;
    let mut events = Vec::new();
    loop {
        let bound = mu + excite;
        let w = Exp::new(bound).map_err(|e| Error::Domain(e.to_string()))?.sample(&mut rng);
        t += w;
        if t >= t_max {
            break;
        }
        excite *= (-beta * w).exp();
        if rng.random::<f64>() * bound <= mu + excite {
            events.push(Event::new(t, 0));
            excite += alpha;
        }
    }
    EventSequence::new(events, single_mark_vocab())
}

/// Inhomogeneous Poisson process over `days` days whose rate is
/// `profile[h]` events per hour during hour `h` of each day (time 0 is
/// midnight). Simulated by thinning a homogeneous process at the peak rate.
pub fn simulate_seasonal_poisson(profile: &[f64; 24], days: usize, seed: u64) -> Result<EventSequence> {
    if let Some(r) = profile.iter().find(|r| !(**r >= 0.0) || !r.is_finite()) {
        return Err(Error::Domain(format!("hourly rate {r} is not a finite non-negative value")));
    }
    let peak = profile.iter().cloned().fold(0.0, f64::max);
    if peak == 0.0 {
        return EventSequence::new(Vec::new(), single_mark_vocab());
    }
    let mut rng = seeded_rng(seed);
    let gap = Exp::new(peak / 3600.0).map_err(|e| Error::Domain(e.to_string()))?;
    let t_max = days as f64 * SECONDS_PER_DAY;
    let mut t = 0.0;
    let mut events = Vec::new();
    loop {
        t += gap.sample(&mut rng);
        if t >= t_max {
            break;
        }
        let hour = ((t % SECONDS_PER_DAY) / 3600.0) as usize;
        if rng.random::<f64>() * peak < profile[hour.min(23)] {
            events.push(Event::new(t, 0));
        }
    }
    EventSequence::new(events, single_mark_vocab())
}

/// Homogeneous Poisson process at `rate` events per second on `[0, t_max)`.
pub fn simulate_poisson(rate: f64, t_max: f64, seed: u64) -> Result<EventSequence> {
    simulate_hawkes(rate, 0.0, 1.0, t_max, seed)
}

/// `n` events spaced exactly `gap` apart from `start`, marks cycling
/// through `0..num_marks`.
pub fn deterministic_stream(start: f64, gap: f64, n: usize, num_marks: usize) -> Result<EventSequence> {
    if !(gap > 0.0) || num_marks == 0 {
        return Err(Error::Domain(format!("need a positive gap and at least one mark, got {gap} and {num_marks}")));
    }
    let events = (0..n).map(|i| Event::new(start + i as f64 * gap, (i % num_marks) as u32)).collect();
    EventSequence::new(events, mark_vocab(num_marks))
}

fn mark_vocab(k: usize) -> MarkVocab {
    MarkVocab::open((0..k).map(|i| format!("m{i}")).collect())
}

/// Replaces marks with a Markov chain: the first mark is uniform, later
/// marks follow `transition[prev]`.
pub fn attach_marks(seq: &EventSequence, transition: &[Vec<f64>], seed: u64) -> Result<EventSequence> {
    let k = transition.len();
    if k == 0 {
        return Err(Error::Contract("transition matrix is empty".into()));
    }
    for (i, row) in transition.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if row.len() != k || row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("row {i} of the transition matrix is not a probability vector")));
        }
    }
    let mut rng = seeded_rng(seed);
    let mut prev: Option<usize> = None;
    let events = seq
        .events
        .iter()
        .map(|e| {
            let mark = match prev {
                None => rng.random_range(0..k),
                Some(p) => {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut pick = k - 1;
                    for (j, q) in transition[p].iter().enumerate() {
                        acc += q;
                        if u < acc {
                            pick = j;
                            break;
                        }
                    }
                    pick
                }
            };
            prev = Some(mark);
            Event::new(e.time, mark as u32)
        })
        .collect();
    EventSequence::new(events, mark_vocab(k))
}

/// Transition matrix that moves to the next mark (mod `k`) with
/// probability `stay_next` and spreads the rest uniformly.
pub fn cyclic_transition(k: usize, stay_next: f64) -> Vec<Vec<f64>> {
    let rest = if k > 1 { (1.0 - stay_next) / (k - 1) as f64 } else { 0.0 };
    (0..k)
        .map(|i| (0..k).map(|j| if k == 1 { 1.0 } else if j == (i + 1) % k { stay_next } else { rest }).collect())
        .collect()
}
