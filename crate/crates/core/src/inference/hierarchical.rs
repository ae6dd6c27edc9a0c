//! Hierarchical baseline: a second event model over compound events (every
//! τ-th event) constrains the sum of τ consecutive gaps.

use serde::{Deserialize, Serialize};

use super::{Forecast, ForecastEvent, Method};
use crate::error::{Error, Result};
use crate::event_model::{EventModel, MIN_NORMALIZED_GAP};
use crate::event_stream::{Event, EventSequence, ForecastInstance};
use crate::neural::GaussianParams;

/// Every `tau`-th event of `seq`, counting back from `anchor_last` (or
/// forward from the first event when false).
pub fn compound_sequence(seq: &EventSequence, tau: usize, anchor_last: bool) -> Result<EventSequence> {
    if tau == 0 {
        return Err(Error::Contract("tau must be at least 1".into()));
    }
    let n = seq.events.len();
    let events = seq
        .events
        .iter()
        .enumerate()
        .filter(|(i, _)| if anchor_last { (n - 1 - i) % tau == 0 } else { i % tau == 0 })
        .map(|(_, e)| *e)
        .collect();
    EventSequence::new(events, seq.vocab.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompoundStep {
    pub gaps: Vec<f64>,
    /// `Σ log N(g_i; μ_i, σ_i) + log N(Σ g_i; μ^c, σ^c)` at the optimum.
    pub objective: f64,
    /// Multiplier `λ = (Σ g - μ^c) / σ_c²`.
    pub lambda: f64,
}

/// Maximizes `Σ log N(g_i; μ_i, σ_i) + log N(Σ g_i; μ^c, σ^c)` subject to
/// `g_i >= lower`.
///
/// At the optimum `g_i = max(lower, μ_i - σ_i² λ)` with
/// `λ σ_c² = Σ g_i - μ^c`; the residual is strictly increasing in λ and
/// piecewise linear, so the root is found by bracketing and then solved
/// exactly on its linear piece.
pub fn solve_compound_step(gaps: &[GaussianParams], compound: GaussianParams, lower: f64) -> Result<CompoundStep> {
    if gaps.is_empty() {
        return Err(Error::Contract("compound step needs at least one gap".into()));
    }
    if gaps.iter().chain([&compound]).any(|g| !(g.std > 0.0) || !g.mean.is_finite()) {
        return Err(Error::Domain("compound step needs finite means and positive stds".into()));
    }
    let vc = compound.std * compound.std;
    let at = |lambda: f64| -> Vec<f64> {
        gaps.iter().map(|g| (g.mean - g.std * g.std * lambda).max(lower)).collect()
    };
    let residual = |lambda: f64| -> f64 { lambda * vc - at(lambda).iter().sum::<f64>() + compound.mean };

    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    while residual(lo) > 0.0 {
        lo *= 2.0;
    }
    while residual(hi) < 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if residual(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let approx = 0.5 * (lo + hi);
    // exact solve on the linear piece containing the root
    let free: Vec<bool> = gaps.iter().map(|g| g.mean - g.std * g.std * approx > lower).collect();
    let (mut num, mut den) = (-compound.mean, vc);
    for (g, &f) in gaps.iter().zip(&free) {
        if f {
            num += g.mean;
            den += g.std * g.std;
        } else {
            num += lower;
        }
    }
    let exact = num / den;
    let lambda = if (exact - approx).abs() <= (hi - lo).max(1e-12 * approx.abs()) * 4.0 { exact } else { approx };
    let g = at(lambda);
    let sum: f64 = g.iter().sum();
    let objective = gaps.iter().zip(&g).map(|(p, &x)| p.log_density(x)).sum::<f64>() + compound.log_density(sum);
    Ok(CompoundStep { gaps: g, objective, lambda })
}

/// Decodes the horizon τ events at a time. The event model supplies per-gap
/// Gaussians by mode rollout; the compound model supplies a Gaussian on
/// their sum. Stops once the last decoded time reaches the horizon end.
pub fn forecast_hierarchical(
    event_model: &EventModel,
    compound_model: &EventModel,
    instance: &ForecastInstance,
    tau: usize,
) -> Result<Forecast> {
    let history = &instance.history;
    if history.is_empty() {
        return Err(Error::Contract("hierarchical decoding needs a non-empty history".into()));
    }
    let grid = instance.horizon_grid();
    let t_end = grid.span_end();
    let compound_hist = compound_sequence(history, tau, true)?;
    let mut state = event_model.condition(&history.events)?;
    let mut cstate = compound_model.condition(&compound_hist.events)?;
    let lower = MIN_NORMALIZED_GAP * event_model.gap_mean;
    let mut t = state.last_time.unwrap_or(instance.horizon_start);
    let mut events = Vec::new();
    let max_steps = 100_000 / tau.max(1);
    let mut truncated = true;
    for _ in 0..max_steps {
        if t >= t_end {
            truncated = false;
            break;
        }
        let compound = compound_model.predict(&cstate)?.gap;
        let mut roll = state.clone();
        let mut rt = t;
        let mut dists = Vec::with_capacity(tau);
        let mut marks = Vec::with_capacity(tau);
        for _ in 0..tau {
            let pred = event_model.predict(&roll)?;
            let mark = pred.mode_mark();
            dists.push(pred.gap);
            marks.push(mark);
            rt += pred.gap.mean.max(lower);
            roll = event_model.advance(&roll, Event::new(rt, mark))?;
        }
        let step = solve_compound_step(&dists, compound, lower)?;
        let mut last = None;
        for (g, &mark) in step.gaps.iter().zip(&marks) {
            let next = t + g;
            t = if next > t { next } else { f64::from_bits(t.to_bits() + 1) };
            let e = Event::new(t, mark);
            state = event_model.advance(&state, e)?;
            if t >= instance.horizon_start && t < t_end {
                if let Some(b) = grid.bin_of(t) {
                    events.push(ForecastEvent { time: t, mark, bin: b + 1 });
                }
            }
            last = Some(e);
        }
        if let Some(e) = last {
            cstate = compound_model.advance(&cstate, e)?;
        }
    }
    if truncated {
        log::warn!("hierarchical decoding hit the step cap before the horizon end");
    }
    Ok(Forecast { method: Method::Hierarchical, events, bins: Vec::new(), truncated })
}
