//! Bin-by-bin joint decoding over the event and count models, plus the
//! baseline decoders.
//!
//! For each bin the event model is rolled forward by modes from the last
//! decoded event, fixing the per-step gap distributions. Each candidate
//! count `c` then gets a small QP ([`qp`]) that places exactly `c` events
//! in the bin, and the count maximizing `M_c + log N(c; ν, ρ)` is found by
//! [`search::argmax_count`]. The chosen events condition the next bin.

pub mod hierarchical;
pub mod qp;
pub mod search;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::count_model::CountModel;
use crate::error::{Error, Result};
use crate::event_model::{forward_sample, EventModel, EventModelState, SampleOptions, Stop, MIN_NORMALIZED_GAP};
use crate::event_stream::{Event, ForecastInstance, SENTINEL_MARK};
use crate::neural::{seeded_rng, GaussianParams};

pub use hierarchical::{compound_sequence, forecast_hierarchical, solve_compound_step, CompoundStep};
pub use qp::{solve_gap_qp, BinProblem, Constraint, ConstraintKind, GapState, QpSolution, QpStatus};
pub use search::{argmax_count, CountSearch, SearchStrategy};

/// Forecasting method, as named on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Dual,
    EventOnly,
    CountOnly,
    NoCountVariance,
    Hierarchical,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::Dual, Method::EventOnly, Method::CountOnly, Method::NoCountVariance, Method::Hierarchical];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dual => "dual",
            Method::EventOnly => "event-only",
            Method::CountOnly => "count-only",
            Method::NoCountVariance => "no-count-variance",
            Method::Hierarchical => "hierarchical",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown method {s:?}")))
    }
}

/// `cmax = max(1, min(max(r + 1, C_E), r + ⌈ρ⌉))` with `r = max(round(ν), 0)`.
pub fn cmax_rule(nu: f64, rho: f64, c_e: usize) -> usize {
    let r = nu.round().max(0.0) as usize;
    let cap = r + rho.max(0.0).ceil() as usize;
    (r + 1).max(c_e).min(cap).max(1)
}

/// Result of the mode rollout for one bin.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub problem: BinProblem,
    /// Mode events that land inside the bin.
    pub c_e: usize,
    /// The rollout stopped on the state cap before leaving the bin.
    pub cap_hit: bool,
}

/// Rolls the event model forward by modes from `state` and records the gap
/// distribution and mark of every step.
///
/// The anchor is the last event consumed by `state` (or `bin_start` for an
/// empty history). Steps are recorded until the rollout leaves the bin or
/// `⌈ν⌉ + ⌈ρ⌉ + 1` steps exist, then extended to `cmax + 1` steps.
pub fn rnn_states_for_bin(
    model: &EventModel,
    state: &EventModelState,
    bin_start: f64,
    width: f64,
    prior: GaussianParams,
) -> Result<Rollout> {
    let anchor = state.last_time.unwrap_or(bin_start);
    let offset = bin_start - anchor;
    if offset < 0.0 {
        return Err(Error::Infeasible(format!("last decoded event {anchor} lies after bin start {bin_start}")));
    }
    let bin_end = bin_start + width;
    let min_gap = MIN_NORMALIZED_GAP * model.gap_mean;
    let r = prior.mean.round().max(0.0) as usize;
    let cap = r + prior.std.max(0.0).ceil() as usize + 1;

    let mut s = state.clone();
    let mut t = anchor;
    let mut states = Vec::new();
    let mut c_e = 0;
    let mut exited = false;
    let push_step = |s: &mut EventModelState, t: &mut f64, states: &mut Vec<GapState>| -> Result<()> {
        let pred = model.predict(s)?;
        let mark = pred.mode_mark();
        states.push(GapState { gap: pred.gap, mark });
        *t += pred.gap.mean.max(min_gap);
        *s = model.advance(s, Event::new(*t, mark))?;
        Ok(())
    };
    while states.len() < cap {
        push_step(&mut s, &mut t, &mut states)?;
        if t >= bin_end {
            exited = true;
            break;
        }
        if t >= bin_start {
            c_e += 1;
        }
    }
    let cap_hit = !exited;
    if cap_hit && states.iter().all(|s| s.gap.mean <= min_gap) {
        log::warn!("rollout hit the {cap}-step cap inside bin [{bin_start}, {bin_end}); mean gaps are at the floor");
    } else if cap_hit {
        log::debug!("rollout hit the {cap}-step cap inside bin [{bin_start}, {bin_end})");
    }
    let cmax = cmax_rule(prior.mean, prior.std, c_e);
    while states.len() < cmax + 1 {
        push_step(&mut s, &mut t, &mut states)?;
    }
    states.truncate(cmax + 1);
    Ok(Rollout { problem: BinProblem { states, offset, width, count_prior: prior, cmax }, c_e, cap_hit })
}

/// How the count of a bin is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CountChoice {
    /// Maximize `M_c + log N(c; ν, ρ)`.
    Joint,
    /// Force `c = round(ν)`, clamped to `[0, cmax]`.
    MeanOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub choice: CountChoice,
    pub exhaustive_limit: usize,
    /// Re-roll the states once through the optimized events and re-solve.
    pub refresh_states: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self { choice: CountChoice::Joint, exhaustive_limit: search::EXHAUSTIVE_LIMIT, refresh_states: false }
    }
}

/// One forecast event; `bin` is 1-based within the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastEvent {
    pub time: f64,
    pub mark: u32,
    pub bin: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinDiagnostics {
    pub bin: usize,
    pub nu: f64,
    pub rho: f64,
    pub c_e: usize,
    pub cmax: usize,
    pub c_star: usize,
    /// `L(c*)`.
    pub objective: f64,
    pub qp_status: String,
    pub strategy: Option<SearchStrategy>,
    pub unimodal: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub method: Method,
    pub events: Vec<ForecastEvent>,
    /// Per-bin record; empty for decoders without a count step.
    pub bins: Vec<BinDiagnostics>,
    pub truncated: bool,
}

impl Forecast {
    pub fn times(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.time).collect()
    }

    pub fn marks(&self) -> Vec<u32> {
        self.events.iter().map(|e| e.mark).collect()
    }

    pub fn as_events(&self) -> Vec<Event> {
        self.events.iter().map(|e| Event::new(e.time, e.mark)).collect()
    }
}

/// Decoded content of one bin.
#[derive(Debug, Clone, PartialEq)]
pub struct BinSolution {
    pub c_star: usize,
    pub gaps: Vec<f64>,
    /// `L(c*)`.
    pub objective: f64,
    pub events: Vec<Event>,
    pub search: Option<CountSearch>,
    pub status: QpStatus,
}

/// Largest float strictly below `x`.
fn prev_float(x: f64) -> f64 {
    if x > 0.0 {
        f64::from_bits(x.to_bits() - 1)
    } else if x == 0.0 {
        -f64::from_bits(1)
    } else {
        f64::from_bits(x.to_bits() + 1)
    }
}

/// Turns the first `c` optimized gaps into event times inside
/// `[bin_start, bin_end)`, strictly increasing.
fn place_events(problem: &BinProblem, anchor: f64, bin_start: f64, gaps: &[f64], c: usize) -> Result<Vec<Event>> {
    let bin_end = bin_start + problem.width;
    let last_ok = prev_float(bin_end);
    let mut out: Vec<Event> = Vec::with_capacity(c);
    let mut t = anchor;
    for (i, g) in gaps[..c].iter().enumerate() {
        t += g;
        let mut ti = t.clamp(bin_start, last_ok);
        if let Some(prev) = out.last() {
            if ti <= prev.time {
                ti = f64::from_bits(prev.time.to_bits() + 1);
            }
        }
        if ti > last_ok {
            return Err(Error::Contract(format!("{c} events do not fit strictly inside the bin ending at {bin_end}")));
        }
        out.push(Event::new(ti, problem.states[i].mark));
    }
    Ok(out)
}

/// Solves one bin given its rollout.
pub fn solve_bin(
    model: &EventModel,
    state: &EventModelState,
    rollout: &Rollout,
    bin_start: f64,
    options: &DecodeOptions,
) -> Result<BinSolution> {
    let problem = &rollout.problem;
    let prior = problem.count_prior;
    let mut solutions: Vec<Option<QpSolution>> = vec![None; problem.cmax + 1];
    let score = |c: usize, solutions: &mut Vec<Option<QpSolution>>| -> f64 {
        match solve_gap_qp(problem, c) {
            Ok(s) => {
                let v = s.objective + prior.log_density(c as f64);
                solutions[c] = Some(s);
                v
            }
            Err(e) => {
                log::debug!("count {c} infeasible: {e}");
                f64::NEG_INFINITY
            }
        }
    };
    let (c_star, search) = match options.choice {
        CountChoice::Joint => {
            let s = argmax_count(problem.cmax, options.exhaustive_limit, |c| score(c, &mut solutions));
            (s.c_star, Some(s))
        }
        CountChoice::MeanOnly => {
            let forced = (prior.mean.round().max(0.0) as usize).min(problem.cmax);
            // nearest feasible count, preferring the smaller one on ties
            let mut chosen = 0;
            for d in 0..=problem.cmax {
                let below = forced.checked_sub(d);
                let above = (forced + d <= problem.cmax).then_some(forced + d);
                if let Some(c) = below.into_iter().chain(above).find(|&c| score(c, &mut solutions).is_finite()) {
                    chosen = c;
                    break;
                }
            }
            (chosen, None)
        }
    };
    let mut sol = match solutions[c_star].take() {
        Some(s) => s,
        None => solve_gap_qp(problem, c_star)?,
    };
    let anchor = bin_start - problem.offset;
    if options.refresh_states && c_star > 0 {
        let mut refreshed = problem.clone();
        let mut s = state.clone();
        let mut t = anchor;
        for i in 0..(c_star + 1).min(refreshed.states.len()) {
            let pred = model.predict(&s)?;
            refreshed.states[i].gap = pred.gap;
            if i < c_star {
                t += sol.gaps[i];
                s = model.advance(&s, Event::new(t, refreshed.states[i].mark))?;
            }
        }
        if let Ok(r) = solve_gap_qp(&refreshed, c_star) {
            sol = r;
        }
    }
    let events = place_events(problem, anchor, bin_start, &sol.gaps, c_star)?;
    let objective = sol.objective + prior.log_density(c_star as f64);
    Ok(BinSolution { c_star, gaps: sol.gaps, objective, events, search, status: sol.status })
}

fn check_grid(count_model: &CountModel, instance: &ForecastInstance) -> Result<()> {
    let (a, b) = (count_model.delta(), instance.delta);
    if (a - b).abs() > 1e-9 * a.abs().max(b.abs()) {
        return Err(Error::Mismatch(format!("count model was trained with Δ = {a}, instance uses Δ = {b}")));
    }
    Ok(())
}

fn decode(
    event_model: &EventModel,
    count_model: &CountModel,
    instance: &ForecastInstance,
    options: &DecodeOptions,
    method: Method,
) -> Result<Forecast> {
    check_grid(count_model, instance)?;
    let grid = instance.horizon_grid();
    let history = &instance.history.events;
    let prediction = count_model.predict_horizon(history, instance.history_start, instance.horizon_start, grid.num_bins)?;
    let mut state = event_model.condition(history)?;
    let mut events = Vec::new();
    let mut bins = Vec::with_capacity(grid.num_bins);
    for (b, prior) in prediction.per_bin.iter().enumerate() {
        let start = grid.start(b);
        let solved = rnn_states_for_bin(event_model, &state, start, grid.delta, *prior)
            .and_then(|roll| solve_bin(event_model, &state, &roll, start, options).map(|sol| (roll, sol)));
        let (roll, sol) = match solved {
            Ok(x) => x,
            Err(e @ (Error::Infeasible(_) | Error::Contract(_))) => {
                log::warn!("bin {} skipped: {e}", b + 1);
                bins.push(BinDiagnostics {
                    bin: b + 1,
                    nu: prior.mean,
                    rho: prior.std,
                    c_e: 0,
                    cmax: 0,
                    c_star: 0,
                    objective: f64::NEG_INFINITY,
                    qp_status: "infeasible".into(),
                    strategy: None,
                    unimodal: None,
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        for e in &sol.events {
            state = event_model.advance(&state, *e)?;
            events.push(ForecastEvent { time: e.time, mark: e.mark, bin: b + 1 });
        }
        bins.push(BinDiagnostics {
            bin: b + 1,
            nu: prior.mean,
            rho: prior.std,
            c_e: roll.c_e,
            cmax: roll.problem.cmax,
            c_star: sol.c_star,
            objective: sol.objective,
            qp_status: sol.status.to_string(),
            strategy: sol.search.as_ref().map(|s| s.strategy),
            unimodal: sol.search.as_ref().and_then(|s| s.unimodal),
        });
    }
    Ok(Forecast { method, events, bins, truncated: false })
}

/// Joint decoding of the horizon of `instance`.
pub fn forecast(
    event_model: &EventModel,
    count_model: &CountModel,
    instance: &ForecastInstance,
    options: &DecodeOptions,
) -> Result<Forecast> {
    let opts = DecodeOptions { choice: CountChoice::Joint, ..*options };
    decode(event_model, count_model, instance, &opts, Method::Dual)
}

/// Joint decoding with each bin's count fixed at the rounded mean.
pub fn forecast_no_count_variance(
    event_model: &EventModel,
    count_model: &CountModel,
    instance: &ForecastInstance,
    options: &DecodeOptions,
) -> Result<Forecast> {
    let opts = DecodeOptions { choice: CountChoice::MeanOnly, ..*options };
    decode(event_model, count_model, instance, &opts, Method::NoCountVariance)
}

/// Mode forward sampling of the event model alone.
pub fn forecast_event_only(event_model: &EventModel, instance: &ForecastInstance) -> Result<Forecast> {
    let grid = instance.horizon_grid();
    let sample = forward_sample(
        event_model,
        &instance.history.events,
        instance.horizon_start,
        Stop::EndTime(grid.span_end()),
        SampleOptions::default(),
    )?;
    let events = sample
        .events
        .iter()
        .filter_map(|e| grid.bin_of(e.time).map(|b| ForecastEvent { time: e.time, mark: e.mark, bin: b + 1 }))
        .collect();
    Ok(Forecast { method: Method::EventOnly, events, bins: Vec::new(), truncated: sample.truncated })
}

/// `round(max(ν_b, 0))` events per bin at uniform random times; marks are
/// [`SENTINEL_MARK`].
pub fn forecast_count_only(count_model: &CountModel, instance: &ForecastInstance, seed: u64) -> Result<Forecast> {
    check_grid(count_model, instance)?;
    let grid = instance.horizon_grid();
    let prediction = count_model.predict_horizon(
        &instance.history.events,
        instance.history_start,
        instance.horizon_start,
        grid.num_bins,
    )?;
    let mut rng = seeded_rng(seed);
    let mut events = Vec::new();
    for (b, p) in prediction.per_bin.iter().enumerate() {
        let n = p.mean.round().max(0.0) as usize;
        let (start, end) = (grid.start(b), grid.end(b));
        let mut times: Vec<f64> = (0..n).map(|_| rng.random_range(start..end)).collect();
        times.sort_by(f64::total_cmp);
        events.extend(times.into_iter().map(|time| ForecastEvent { time, mark: SENTINEL_MARK, bin: b + 1 }));
    }
    Ok(Forecast { method: Method::CountOnly, events, bins: Vec::new(), truncated: false })
}
