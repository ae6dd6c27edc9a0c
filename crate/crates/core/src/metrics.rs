//! Forecast quality metrics: sequence Wasserstein distance, CountMAE and
//! mark-sequence BLEU, plus per-instance aggregation.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_stream::ForecastInstance;
use crate::inference::{Forecast, Method};

fn check_times(name: &str, times: &[f64], t_end: f64) -> Result<()> {
    if let Some(w) = times.windows(2).find(|w| w[1] < w[0]) {
        return Err(Error::Contract(format!("{name} times are not sorted: {} after {}", w[1], w[0])));
    }
    if let Some(t) = times.iter().find(|t| !t.is_finite() || **t >= t_end) {
        return Err(Error::Contract(format!("{name} time {t} is not before the horizon end {t_end}")));
    }
    Ok(())
}

/// Index-paired absolute time differences plus `t_end - t` for every
/// surplus event of the longer sequence. Symmetric in its arguments.
pub fn wasserstein_distance(truth: &[f64], pred: &[f64], t_end: f64) -> Result<f64> {
    check_times("truth", truth, t_end)?;
    check_times("prediction", pred, t_end)?;
    let n = truth.len().min(pred.len());
    let paired: f64 = truth.iter().zip(pred).map(|(a, b)| (a - b).abs()).sum();
    let longer = if truth.len() > pred.len() { truth } else { pred };
    let surplus: f64 = longer[n..].iter().map(|t| t_end - t).sum();
    Ok(paired + surplus)
}

/// Wasserstein terms split over `parts` equal slices of `[t_start, t_end)`.
///
/// Paired terms go to the slice holding the true time; surplus terms go
/// to the slice holding the surplus event. The parts sum to
/// [`wasserstein_distance`].
pub fn wasserstein_breakdown(truth: &[f64], pred: &[f64], t_start: f64, t_end: f64, parts: usize) -> Result<Vec<f64>> {
    check_times("truth", truth, t_end)?;
    check_times("prediction", pred, t_end)?;
    if parts == 0 || !(t_end > t_start) {
        return Err(Error::Contract("breakdown needs a non-empty horizon and at least one part".into()));
    }
    let width = (t_end - t_start) / parts as f64;
    let slot = |t: f64| (((t - t_start) / width).floor().max(0.0) as usize).min(parts - 1);
    let mut out = vec![0.0; parts];
    for (a, b) in truth.iter().zip(pred) {
        out[slot(*a)] += (a - b).abs();
    }
    let n = truth.len().min(pred.len());
    let longer = if truth.len() > pred.len() { truth } else { pred };
    for t in &longer[n..] {
        out[slot(*t)] += t_end - t;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountMaeMode {
    #[default]
    Absolute,
    Relative,
}

impl std::str::FromStr for CountMaeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(Self::Absolute),
            "relative" => Ok(Self::Relative),
            _ => Err(Error::Contract(format!("unknown CountMAE mode {s:?}"))),
        }
    }
}

fn count_in(times: &[f64], (a, b): (f64, f64)) -> usize {
    times.iter().filter(|&&t| t >= a && t < b).count()
}

/// Mean count error over half-open intervals. Relative mode divides each
/// error by `max(n_true, 1)`.
pub fn count_mae(truth: &[f64], pred: &[f64], intervals: &[(f64, f64)], mode: CountMaeMode) -> Result<f64> {
    if intervals.is_empty() {
        return Err(Error::Contract("CountMAE needs at least one interval".into()));
    }
    let total: f64 = intervals
        .iter()
        .map(|&iv| {
            let (t, p) = (count_in(truth, iv), count_in(pred, iv));
            let err = t.abs_diff(p) as f64;
            match mode {
                CountMaeMode::Absolute => err,
                CountMaeMode::Relative => err / t.max(1) as f64,
            }
        })
        .sum();
    Ok(total / intervals.len() as f64)
}

/// Precision floor used for n-gram orders with no match.
pub const BLEU_SMOOTHING: f64 = 1e-6;

fn ngram_counts(seq: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut m = HashMap::new();
    for g in seq.windows(n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// BLEU of `pred` against a single reference `truth`.
///
/// Modified n-gram precision for `n = 1..=max_n` (orders longer than the
/// prediction are dropped), uniform weights, brevity penalty, and a
/// precision of `ε / total` for orders without matches.
pub fn bleu_score(truth: &[u32], pred: &[u32], max_n: usize) -> f64 {
    if pred.is_empty() {
        return if truth.is_empty() { 1.0 } else { 0.0 };
    }
    if truth.is_empty() {
        return 0.0;
    }
    let order = max_n.min(pred.len());
    let mut log_sum = 0.0;
    for n in 1..=order {
        let reference = ngram_counts(truth, n);
        let hyp = ngram_counts(pred, n);
        let total = pred.len() + 1 - n;
        let matched: usize = hyp.iter().map(|(g, c)| (*c).min(reference.get(g).copied().unwrap_or(0))).sum();
        let p = if matched == 0 { BLEU_SMOOTHING / total as f64 } else { matched as f64 / total as f64 };
        log_sum += p.ln();
    }
    let (c, r) = (pred.len() as f64, truth.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / order as f64).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub instance: usize,
    pub n_true: usize,
    pub n_pred: usize,
    pub wass_dist: f64,
    pub count_mae: f64,
    pub count_mae_relative: f64,
    pub bleu: f64,
    pub thirds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: Method,
    pub mode: CountMaeMode,
    pub instances: usize,
    pub wass_dist: f64,
    /// Mean CountMAE in the selected mode.
    pub count_mae: f64,
    pub count_mae_absolute: f64,
    pub count_mae_relative: f64,
    pub bleu: f64,
    /// Mean Wasserstein per horizon third.
    pub tick_breakdown: Vec<f64>,
    pub per_instance: Vec<InstanceMetrics>,
}

/// Scores one forecast against its instance. CountMAE intervals are the
/// horizon bins.
pub fn score_instance(index: usize, instance: &ForecastInstance, forecast: &Forecast) -> Result<InstanceMetrics> {
    let grid = instance.horizon_grid();
    let t_end = grid.span_end();
    let truth = instance.gold.times();
    let pred = forecast.times();
    let intervals: Vec<(f64, f64)> = (0..grid.num_bins).map(|b| (grid.start(b), grid.end(b))).collect();
    Ok(InstanceMetrics {
        instance: index,
        n_true: truth.len(),
        n_pred: pred.len(),
        wass_dist: wasserstein_distance(&truth, &pred, t_end)?,
        count_mae: count_mae(&truth, &pred, &intervals, CountMaeMode::Absolute)?,
        count_mae_relative: count_mae(&truth, &pred, &intervals, CountMaeMode::Relative)?,
        bleu: bleu_score(&instance.gold.marks(), &forecast.marks(), 4),
        thirds: wasserstein_breakdown(&truth, &pred, instance.horizon_start, t_end, 3)?,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Averages per-instance metrics. `forecasts[i]` must belong to `instances[i]`.
pub fn evaluate(
    method: Method,
    instances: &[ForecastInstance],
    forecasts: &[Forecast],
    mode: CountMaeMode,
) -> Result<MetricReport> {
    if instances.len() != forecasts.len() {
        return Err(Error::Contract(format!("{} instances but {} forecasts", instances.len(), forecasts.len())));
    }
    if instances.is_empty() {
        return Err(Error::Contract("nothing to evaluate".into()));
    }
    let per_instance: Vec<InstanceMetrics> = instances
        .iter()
        .zip(forecasts)
        .enumerate()
        .map(|(i, (inst, f))| score_instance(i, inst, f))
        .collect::<Result<_>>()?;
    Ok(aggregate(method, mode, per_instance))
}

pub fn aggregate(method: Method, mode: CountMaeMode, per_instance: Vec<InstanceMetrics>) -> MetricReport {
    let abs = mean(per_instance.iter().map(|m| m.count_mae));
    let rel = mean(per_instance.iter().map(|m| m.count_mae_relative));
    let parts = per_instance.first().map_or(3, |m| m.thirds.len());
    let tick_breakdown = (0..parts).map(|k| mean(per_instance.iter().map(|m| m.thirds[k]))).collect();
    MetricReport {
        method,
        mode,
        instances: per_instance.len(),
        wass_dist: mean(per_instance.iter().map(|m| m.wass_dist)),
        count_mae: match mode {
            CountMaeMode::Absolute => abs,
            CountMaeMode::Relative => rel,
        },
        count_mae_absolute: abs,
        count_mae_relative: rel,
        bleu: mean(per_instance.iter().map(|m| m.bleu)),
        tick_breakdown,
        per_instance,
    }
}

/// One CSV row per instance.
pub fn write_instance_csv<W: Write>(report: &MetricReport, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "method", "instance", "n_true", "n_pred", "wass_dist", "count_mae", "count_mae_relative", "bleu", "third_1",
        "third_2", "third_3",
    ])?;
    for m in &report.per_instance {
        let mut row =
            vec![report.method.to_string(), m.instance.to_string(), m.n_true.to_string(), m.n_pred.to_string()];
        row.extend([m.wass_dist, m.count_mae, m.count_mae_relative, m.bleu].map(|v| v.to_string()));
        row.extend(m.thirds.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean Wasserstein per horizon third, one row per method and third.
pub fn write_fig3_table<W: Write>(reports: &[MetricReport], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["method", "third", "wass_dist"])?;
    for r in reports {
        for (k, v) in r.tick_breakdown.iter().enumerate() {
            w.write_record([r.method.to_string(), (k + 1).to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
