//! Event data model: ingestion, mark vocabularies, time bins, splits and
//! test-instance sampling.
//!
//! Times are `f64` seconds everywhere. Bins are half-open `[start, end)`.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SECONDS_PER_DAY: f64 = 86_400.0;

/// Label used for the merged rare-mark class.
pub const OTHER_LABEL: &str = "<OTHER>";

/// Mark id used by decoders that do not predict marks.
pub const SENTINEL_MARK: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub mark: u32,
}

impl Event {
    pub fn new(time: f64, mark: u32) -> Self {
        Self { time, mark }
    }
}

/// Hour-of-day of an absolute time, scaled to `[0, 1)`.
pub fn hour_feature(time: f64) -> f64 {
    time.rem_euclid(SECONDS_PER_DAY) / SECONDS_PER_DAY
}

/// Mapping between mark labels and dense ids.
///
/// Ids `0..labels.len()` name the kept labels; `other_id`, when present, is
/// the id every unknown label collapses to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkVocab {
    pub labels: Vec<String>,
    pub other_id: Option<u32>,
}

impl MarkVocab {
    /// Vocabulary without an OTHER class; every label keeps its own id.
    pub fn open(labels: Vec<String>) -> Self {
        Self { labels, other_id: None }
    }

    /// Number of ids, K.
    pub fn size(&self) -> usize {
        self.labels.len() + usize::from(self.other_id.is_some())
    }

    pub fn id_of(&self, label: &str) -> Option<u32> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| i as u32)
            .or(self.other_id)
    }

    pub fn label_of(&self, id: u32) -> Option<&str> {
        if Some(id) == self.other_id {
            return Some(OTHER_LABEL);
        }
        self.labels.get(id as usize).map(String::as_str)
    }

    /// JSON object mapping label to id.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (i, l) in self.labels.iter().enumerate() {
            map.insert(l.clone(), serde_json::Value::from(i as u64));
        }
        if let Some(o) = self.other_id {
            map.insert(OTHER_LABEL.to_string(), serde_json::Value::from(o));
        }
        serde_json::Value::Object(map)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSequence {
    pub events: Vec<Event>,
    pub vocab: MarkVocab,
    pub time_unit: String,
}

impl EventSequence {
    /// Builds a sequence, stably sorting events by time and validating marks.
    pub fn new(mut events: Vec<Event>, vocab: MarkVocab) -> Result<Self> {
        let k = vocab.size();
        for e in &events {
            if !e.time.is_finite() || e.time < 0.0 {
                return Err(Error::Domain(format!("event time {} is not a finite non-negative value", e.time)));
            }
            if e.mark as usize >= k {
                return Err(Error::Vocab { mark: e.mark, size: k });
            }
        }
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        Ok(Self { events, vocab, time_unit: "seconds".to_string() })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.time).collect()
    }

    pub fn marks(&self) -> Vec<u32> {
        self.events.iter().map(|e| e.mark).collect()
    }

    pub fn first_time(&self) -> Option<f64> {
        self.events.first().map(|e| e.time)
    }

    pub fn last_time(&self) -> Option<f64> {
        self.events.last().map(|e| e.time)
    }

    /// Events with `start <= t < end`, sharing this sequence's vocabulary.
    pub fn window(&self, start: f64, end: f64) -> EventSequence {
        let lo = self.events.partition_point(|e| e.time < start);
        let hi = self.events.partition_point(|e| e.time < end);
        EventSequence {
            events: self.events[lo..hi.max(lo)].to_vec(),
            vocab: self.vocab.clone(),
            time_unit: self.time_unit.clone(),
        }
    }

    /// Re-expresses the marks of this sequence in `vocab`, by label.
    pub fn remap(&self, vocab: &MarkVocab) -> Result<EventSequence> {
        let mut cache: HashMap<u32, u32> = HashMap::new();
        let mut events = Vec::with_capacity(self.events.len());
        for e in &self.events {
            let id = match cache.get(&e.mark) {
                Some(&id) => id,
                None => {
                    let label = self
                        .vocab
                        .label_of(e.mark)
                        .ok_or(Error::Vocab { mark: e.mark, size: self.vocab.size() })?;
                    let id = vocab.id_of(label).ok_or_else(|| {
                        Error::Contract(format!("label {label:?} has no id in target vocabulary"))
                    })?;
                    cache.insert(e.mark, id);
                    id
                }
            };
            events.push(Event::new(e.time, id));
        }
        Ok(EventSequence { events, vocab: vocab.clone(), time_unit: self.time_unit.clone() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    pub fn from_path(path: &std::path::Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Format::Csv,
            _ => Format::Jsonl,
        }
    }
}

/// Field names of the time and mark columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub time_field: String,
    pub mark_field: String,
}

impl Default for Schema {
    fn default() -> Self {
        Self { time_field: "time".into(), mark_field: "mark".into() }
    }
}

fn parse_time(v: &serde_json::Value) -> Option<f64> {
    match v {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn parse_mark(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Reads raw `(time, label)` records and returns a time-sorted sequence.
///
/// Ids are assigned to labels by first occurrence in time order.
pub fn ingest_events<R: BufRead>(source: R, format: Format, schema: &Schema) -> Result<EventSequence> {
    let mut raw: Vec<(f64, String)> = Vec::new();
    let bad = |line: usize, message: String| Error::Parse { line, message };
    match format {
        Format::Jsonl => {
            for (i, line) in source.lines().enumerate() {
                let line_no = i + 1;
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: serde_json::Value =
                    serde_json::from_str(&line).map_err(|e| bad(line_no, e.to_string()))?;
                let time = rec
                    .get(&schema.time_field)
                    .and_then(parse_time)
                    .ok_or_else(|| bad(line_no, format!("missing or invalid {:?}", schema.time_field)))?;
                let mark = rec
                    .get(&schema.mark_field)
                    .and_then(parse_mark)
                    .ok_or_else(|| bad(line_no, format!("missing or invalid {:?}", schema.mark_field)))?;
                raw.push((time, mark));
            }
        }
        Format::Csv => {
            let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(source);
            let headers = rdr.headers().map_err(|e| bad(1, e.to_string()))?.clone();
            let col = |name: &str| {
                headers
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| bad(1, format!("missing column {name:?}")))
            };
            let (tc, mc) = (col(&schema.time_field)?, col(&schema.mark_field)?);
            for (i, rec) in rdr.records().enumerate() {
                let line_no = i + 2;
                let rec = rec.map_err(|e| bad(line_no, e.to_string()))?;
                let time: f64 = rec
                    .get(tc)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| bad(line_no, format!("missing or invalid {:?}", schema.time_field)))?;
                let mark = rec
                    .get(mc)
                    .filter(|s| !s.is_empty())
                    .ok_or_else(|| bad(line_no, format!("missing {:?}", schema.mark_field)))?;
                raw.push((time, mark.to_string()));
            }
        }
    }
    if raw.is_empty() {
        return Err(Error::EmptySequence);
    }
    for (i, (t, _)) in raw.iter().enumerate() {
        if !t.is_finite() || *t < 0.0 {
            return Err(bad(i + 1, format!("time {t} is not a finite non-negative value")));
        }
    }
    raw.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut labels: Vec<String> = Vec::new();
    let mut ids: HashMap<String, u32> = HashMap::new();
    let events = raw
        .into_iter()
        .map(|(t, label)| {
            let id = *ids.entry(label.clone()).or_insert_with(|| {
                labels.push(label);
                (labels.len() - 1) as u32
            });
            Event::new(t, id)
        })
        .collect();
    EventSequence::new(events, MarkVocab::open(labels))
}

/// Writes a sequence in the same record layout `ingest_events` reads.
pub fn export_events<W: Write>(seq: &EventSequence, format: Format, schema: &Schema, mut sink: W) -> Result<()> {
    match format {
        Format::Jsonl => {
            for e in &seq.events {
                let label = seq.vocab.label_of(e.mark).unwrap_or(OTHER_LABEL);
                let mut rec = serde_json::Map::new();
                rec.insert(schema.time_field.clone(), serde_json::Value::from(e.time));
                rec.insert(schema.mark_field.clone(), serde_json::Value::from(label));
                serde_json::to_writer(&mut sink, &rec)?;
                sink.write_all(b"\n")?;
            }
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(sink);
            w.write_record([&schema.time_field, &schema.mark_field])?;
            for e in &seq.events {
                let label = seq.vocab.label_of(e.mark).unwrap_or(OTHER_LABEL);
                w.write_record([e.time.to_string().as_str(), label])?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

/// Keeps the `top_k` most frequent labels (ties by first occurrence) and
/// merges everything else into one OTHER id, giving `K = kept + 1`.
pub fn build_mark_vocab(seq: &EventSequence, top_k: usize) -> Result<MarkVocab> {
    if top_k == 0 {
        return Err(Error::Contract("top_k must be at least 1".into()));
    }
    // (count, first occurrence index) per source id
    let mut stats: HashMap<u32, (usize, usize)> = HashMap::new();
    for (i, e) in seq.events.iter().enumerate() {
        stats.entry(e.mark).or_insert((0, i)).0 += 1;
    }
    let mut ranked: Vec<(u32, usize, usize)> = stats.into_iter().map(|(m, (n, first))| (m, n, first)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    let labels: Vec<String> = ranked
        .iter()
        .take(top_k)
        .map(|(m, _, _)| seq.vocab.label_of(*m).unwrap_or(OTHER_LABEL).to_string())
        .collect();
    let other = labels.len() as u32;
    Ok(MarkVocab { labels, other_id: Some(other) })
}

/// Contiguous train/validation/test split by event index.
pub fn split_by_time(
    seq: &EventSequence,
    fractions: (f64, f64, f64),
) -> Result<(EventSequence, EventSequence, EventSequence)> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!("fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let n = seq.len();
    if n < 3 {
        return Err(Error::Split(format!("need at least 3 events, got {n}")));
    }
    // guard against 0.6 * 10 = 5.999... style rounding
    let n_train = ((a * n as f64) + 1e-9).floor() as usize;
    let n_val = ((b * n as f64) + 1e-9).floor() as usize;
    let part = |r: std::ops::Range<usize>| EventSequence {
        events: seq.events[r].to_vec(),
        vocab: seq.vocab.clone(),
        time_unit: seq.time_unit.clone(),
    };
    Ok((part(0..n_train), part(n_train..n_train + n_val), part(n_train + n_val..n)))
}

/// Equal-width bins `[origin + bΔ, origin + (b+1)Δ)` for `b in 0..num_bins`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinGrid {
    pub origin: f64,
    pub delta: f64,
    pub num_bins: usize,
}

impl BinGrid {
    pub fn new(origin: f64, delta: f64, num_bins: usize) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::InvalidGrid(format!("delta must be positive, got {delta}")));
        }
        if num_bins == 0 {
            return Err(Error::InvalidGrid("grid needs at least one bin".into()));
        }
        if !origin.is_finite() {
            return Err(Error::InvalidGrid(format!("origin {origin} is not finite")));
        }
        Ok(Self { origin, delta, num_bins })
    }

    pub fn start(&self, b: usize) -> f64 {
        self.origin + b as f64 * self.delta
    }

    pub fn end(&self, b: usize) -> f64 {
        self.origin + (b + 1) as f64 * self.delta
    }

    pub fn midpoint(&self, b: usize) -> f64 {
        self.origin + (b as f64 + 0.5) * self.delta
    }

    pub fn span_end(&self) -> f64 {
        self.end(self.num_bins - 1)
    }

    /// Index of the bin holding `t`, if any.
    pub fn bin_of(&self, t: f64) -> Option<usize> {
        if t < self.origin || t >= self.span_end() {
            return None;
        }
        let mut b = ((t - self.origin) / self.delta).floor() as usize;
        // floating division can land one bin off near boundaries
        if b >= self.num_bins || t < self.start(b) {
            b = b.saturating_sub(1);
        } else if t >= self.end(b) {
            b += 1;
        }
        (b < self.num_bins).then_some(b)
    }
}

/// Number of events per bin; events outside the grid are ignored.
pub fn bin_counts(events: &[Event], grid: &BinGrid) -> Result<Vec<usize>> {
    if !(grid.delta > 0.0) {
        return Err(Error::InvalidGrid(format!("delta must be positive, got {}", grid.delta)));
    }
    let mut counts = vec![0usize; grid.num_bins];
    for e in events {
        if let Some(b) = grid.bin_of(e.time) {
            counts[b] += 1;
        }
    }
    Ok(counts)
}

/// One evaluation unit: history `[T_s, T)`, horizon `[T, T_e)` and the gold
/// events inside the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastInstance {
    pub history_start: f64,
    pub history: EventSequence,
    pub horizon_start: f64,
    pub horizon_end: f64,
    pub delta: f64,
    pub gold: EventSequence,
}

impl ForecastInstance {
    pub fn from_window(seq: &EventSequence, history_start: f64, delta: f64, n_hist: usize, n_horizon: usize) -> Self {
        let t = history_start + n_hist as f64 * delta;
        let t_end = t + n_horizon as f64 * delta;
        Self {
            history_start,
            history: seq.window(history_start, t),
            horizon_start: t,
            horizon_end: t_end,
            delta,
            gold: seq.window(t, t_end),
        }
    }

    pub fn horizon_bins(&self) -> usize {
        ((self.horizon_end - self.horizon_start) / self.delta).round() as usize
    }

    pub fn horizon_grid(&self) -> BinGrid {
        BinGrid { origin: self.horizon_start, delta: self.delta, num_bins: self.horizon_bins().max(1) }
    }
}

/// Draws `m` windows with independent uniform start times inside the test
/// span. Windows may overlap.
pub fn sample_test_instances(
    test: &EventSequence,
    delta: f64,
    n_hist: usize,
    n_horizon: usize,
    m: usize,
    seed: u64,
) -> Result<Vec<ForecastInstance>> {
    if !(delta > 0.0) {
        return Err(Error::InvalidGrid(format!("delta must be positive, got {delta}")));
    }
    let (first, last) = match (test.first_time(), test.last_time()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::InstanceSampling("test sequence is empty".into())),
    };
    let window = (n_hist + n_horizon) as f64 * delta;
    let slack = (last - first) - window;
    if slack < 0.0 {
        return Err(Error::InstanceSampling(format!(
            "test span {} is shorter than the {}-bin window ({window})",
            last - first,
            n_hist + n_horizon
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..m)
        .map(|_| {
            let ts = if slack > 0.0 { first + rng.random::<f64>() * slack } else { first };
            ForecastInstance::from_window(test, ts, delta, n_hist, n_horizon)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_of(times: &[f64]) -> EventSequence {
        EventSequence::new(times.iter().map(|&t| Event::new(t, 0)).collect(), MarkVocab::open(vec!["a".into()])).unwrap()
    }

    #[test]
    fn jsonl_ingest_sorts() {
        let src = r#"{"time": 5, "mark": "x"}
{"time": 1.0, "mark": "y"}
{"time": "3", "mark": "x"}
"#;
        let seq = ingest_events(src.as_bytes(), Format::Jsonl, &Schema::default()).unwrap();
        assert_eq!(seq.times(), vec![1.0, 3.0, 5.0]);
        assert_eq!(seq.vocab.labels, vec!["y", "x"]);
        assert_eq!(seq.marks(), vec![0, 1, 1]);
    }

    #[test]
    fn missing_mark_reports_line() {
        let src = "{\"time\": 1, \"mark\": \"a\"}\n{\"time\": 2}\n";
        match ingest_events(src.as_bytes(), Format::Jsonl, &Schema::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_missing_mark_reports_line() {
        let src = "time,mark\n1,a\n2,\n";
        match ingest_events(src.as_bytes(), Format::Csv, &Schema::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(
            ingest_events("".as_bytes(), Format::Jsonl, &Schema::default()),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn custom_schema_fields() {
        let schema = Schema { time_field: "ts".into(), mark_field: "zone".into() };
        let src = "ts,zone\n2.5,A\n0.5,B\n";
        let seq = ingest_events(src.as_bytes(), Format::Csv, &schema).unwrap();
        assert_eq!(seq.times(), vec![0.5, 2.5]);
    }

    #[test]
    fn vocab_frequency_order() {
        let labels: Vec<String> = ["C", "A", "B"].iter().map(|s| s.to_string()).collect();
        let marks = [1, 1, 2, 0, 1, 2, 1, 2, 1];
        let events = marks.iter().enumerate().map(|(i, &m)| Event::new(i as f64, m)).collect();
        let seq = EventSequence::new(events, MarkVocab::open(labels)).unwrap();
        let vocab = build_mark_vocab(&seq, 2).unwrap();
        assert_eq!(vocab.labels, vec!["A", "B"]);
        assert_eq!(vocab.size(), 3);
        assert_eq!(vocab.id_of("C"), Some(2));
        let remapped = seq.remap(&vocab).unwrap();
        assert_eq!(remapped.marks()[3], 2);
    }

    #[test]
    fn vocab_ties_by_first_occurrence() {
        let labels: Vec<String> = ["x", "y"].iter().map(|s| s.to_string()).collect();
        let events = vec![Event::new(0.0, 1), Event::new(1.0, 0), Event::new(2.0, 0), Event::new(3.0, 1)];
        let seq = EventSequence::new(events, MarkVocab::open(labels)).unwrap();
        assert_eq!(build_mark_vocab(&seq, 1).unwrap().labels, vec!["y"]);
    }

    #[test]
    fn vocab_degenerate_and_top10() {
        let seq = seq_of(&[1.0, 2.0]);
        assert_eq!(build_mark_vocab(&seq, 10).unwrap().size(), 2);
        let labels: Vec<String> = (0..15).map(|i| format!("m{i}")).collect();
        let events = (0..300).map(|i| Event::new(i as f64, (i % 15) as u32)).collect();
        let seq = EventSequence::new(events, MarkVocab::open(labels)).unwrap();
        assert_eq!(build_mark_vocab(&seq, 10).unwrap().size(), 11);
        assert!(build_mark_vocab(&seq, 0).is_err());
    }

    #[test]
    fn split_sizes() {
        let sizes = |n: usize| {
            let seq = seq_of(&(0..n).map(|i| i as f64).collect::<Vec<_>>());
            let (a, b, c) = split_by_time(&seq, (0.6, 0.2, 0.2)).unwrap();
            (a.len(), b.len(), c.len())
        };
        assert_eq!(sizes(10), (6, 2, 2));
        assert_eq!(sizes(11), (6, 2, 3));
        assert!(split_by_time(&seq_of(&[1.0, 2.0]), (0.6, 0.2, 0.2)).is_err());
    }

    #[test]
    fn bins_half_open() {
        let seq = seq_of(&[0.5, 1.5, 1.6]);
        let grid = BinGrid::new(0.0, 1.0, 2).unwrap();
        assert_eq!(bin_counts(&seq.events, &grid).unwrap(), vec![1, 2]);
        let seq = seq_of(&[1.0]);
        assert_eq!(bin_counts(&seq.events, &grid).unwrap(), vec![0, 1]);
        assert!(BinGrid::new(0.0, 0.0, 2).is_err());
        let bad = BinGrid { origin: 0.0, delta: -1.0, num_bins: 1 };
        assert!(matches!(bin_counts(&seq.events, &bad), Err(Error::InvalidGrid(_))));
    }

    #[test]
    fn bin_of_awkward_delta() {
        let grid = BinGrid::new(0.0, 0.1, 100).unwrap();
        for b in 0..100 {
            assert_eq!(grid.bin_of(grid.start(b)), Some(b), "start of bin {b}");
        }
        assert_eq!(grid.bin_of(grid.span_end()), None);
    }

    #[test]
    fn instance_without_slack_starts_at_test_start() {
        let seq = seq_of(&(0..=23).map(|i| 10.0 + i as f64).collect::<Vec<_>>());
        let inst = sample_test_instances(&seq, 1.0, 20, 3, 4, 1).unwrap();
        assert!(inst.iter().all(|i| i.history_start == 10.0 && i.horizon_start == 30.0));
        let short = seq_of(&[0.0, 5.0]);
        assert!(matches!(sample_test_instances(&short, 1.0, 20, 3, 1, 0), Err(Error::InstanceSampling(_))));
    }

    #[test]
    fn instance_sampling_is_seeded() {
        let seq = seq_of(&(0..500).map(|i| i as f64 * 0.37).collect::<Vec<_>>());
        let a = sample_test_instances(&seq, 2.0, 20, 3, 10, 9).unwrap();
        let b = sample_test_instances(&seq, 2.0, 20, 3, 10, 9).unwrap();
        assert_eq!(a, b);
        let c = sample_test_instances(&seq, 2.0, 20, 3, 10, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn hour_encoding() {
        assert_eq!(hour_feature(0.0), 0.0);
        assert_eq!(hour_feature(12.0 * 3600.0), 0.5);
        assert_eq!(hour_feature(SECONDS_PER_DAY * 3.0 + 6.0 * 3600.0), 0.25);
    }
}
