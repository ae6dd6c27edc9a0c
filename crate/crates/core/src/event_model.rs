//! Intensity-free recurrent event model.
//!
//! Each event is embedded as `[mark embedding (8), normalized gap, hour/24]`
//! and fed to a GRU. From the state `h_i` the model predicts a softmax over
//! the next mark and a Gaussian over the next gap, with
//! `μ = softplus(w_μ·h + b_μ)` and `σ = max(softplus(w_σ·h + b_σ), floor)`.
//! Gaps are normalized by the mean training gap and denormalized on output,
//! so every [`Prediction`] is in seconds.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_stream::{hour_feature, Event, EventSequence, MarkVocab};
use crate::neural::{
    seeded_rng, softmax, softplus, Adam, AdamConfig, Dense, GaussianParams, Grads, GruCell, ParamId, ParamStore, Tape,
    Var,
};

/// Lower bound on a sampled normalized gap so decoded times strictly increase.
pub const MIN_NORMALIZED_GAP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventModelConfig {
    pub hidden_size: usize,
    pub mark_embed_size: usize,
    pub vocab_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub subseq_len: usize,
    /// Distance between the starts of consecutive training windows.
    pub window_stride: usize,
    pub adam: AdamConfig,
    pub gap_loss_weight: f64,
    pub mark_loss_weight: f64,
    /// Floor on the predicted std, in normalized gap units.
    pub std_floor: f64,
    pub seed: u64,
}

impl EventModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            hidden_size: 32,
            mark_embed_size: 8,
            vocab_size,
            epochs: 10,
            batch_size: 32,
            subseq_len: 80,
            window_stride: 10,
            adam: AdamConfig::default(),
            gap_loss_weight: 1.0,
            mark_loss_weight: 1.0,
            std_floor: 1e-3,
            seed: 0,
        }
    }

    pub fn input_size(&self) -> usize {
        self.mark_embed_size + 2
    }

    fn validate(&self) -> Result<()> {
        let sizes = [
            self.hidden_size,
            self.mark_embed_size,
            self.vocab_size,
            self.batch_size,
            self.subseq_len,
            self.window_stride,
        ];
        if sizes.iter().any(|&s| s == 0) || self.subseq_len < 2 {
            return Err(Error::Contract(format!("event model sizes must be positive: {self:?}")));
        }
        if !(self.std_floor > 0.0) {
            return Err(Error::Contract("std floor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Layers {
    embed_w: ParamId,
    embed_b: ParamId,
    gru: GruCell,
    mark_head: Dense,
    mu_head: Dense,
    sigma_head: Dense,
}

/// Recurrent state after consuming a prefix of events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventModelState {
    pub h: Vec<f64>,
    pub last_time: Option<f64>,
    pub last_mark: Option<u32>,
}

/// Next-event distribution predicted from a state.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mark_probs: Vec<f64>,
    /// Gap to the next event, in seconds.
    pub gap: GaussianParams,
}

impl Prediction {
    /// Most probable mark; ties go to the lowest id.
    pub fn mode_mark(&self) -> u32 {
        let mut best = 0;
        for (i, p) in self.mark_probs.iter().enumerate() {
            if *p > self.mark_probs[best] {
                best = i;
            }
        }
        best as u32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventModel {
    pub config: EventModelConfig,
    pub params: ParamStore,
    /// Mean inter-arrival gap of the training data, in seconds.
    pub gap_mean: f64,
    pub vocab: MarkVocab,
    layers: Layers,
}

impl EventModel {
    pub fn new(config: EventModelConfig, vocab: MarkVocab, gap_mean: f64) -> Result<Self> {
        config.validate()?;
        if vocab.size() != config.vocab_size {
            return Err(Error::Mismatch(format!(
                "vocabulary has {} ids but config expects {}",
                vocab.size(),
                config.vocab_size
            )));
        }
        if !(gap_mean > 0.0) || !gap_mean.is_finite() {
            return Err(Error::Domain(format!("gap normalizer must be positive, got {gap_mean}")));
        }
        let mut rng = seeded_rng(config.seed);
        let mut params = ParamStore::new(config.seed);
        let (k, e, hs) = (config.vocab_size, config.mark_embed_size, config.hidden_size);
        let embed_w = params.add_uniform("embed.w", e, k, k, &mut rng);
        let embed_b = params.add_uniform("embed.b", e, 1, k, &mut rng);
        let gru = GruCell::new(&mut params, "gru", config.input_size(), hs, &mut rng);
        let mark_head = Dense::new(&mut params, "mark", hs, k, &mut rng);
        let mu_head = Dense::new(&mut params, "mu", hs, 1, &mut rng);
        let sigma_head = Dense::new(&mut params, "sigma", hs, 1, &mut rng);
        let layers = Layers { embed_w, embed_b, gru, mark_head, mu_head, sigma_head };
        Ok(Self { config, params, gap_mean, vocab, layers })
    }

    /// Rebuilds a model around stored parameters, validating shapes.
    pub fn from_parts(config: EventModelConfig, vocab: MarkVocab, gap_mean: f64, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, vocab, gap_mean)?;
        params.check_compatible(&model.params)?;
        if !params.all_finite() {
            return Err(Error::NonFinite("event model parameters".into()));
        }
        model.params = params;
        Ok(model)
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// `[embedding, normalized gap, hour]`.
    pub fn embed_event(&self, mark: u32, normalized_gap: f64, hour: f64) -> Result<Vec<f64>> {
        let k = self.config.vocab_size;
        if mark as usize >= k {
            return Err(Error::Vocab { mark, size: k });
        }
        let w = self.params.get(self.layers.embed_w);
        let b = self.params.get(self.layers.embed_b);
        let mut x: Vec<f64> = (0..w.rows).map(|r| w.at(r, mark as usize) + b.data[r]).collect();
        x.push(normalized_gap);
        x.push(hour);
        Ok(x)
    }

    pub fn normalize_gap(&self, gap: f64) -> f64 {
        gap / self.gap_mean
    }

    pub fn initial_state(&self) -> EventModelState {
        EventModelState { h: vec![0.0; self.config.hidden_size], last_time: None, last_mark: None }
    }

    /// Next-event distribution from `state`.
    pub fn predict(&self, state: &EventModelState) -> Result<Prediction> {
        let l = &self.layers;
        let logits = l.mark_head.forward(&self.params, &state.h)?;
        let mu = softplus(l.mu_head.forward(&self.params, &state.h)?[0]);
        let sigma = softplus(l.sigma_head.forward(&self.params, &state.h)?[0]).max(self.config.std_floor);
        Ok(Prediction {
            mark_probs: softmax(&logits),
            gap: GaussianParams { mean: mu * self.gap_mean, std: sigma * self.gap_mean },
        })
    }

    /// Consumes one event and returns the new state with its prediction.
    pub fn step(&self, state: &EventModelState, event: Event) -> Result<(EventModelState, Prediction)> {
        let gap = match state.last_time {
            Some(last) if event.time < last => return Err(Error::Ordering { time: event.time, last }),
            Some(last) => event.time - last,
            None => 0.0,
        };
        let x = self.embed_event(event.mark, self.normalize_gap(gap), hour_feature(event.time))?;
        let h = self.layers.gru.forward(&self.params, &x, &state.h)?;
        let next = EventModelState { h, last_time: Some(event.time), last_mark: Some(event.mark) };
        let pred = self.predict(&next)?;
        Ok((next, pred))
    }

    /// Advances the state without computing the output heads.
    pub fn advance(&self, state: &EventModelState, event: Event) -> Result<EventModelState> {
        let gap = match state.last_time {
            Some(last) if event.time < last => return Err(Error::Ordering { time: event.time, last }),
            Some(last) => event.time - last,
            None => 0.0,
        };
        let x = self.embed_event(event.mark, self.normalize_gap(gap), hour_feature(event.time))?;
        let h = self.layers.gru.forward(&self.params, &x, &state.h)?;
        Ok(EventModelState { h, last_time: Some(event.time), last_mark: Some(event.mark) })
    }

    /// State after consuming `events` from the initial state.
    pub fn condition(&self, events: &[Event]) -> Result<EventModelState> {
        events.iter().try_fold(self.initial_state(), |s, e| self.advance(&s, *e))
    }

    fn window_loss_tape(&self, tape: &mut Tape<'_>, window: &[Event]) -> Result<Var> {
        let l = &self.layers;
        let mut h = tape.input(vec![0.0; self.config.hidden_size]);
        let mut terms = Vec::with_capacity(window.len());
        for (i, e) in window.iter().enumerate() {
            if i > 0 {
                let gap = self.normalize_gap(e.time - window[i - 1].time);
                let logits = l.mark_head.forward_tape(tape, h)?;
                let ce = tape.softmax_xent(logits, e.mark as usize)?;
                let mu_pre = l.mu_head.forward_tape(tape, h)?;
                let mu = tape.softplus(mu_pre);
                let s_pre = l.sigma_head.forward_tape(tape, h)?;
                let s_soft = tape.softplus(s_pre);
                let sigma = tape.floor_max(s_soft, self.config.std_floor);
                let nll = tape.gaussian_nll(gap, mu, sigma)?;
                let a = tape.scale(nll, self.config.gap_loss_weight);
                let b = tape.scale(ce, self.config.mark_loss_weight);
                terms.push(a);
                terms.push(b);
            }
            if i + 1 < window.len() {
                let gap = if i == 0 { 0.0 } else { self.normalize_gap(e.time - window[i - 1].time) };
                if e.mark as usize >= self.config.vocab_size {
                    return Err(Error::Vocab { mark: e.mark, size: self.config.vocab_size });
                }
                let emb = tape.column(l.embed_w, e.mark as usize)?;
                let b = tape.param(l.embed_b);
                let emb = tape.add(emb, b)?;
                let feats = tape.input(vec![gap, hour_feature(e.time)]);
                let x = tape.concat(&[emb, feats]);
                h = l.gru.forward_tape(tape, x, h)?;
            }
        }
        let total = tape.sum(&terms);
        Ok(tape.scale(total, 1.0 / (window.len() - 1) as f64))
    }

    /// Mean per-event loss over a window, via the taped path, plus gradients.
    ///
    /// The first event only conditions the state; events `2..` are scored.
    pub fn loss_and_grads(&self, window: &[Event]) -> Result<(f64, Grads)> {
        if window.len() < 2 {
            return Err(Error::Contract("a training window needs at least two events".into()));
        }
        let mut tape = Tape::new(&self.params);
        let loss = self.window_loss_tape(&mut tape, window)?;
        let grads = tape.backward(loss)?;
        Ok((tape.scalar(loss), grads))
    }

    /// Same loss as [`Self::loss_and_grads`], computed with the plain forward path.
    pub fn window_loss(&self, window: &[Event]) -> Result<f64> {
        if window.len() < 2 {
            return Err(Error::Contract("a training window needs at least two events".into()));
        }
        let mut state = self.initial_state();
        let mut total = 0.0;
        for (i, e) in window.iter().enumerate() {
            if i > 0 {
                let pred = self.predict(&state)?;
                let gap = self.normalize_gap(e.time - window[i - 1].time);
                let g = GaussianParams { mean: pred.gap.mean / self.gap_mean, std: pred.gap.std / self.gap_mean };
                total += self.config.gap_loss_weight * crate::neural::gaussian_nll(gap, g)?;
                total -= self.config.mark_loss_weight * pred.mark_probs[e.mark as usize].ln();
            }
            if i + 1 < window.len() {
                state = self.advance(&state, *e)?;
            }
        }
        Ok(total / (window.len() - 1) as f64)
    }

    fn mean_loss(&self, windows: &[&[Event]]) -> Result<f64> {
        let mut sum = 0.0;
        for w in windows {
            sum += self.window_loss(w)?;
        }
        Ok(sum / windows.len().max(1) as f64)
    }
}

/// Mean gap between consecutive events.
pub fn mean_gap(events: &[Event]) -> Result<f64> {
    if events.len() < 2 {
        return Err(Error::Contract("need at least two events to estimate the mean gap".into()));
    }
    let span = events[events.len() - 1].time - events[0].time;
    let m = span / (events.len() - 1) as f64;
    if !(m > 0.0) {
        return Err(Error::Domain("all events share one timestamp".into()));
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    /// Checkpoint with the lowest validation loss.
    pub model: M,
    pub best_epoch: usize,
    pub log: Vec<LossRecord>,
    /// Set when training stopped early on a non-finite loss.
    pub aborted: bool,
}

/// Writes the `epoch,train_nll,val_nll` loss log.
pub fn write_loss_log<W: std::io::Write>(log: &[LossRecord], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for r in log {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn val_windows(events: &[Event], len: usize) -> Vec<&[Event]> {
    events.chunks(len).filter(|c| c.len() >= 2).collect()
}

/// Maximum-likelihood training over sliding windows of `subseq_len` events.
pub fn train_event_model(
    train: &EventSequence,
    val: &EventSequence,
    config: EventModelConfig,
) -> Result<TrainOutcome<EventModel>> {
    config.validate()?;
    let len = config.subseq_len;
    if train.len() < len {
        return Err(Error::Contract(format!("training sequence has {} events, need at least {len}", train.len())));
    }
    let gap_mean = mean_gap(&train.events)?;
    let mut model = EventModel::new(config.clone(), train.vocab.clone(), gap_mean)?;
    let starts: Vec<usize> = (0..=train.len() - len).step_by(config.window_stride).collect();
    let val_w = val_windows(&val.events, len);
    let val_w = if val_w.is_empty() { vec![&train.events[train.len() - len..]] } else { val_w };

    let mut rng: ChaCha8Rng = seeded_rng(config.seed ^ 0x5eed_0001);
    let mut adam = Adam::new(&model.params, config.adam);
    let mut best = (model.params.clone(), f64::INFINITY, 0usize);
    let mut log = Vec::new();
    let mut aborted = false;

    'epochs: for epoch in 1..=config.epochs {
        let mut order = starts.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = model.params.zero_grads();
            for &s in batch {
                let (loss, g) = model.loss_and_grads(&train.events[s..s + len])?;
                if !loss.is_finite() {
                    log::warn!("non-finite training loss at epoch {epoch}; keeping the best checkpoint");
                    aborted = true;
                    break 'epochs;
                }
                epoch_loss += loss;
                grads.add_assign(&g);
            }
            grads.scale(1.0 / batch.len() as f64);
            if let Err(e) = adam.step(&mut model.params, &grads) {
                log::warn!("rejected update at epoch {epoch}: {e}");
                aborted = true;
                break 'epochs;
            }
        }
        let train_nll = epoch_loss / starts.len() as f64;
        let val_nll = model.mean_loss(&val_w)?;
        log::info!("event model epoch {epoch}: train {train_nll:.5} val {val_nll:.5}");
        log.push(LossRecord { epoch, train_nll, val_nll });
        if !val_nll.is_finite() {
            aborted = true;
            break;
        }
        if val_nll < best.1 {
            best = (model.params.clone(), val_nll, epoch);
        }
    }
    model.params = best.0;
    Ok(TrainOutcome { model, best_epoch: best.2, log, aborted })
}

/// When to stop forward sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stop {
    /// Stop at the first event with time `>= t`; that event is discarded.
    EndTime(f64),
    MaxEvents(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardSample {
    pub events: Vec<Event>,
    /// The safety cap on generated events was reached.
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub max_events: usize,
    /// Draw from the predicted distributions instead of taking modes.
    pub stochastic: Option<u64>,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self { max_events: 100_000, stochastic: None }
    }
}

/// Autoregressive decoding from the end of `history`.
///
/// Each step takes the most probable mark and advances time by the mean
/// gap. Generated events condition later steps; only those with time in
/// `[horizon_start, stop)` are returned.
pub fn forward_sample(
    model: &EventModel,
    history: &[Event],
    horizon_start: f64,
    stop: Stop,
    options: SampleOptions,
) -> Result<ForwardSample> {
    if history.is_empty() {
        return Err(Error::Contract("forward sampling needs a non-empty history".into()));
    }
    let mut state = model.condition(history)?;
    let mut t = state.last_time.unwrap_or(horizon_start);
    let mut rng = options.stochastic.map(seeded_rng);
    let min_gap = MIN_NORMALIZED_GAP * model.gap_mean;
    let (end, max_kept) = match stop {
        Stop::EndTime(t_end) => (t_end, usize::MAX),
        Stop::MaxEvents(n) => (f64::INFINITY, n),
    };
    let mut events = Vec::new();
    let mut truncated = false;
    for generated in 0.. {
        if events.len() >= max_kept || end <= horizon_start {
            break;
        }
        if generated >= options.max_events {
            log::warn!("forward sampling hit the {} event cap", options.max_events);
            truncated = true;
            break;
        }
        let pred = model.predict(&state)?;
        let (mark, gap) = match rng.as_mut() {
            None => (pred.mode_mark(), pred.gap.mean),
            Some(rng) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut mark = pred.mark_probs.len() - 1;
                for (i, p) in pred.mark_probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        mark = i;
                        break;
                    }
                }
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                (mark as u32, pred.gap.mean + pred.gap.std * z)
            }
        };
        t += gap.max(min_gap);
        if t >= end {
            break;
        }
        let e = Event::new(t, mark);
        if t >= horizon_start {
            events.push(e);
        }
        state = model.advance(&state, e)?;
    }
    Ok(ForwardSample { events, truncated })
}
