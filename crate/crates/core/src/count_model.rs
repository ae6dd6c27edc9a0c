//! Per-bin Gaussian count model.
//!
//! A ReLU MLP maps `[20 recent counts, 20 recent bin hours, target hour]`
//! to `(ν, ρ)` for one future bin, with ρ = softplus(·) + floor. Future bins
//! are predicted independently: the only thing that changes between bins
//! is the target hour.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_model::{LossRecord, TrainOutcome};
use crate::event_stream::{bin_counts, hour_feature, BinGrid, Event, EventSequence};
use crate::neural::{seeded_rng, softplus, Activation, Adam, AdamConfig, GaussianParams, Grads, Mlp, ParamStore, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountModelConfig {
    /// Bin width Δ in seconds.
    pub delta: f64,
    /// Number of history bins, n⁻.
    pub n_minus: usize,
    /// Number of future bins per training window.
    pub n_horizon: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Additive floor on ρ, in counts.
    pub rho_floor: f64,
    pub seed: u64,
}

impl CountModelConfig {
    pub fn new(delta: f64) -> Self {
        Self {
            delta,
            n_minus: 20,
            n_horizon: 3,
            hidden: vec![32, 32, 32],
            epochs: 40,
            batch_size: 32,
            adam: AdamConfig::default(),
            rho_floor: 1e-2,
            seed: 0,
        }
    }

    pub fn input_size(&self) -> usize {
        2 * self.n_minus + 1
    }

    fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::InvalidGrid(format!("delta must be positive, got {}", self.delta)));
        }
        if self.n_minus == 0 || self.n_horizon == 0 || self.batch_size == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Contract(format!("count model sizes must be positive: {self:?}")));
        }
        if !(self.rho_floor > 0.0) {
            return Err(Error::Contract("rho floor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountFeatures {
    pub recent_counts: Vec<f64>,
    pub recent_hours: Vec<f64>,
    pub target_hour: f64,
}

impl CountFeatures {
    pub fn to_input(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.recent_counts.len() * 2 + 1);
        x.extend_from_slice(&self.recent_counts);
        x.extend_from_slice(&self.recent_hours);
        x.push(self.target_hour);
        x
    }
}

/// Features for future bin `target_bin` (1-based) of the grid starting at `t`.
///
/// `history_start` is where observed history begins; at least `n_minus`
/// bins of it must precede `t`.
pub fn extract_count_features(
    history: &[Event],
    history_start: f64,
    t: f64,
    delta: f64,
    n_minus: usize,
    target_bin: usize,
) -> Result<CountFeatures> {
    if target_bin == 0 {
        return Err(Error::Contract("target bins are numbered from 1".into()));
    }
    let origin = t - n_minus as f64 * delta;
    if history_start > origin + 1e-9 * delta.abs() {
        return Err(Error::Features(format!(
            "history starts at {history_start} but {n_minus} bins of width {delta} before {t} are needed"
        )));
    }
    let grid = BinGrid::new(origin, delta, n_minus)?;
    let recent_counts = bin_counts(history, &grid)?.into_iter().map(|c| c as f64).collect();
    let recent_hours = (0..n_minus).map(|b| hour_feature(grid.midpoint(b))).collect();
    let target_hour = hour_feature(t + (target_bin as f64 - 0.5) * delta);
    Ok(CountFeatures { recent_counts, recent_hours, target_hour })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountPrediction {
    /// `(ν_j, ρ_j)` for bins `j = 1..n`; ρ is a standard deviation.
    pub per_bin: Vec<GaussianParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountModel {
    pub config: CountModelConfig,
    pub params: ParamStore,
    mlp: Mlp,
}

/// One supervised example: features of a future bin and its observed count.
#[derive(Debug, Clone, PartialEq)]
pub struct CountExample {
    pub features: Vec<f64>,
    pub count: f64,
}

impl CountModel {
    pub fn new(config: CountModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(config.seed);
        let mut params = ParamStore::new(config.seed);
        let mut sizes = vec![config.input_size()];
        sizes.extend(&config.hidden);
        sizes.push(2);
        let mlp = Mlp::new(&mut params, "count", &sizes, Activation::Relu, &mut rng);
        Ok(Self { config, params, mlp })
    }

    pub fn from_parts(config: CountModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config)?;
        params.check_compatible(&model.params)?;
        if !params.all_finite() {
            return Err(Error::NonFinite("count model parameters".into()));
        }
        model.params = params;
        Ok(model)
    }

    pub fn delta(&self) -> f64 {
        self.config.delta
    }

    /// `(ν, ρ)` for one feature vector.
    pub fn predict_one(&self, features: &CountFeatures) -> Result<GaussianParams> {
        let out = self.mlp.forward(&self.params, &features.to_input())?;
        Ok(GaussianParams { mean: out[0], std: softplus(out[1]) + self.config.rho_floor })
    }

    pub fn predict_bin_counts(&self, features: &[CountFeatures]) -> Result<CountPrediction> {
        Ok(CountPrediction { per_bin: features.iter().map(|f| self.predict_one(f)).collect::<Result<_>>()? })
    }

    /// Predictions for bins `1..=n` after `t`, from the history before `t`.
    pub fn predict_horizon(&self, history: &[Event], history_start: f64, t: f64, n: usize) -> Result<CountPrediction> {
        let feats = (1..=n)
            .map(|j| extract_count_features(history, history_start, t, self.config.delta, self.config.n_minus, j))
            .collect::<Result<Vec<_>>>()?;
        self.predict_bin_counts(&feats)
    }

    /// Mean NLL over a batch through the tape, with gradients.
    pub fn loss_and_grads(&self, batch: &[CountExample]) -> Result<(f64, Grads)> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut tape = Tape::new(&self.params);
        let mut terms = Vec::with_capacity(batch.len());
        for ex in batch {
            let x = tape.input(ex.features.clone());
            let out = self.mlp.forward_tape(&mut tape, x)?;
            let nu = tape.index(out, 0)?;
            let rho_pre = tape.index(out, 1)?;
            let rho_soft = tape.softplus(rho_pre);
            let rho = tape.add_const(rho_soft, self.config.rho_floor);
            terms.push(tape.gaussian_nll(ex.count, nu, rho)?);
        }
        let total = tape.sum(&terms);
        let loss = tape.scale(total, 1.0 / batch.len() as f64);
        let grads = tape.backward(loss)?;
        Ok((tape.scalar(loss), grads))
    }

    /// Same loss via the plain forward path.
    pub fn loss(&self, batch: &[CountExample]) -> Result<f64> {
        let mut total = 0.0;
        for ex in batch {
            let out = self.mlp.forward(&self.params, &ex.features)?;
            let g = GaussianParams { mean: out[0], std: softplus(out[1]) + self.config.rho_floor };
            total += crate::neural::gaussian_nll(ex.count, g)?;
        }
        Ok(total / batch.len().max(1) as f64)
    }
}

/// Sliding windows of `n_minus + n_horizon` bins, stride one bin, over the
/// span of `seq` starting at its first event.
pub fn count_examples(seq: &EventSequence, config: &CountModelConfig) -> Result<Vec<CountExample>> {
    let (first, last) = match (seq.first_time(), seq.last_time()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::EmptySequence),
    };
    let delta = config.delta;
    let num_bins = ((last - first) / delta).floor() as usize;
    let window = config.n_minus + config.n_horizon;
    if num_bins < window {
        return Err(Error::Contract(format!(
            "sequence spans {num_bins} whole bins, need at least {window} for count training"
        )));
    }
    let grid = BinGrid::new(first, delta, num_bins)?;
    let counts: Vec<f64> = bin_counts(&seq.events, &grid)?.into_iter().map(|c| c as f64).collect();
    let hours: Vec<f64> = (0..num_bins).map(|b| hour_feature(grid.midpoint(b))).collect();
    let mut out = Vec::new();
    for s in 0..=num_bins - window {
        let hist = s..s + config.n_minus;
        for j in 0..config.n_horizon {
            let target = s + config.n_minus + j;
            let mut features = Vec::with_capacity(config.input_size());
            features.extend_from_slice(&counts[hist.clone()]);
            features.extend_from_slice(&hours[hist.clone()]);
            features.push(hours[target]);
            out.push(CountExample { features, count: counts[target] });
        }
    }
    Ok(out)
}

pub fn train_count_model(
    train: &EventSequence,
    val: &EventSequence,
    config: CountModelConfig,
) -> Result<TrainOutcome<CountModel>> {
    config.validate()?;
    let train_ex = count_examples(train, &config)?;
    let val_ex = match count_examples(val, &config) {
        Ok(v) => v,
        Err(e) => {
            log::warn!("validation span too short for count windows ({e}); selecting on training loss");
            train_ex.clone()
        }
    };
    let mut model = CountModel::new(config.clone())?;
    let mut rng = seeded_rng(config.seed ^ 0x5eed_0002);
    let mut adam = Adam::new(&model.params, config.adam);
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    let mut best = (model.params.clone(), f64::INFINITY, 0usize);
    let mut log = Vec::new();
    let mut aborted = false;

    'epochs: for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<CountExample> = idx.iter().map(|&i| train_ex[i].clone()).collect();
            let (loss, grads) = model.loss_and_grads(&batch)?;
            if !loss.is_finite() || adam.step(&mut model.params, &grads).is_err() {
                log::warn!("non-finite count loss at epoch {epoch}; keeping the best checkpoint");
                aborted = true;
                break 'epochs;
            }
            epoch_loss += loss * batch.len() as f64;
        }
        let train_nll = epoch_loss / train_ex.len() as f64;
        let val_nll = model.loss(&val_ex)?;
        log::info!("count model epoch {epoch}: train {train_nll:.5} val {val_nll:.5}");
        log.push(LossRecord { epoch, train_nll, val_nll });
        if val_nll < best.1 {
            best = (model.params.clone(), val_nll, epoch);
        }
    }
    model.params = best.0;
    Ok(TrainOutcome { model, best_epoch: best.2, log, aborted })
}
