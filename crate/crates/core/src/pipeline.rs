//! End-to-end run on synthetic seasonal data: generate, split, train both
//! models (and the compound model), forecast with every method, evaluate
//! and write artifacts plus a manifest.
//!
//! Every random draw derives from `PipelineConfig::seed`, and reports hold
//! no timings, so two runs with one config write identical bytes.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{file_sha256, save_count_model, save_event_model};
use crate::count_model::{train_count_model, CountModel, CountModelConfig};
use crate::error::{Error, Result};
use crate::event_model::{train_event_model, write_loss_log, EventModel, EventModelConfig};
use crate::event_stream::{
    build_mark_vocab, export_events, sample_test_instances, split_by_time, EventSequence, ForecastInstance, Format,
    Schema,
};
use crate::inference::{
    compound_sequence, forecast, forecast_count_only, forecast_event_only, forecast_hierarchical,
    forecast_no_count_variance, DecodeOptions, Forecast, Method,
};
use crate::metrics::{evaluate, write_fig3_table, write_instance_csv, CountMaeMode, MetricReport};
use crate::parallel::{self, Execution};
use crate::synthetic::{attach_marks, cyclic_transition, simulate_seasonal_poisson};

/// Daily profile with a 3 events/h trough at 03:00 and a 25 events/h peak
/// at 15:00.
pub fn default_profile() -> [f64; 24] {
    std::array::from_fn(|h| 14.0 - 11.0 * (2.0 * std::f64::consts::PI * (h as f64 + 0.5 - 3.5) / 24.0).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub days: usize,
    /// Events per hour for each hour of the day.
    pub profile: Vec<f64>,
    pub num_marks: usize,
    /// Probability of moving to the next mark in the cycle.
    pub mark_cycle_prob: f64,
    pub split: (f64, f64, f64),
    pub top_k: usize,
    pub delta: f64,
    pub n_hist: usize,
    pub n_horizon: usize,
    pub instances: usize,
    pub tau: usize,
    pub event_epochs: usize,
    pub event_window_stride: usize,
    pub compound_epochs: usize,
    pub count_epochs: usize,
    pub methods: Vec<Method>,
    pub mode: CountMaeMode,
    pub refresh_states: bool,
    pub execution: Execution,
    /// Worker threads for instance-parallel decoding; `None` = CPU count.
    pub workers: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            days: 50,
            profile: default_profile().to_vec(),
            num_marks: 5,
            mark_cycle_prob: 0.8,
            split: (0.6, 0.2, 0.2),
            top_k: 10,
            delta: 3600.0,
            n_hist: 20,
            n_horizon: 3,
            instances: 50,
            tau: 5,
            event_epochs: 10,
            event_window_stride: 10,
            compound_epochs: 10,
            count_epochs: 40,
            methods: Method::ALL.to_vec(),
            mode: CountMaeMode::Absolute,
            refresh_states: false,
            execution: Execution::Parallel,
            workers: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.profile.len() != 24 {
            return Err(Error::Contract(format!("profile needs 24 hourly rates, got {}", self.profile.len())));
        }
        if self.methods.is_empty() || self.instances == 0 || self.tau == 0 {
            return Err(Error::Contract("need at least one method, one instance and tau >= 1".into()));
        }
        Ok(())
    }

    fn event_config(&self, vocab_size: usize, seed: u64, epochs: usize) -> EventModelConfig {
        EventModelConfig { epochs, window_stride: self.event_window_stride, seed, ..EventModelConfig::new(vocab_size) }
    }

    fn count_config(&self) -> CountModelConfig {
        CountModelConfig {
            n_horizon: self.n_horizon,
            n_minus: self.n_hist,
            epochs: self.count_epochs,
            seed: self.seed.wrapping_add(2),
            ..CountModelConfig::new(self.delta)
        }
    }
}

/// Trained models used for decoding.
#[derive(Debug, Clone)]
pub struct Models {
    pub event: EventModel,
    pub count: CountModel,
    pub compound: Option<EventModel>,
}

/// Forecast of one instance by `method`. `seed` drives the count-only
/// decoder's random placement.
pub fn forecast_instance(
    method: Method,
    models: &Models,
    instance: &ForecastInstance,
    tau: usize,
    options: &DecodeOptions,
    seed: u64,
) -> Result<Forecast> {
    match method {
        Method::Dual => forecast(&models.event, &models.count, instance, options),
        Method::NoCountVariance => forecast_no_count_variance(&models.event, &models.count, instance, options),
        Method::EventOnly => forecast_event_only(&models.event, instance),
        Method::CountOnly => forecast_count_only(&models.count, instance, seed),
        Method::Hierarchical => {
            let compound = models
                .compound
                .as_ref()
                .ok_or_else(|| Error::Contract("hierarchical decoding needs a compound model".into()))?;
            forecast_hierarchical(&models.event, compound, instance, tau)
        }
    }
}

/// Seed of the count-only placement for instance `index`.
pub fn instance_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64)
}

/// Decodes every instance with `method`, in input order.
pub fn forecast_all(
    method: Method,
    models: &Models,
    instances: &[ForecastInstance],
    tau: usize,
    options: &DecodeOptions,
    seed: u64,
    exec: Execution,
) -> Result<Vec<Forecast>> {
    parallel::map(exec, instances, |i, inst| {
        forecast_instance(method, models, inst, tau, options, instance_seed(seed, i))
    })
    .into_iter()
    .collect()
}

/// Synthetic marked seasonal stream for `config`.
pub fn generate_data(config: &PipelineConfig) -> Result<EventSequence> {
    config.validate()?;
    let mut profile = [0.0; 24];
    profile.copy_from_slice(&config.profile);
    let base = simulate_seasonal_poisson(&profile, config.days, config.seed)?;
    attach_marks(&base, &cyclic_transition(config.num_marks, config.mark_cycle_prob), config.seed.wrapping_add(1))
}

/// Train/validation/test sequences remapped onto the top-k vocabulary.
pub fn prepare_splits(data: &EventSequence, config: &PipelineConfig) -> Result<(EventSequence, EventSequence, EventSequence)> {
    let (train, val, test) = split_by_time(data, config.split)?;
    let vocab = build_mark_vocab(&train, config.top_k)?;
    Ok((train.remap(&vocab)?, val.remap(&vocab)?, test.remap(&vocab)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub wass_dist: f64,
    pub count_mae: f64,
    pub count_mae_relative: f64,
    pub bleu: f64,
    pub tick_breakdown: Vec<f64>,
    /// Bins whose decoded count differs from the reported `c*`.
    pub consensus_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub seed: u64,
    pub instances: usize,
    pub train_events: usize,
    pub test_events: usize,
    pub methods: Vec<MethodSummary>,
}

impl PipelineSummary {
    pub fn get(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }
}

/// Bins where the number of forecast events differs from the diagnostics'
/// chosen count.
pub fn consensus_violations(forecast: &Forecast) -> usize {
    forecast
        .bins
        .iter()
        .filter(|d| forecast.events.iter().filter(|e| e.bin == d.bin).count() != d.c_star)
        .count()
}

fn write_pretty<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Writes one JSONL file of `{"time","mark","bin"}` records per instance
/// and, when present, the per-bin diagnostics.
pub fn write_forecasts(forecasts: &[Forecast], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in forecasts.iter().enumerate() {
        let mut lines = String::new();
        for e in &f.events {
            lines.push_str(&serde_json::to_string(e)?);
            lines.push('\n');
        }
        fs::write(dir.join(format!("instance_{i:03}.jsonl")), lines)?;
        if !f.bins.is_empty() {
            write_pretty(&f.bins, &dir.join(format!("instance_{i:03}.diagnostics.json")))?;
        }
    }
    Ok(())
}

/// Writes `report` as JSON and per-instance CSV under `dir`.
pub fn write_report(report: &MetricReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_pretty(report, &dir.join(format!("{}.json", report.method)))?;
    write_instance_csv(report, BufWriter::new(fs::File::create(dir.join(format!("{}.csv", report.method)))?))
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a PipelineConfig,
    seeds: serde_json::Value,
    files: Vec<(String, String)>,
}

/// Runs the whole pipeline, writing everything below `out`.
pub fn run_pipeline(config: &PipelineConfig, out: &Path) -> Result<PipelineSummary> {
    config.validate()?;
    let started = Instant::now();
    fs::create_dir_all(out)?;
    let mut hashed: Vec<PathBuf> = Vec::new();

    let data = generate_data(config)?;
    let data_path = out.join("data").join("events.jsonl");
    fs::create_dir_all(data_path.parent().unwrap_or(out))?;
    export_events(&data, Format::Jsonl, &Schema::default(), BufWriter::new(fs::File::create(&data_path)?))?;
    hashed.push(data_path);

    let (train, val, test) = prepare_splits(&data, config)?;
    log::info!("split: {} train / {} val / {} test events", train.len(), val.len(), test.len());
    let k = train.vocab.size();
    let models_dir = out.join("models");

    let event = train_event_model(&train, &val, config.event_config(k, config.seed.wrapping_add(1), config.event_epochs))?;
    save_event_model(&event.model, &models_dir.join("event.json"))?;
    write_loss_log(&event.log, fs::File::create(models_dir.join("event_loss.csv"))?)?;
    hashed.push(models_dir.join("event.json"));

    let count = train_count_model(&train, &val, config.count_config())?;
    save_count_model(&count.model, &models_dir.join("count.json"))?;
    write_loss_log(&count.log, fs::File::create(models_dir.join("count_loss.csv"))?)?;
    hashed.push(models_dir.join("count.json"));

    let compound = if config.methods.contains(&Method::Hierarchical) {
        let ctrain = compound_sequence(&train, config.tau, false)?;
        let cval = compound_sequence(&val, config.tau, false)?;
        let c = train_event_model(&ctrain, &cval, config.event_config(k, config.seed.wrapping_add(3), config.compound_epochs))?;
        save_event_model(&c.model, &models_dir.join("compound.json"))?;
        hashed.push(models_dir.join("compound.json"));
        Some(c.model)
    } else {
        None
    };
    let models = Models { event: event.model, count: count.model, compound };
    log::info!("training finished after {:.1}s", started.elapsed().as_secs_f64());

    let instances =
        sample_test_instances(&test, config.delta, config.n_hist, config.n_horizon, config.instances, config.seed.wrapping_add(4))?;
    let options = DecodeOptions { refresh_states: config.refresh_states, ..DecodeOptions::default() };
    let reports_dir = out.join("reports");
    let mut reports = Vec::new();
    let mut summaries = Vec::new();
    for &method in &config.methods {
        let forecasts = parallel::with_workers(config.workers, || {
            forecast_all(method, &models, &instances, config.tau, &options, config.seed.wrapping_add(5), config.execution)
        })?;
        write_forecasts(&forecasts, &out.join("forecasts").join(method.name()))?;
        let report = evaluate(method, &instances, &forecasts, config.mode)?;
        write_report(&report, &reports_dir)?;
        hashed.push(reports_dir.join(format!("{method}.json")));
        let violations = forecasts.iter().map(consensus_violations).sum();
        log::info!(
            "{method}: wass {:.1} countmae {:.3} bleu {:.3}",
            report.wass_dist,
            report.count_mae,
            report.bleu
        );
        summaries.push(MethodSummary {
            method,
            wass_dist: report.wass_dist,
            count_mae: report.count_mae,
            count_mae_relative: report.count_mae_relative,
            bleu: report.bleu,
            tick_breakdown: report.tick_breakdown.clone(),
            consensus_violations: violations,
        });
        reports.push(report);
    }
    write_fig3_table(&reports, fs::File::create(reports_dir.join("fig3.csv"))?)?;
    let summary = PipelineSummary {
        seed: config.seed,
        instances: instances.len(),
        train_events: train.len(),
        test_events: test.len(),
        methods: summaries,
    };
    write_pretty(&summary, &reports_dir.join("summary.json"))?;
    hashed.push(reports_dir.join("summary.json"));

    let files = hashed
        .iter()
        .map(|p| {
            let rel = p.strip_prefix(out).unwrap_or(p).display().to_string();
            Ok((rel, file_sha256(p)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let seeds = serde_json::json!({
        "data": config.seed,
        "marks": config.seed.wrapping_add(1),
        "event_model": config.seed.wrapping_add(1),
        "count_model": config.seed.wrapping_add(2),
        "compound_model": config.seed.wrapping_add(3),
        "instances": config.seed.wrapping_add(4),
        "count_only": config.seed.wrapping_add(5),
    });
    write_pretty(&Manifest { config, seeds, files }, &out.join("manifest.json"))?;
    log::info!("pipeline finished after {:.1}s", started.elapsed().as_secs_f64());
    Ok(summary)
}
