use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use dualtpp::checkpoint::{load_count_model, load_event_model, save_count_model, save_event_model};
use dualtpp::count_model::{train_count_model, CountModelConfig};
use dualtpp::event_model::{train_event_model, write_loss_log, EventModelConfig};
use dualtpp::event_stream::{export_events, ingest_events, sample_test_instances, EventSequence, ForecastInstance, Format, Schema};
use dualtpp::inference::{compound_sequence, DecodeOptions, Forecast, ForecastEvent, Method};
use dualtpp::metrics::{evaluate, write_fig3_table, CountMaeMode};
use dualtpp::parallel::{self, Execution};
use dualtpp::pipeline::{
    forecast_all, generate_data, prepare_splits, run_pipeline, write_forecasts, write_report, Models, PipelineConfig,
};

#[derive(Parser)]
#[command(name = "dualtpp", version, about = "Dual event/count point process forecasting")]
struct Cli {
    /// TOML file with pipeline settings; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic seasonal marked event stream.
    Generate(GenerateArgs),
    /// Train the event model.
    TrainEvent(TrainArgs),
    /// Train the per-bin count model.
    TrainCount(TrainArgs),
    /// Train the compound-event model used by hierarchical decoding.
    TrainCompound(TrainArgs),
    /// Decode the test instances with one method.
    Forecast(ForecastArgs),
    /// Score forecasts written by `forecast`.
    Evaluate(EvaluateArgs),
    /// Generate, train, forecast with every method and evaluate.
    Pipeline(PipelineArgs),
}

#[derive(Args, Clone, Default)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    /// Bin width in seconds.
    #[arg(long)]
    delta: Option<f64>,
    /// Number of horizon bins.
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// CountMAE mode: absolute or relative.
    #[arg(long)]
    mode: Option<CountMaeMode>,
    /// Worker threads for instance-parallel decoding.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    instances: Option<usize>,
    /// Events per compound event.
    #[arg(long)]
    tau: Option<usize>,
    /// Decode instances on the calling thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    days: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    /// Event file (CSV or JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Directory for the checkpoint and loss log.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ForecastArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory holding event.json, count.json and compound.json.
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "dual")]
    method: Method,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Output directory of `forecast`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Methods to score; defaults to every method found.
    #[arg(long)]
    method: Vec<Method>,
    #[arg(long)]
    emit_fig3: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    days: Option<usize>,
    #[arg(long)]
    method: Vec<Method>,
    #[arg(long)]
    emit_fig3: bool,
    #[command(flatten)]
    common: Common,
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

fn apply(cfg: &mut PipelineConfig, c: &Common) {
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.delta {
        cfg.delta = v;
    }
    if let Some(v) = c.bins {
        cfg.n_horizon = v;
    }
    if let Some(v) = c.epochs {
        cfg.event_epochs = v;
        cfg.compound_epochs = v;
        cfg.count_epochs = v;
    }
    if let Some(v) = c.mode {
        cfg.mode = v;
    }
    if c.workers.is_some() {
        cfg.workers = c.workers;
    }
    if let Some(v) = c.instances {
        cfg.instances = v;
    }
    if let Some(v) = c.tau {
        cfg.tau = v;
    }
    if c.sequential {
        cfg.execution = Execution::Sequential;
    }
}

fn read_events(path: &Path) -> Result<EventSequence> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(ingest_events(BufReader::new(file), Format::from_path(path), &Schema::default())?)
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn generate(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let data = generate_data(cfg)?;
    let path = out.join("events.jsonl");
    export_events(&data, Format::Jsonl, &Schema::default(), BufWriter::new(fs::File::create(&path)?))?;
    write_json(cfg, &out.join("generate_config.json"))?;
    info!("wrote {} events to {}", data.len(), path.display());
    Ok(())
}

fn train(kind: &str, cfg: &PipelineConfig, args: &TrainArgs) -> Result<()> {
    let data = read_events(&args.data)?;
    let (train, val, _) = prepare_splits(&data, cfg)?;
    fs::create_dir_all(&args.out)?;
    let k = train.vocab.size();
    let event_cfg = |seed: u64, epochs: usize| EventModelConfig {
        epochs,
        window_stride: cfg.event_window_stride,
        seed,
        ..EventModelConfig::new(k)
    };
    match kind {
        "event" => {
            let o = train_event_model(&train, &val, event_cfg(cfg.seed.wrapping_add(1), cfg.event_epochs))?;
            save_event_model(&o.model, &args.out.join("event.json"))?;
            write_loss_log(&o.log, fs::File::create(args.out.join("event_loss.csv"))?)?;
        }
        "compound" => {
            let ctrain = compound_sequence(&train, cfg.tau, false)?;
            let cval = compound_sequence(&val, cfg.tau, false)?;
            let o = train_event_model(&ctrain, &cval, event_cfg(cfg.seed.wrapping_add(3), cfg.compound_epochs))?;
            save_event_model(&o.model, &args.out.join("compound.json"))?;
            write_loss_log(&o.log, fs::File::create(args.out.join("compound_loss.csv"))?)?;
        }
        _ => {
            let ccfg = CountModelConfig {
                n_minus: cfg.n_hist,
                n_horizon: cfg.n_horizon,
                epochs: cfg.count_epochs,
                seed: cfg.seed.wrapping_add(2),
                ..CountModelConfig::new(cfg.delta)
            };
            let o = train_count_model(&train, &val, ccfg)?;
            save_count_model(&o.model, &args.out.join("count.json"))?;
            write_loss_log(&o.log, fs::File::create(args.out.join("count_loss.csv"))?)?;
        }
    }
    info!("{kind} model written to {}", args.out.display());
    Ok(())
}

fn load_models(dir: &Path, method: Method) -> Result<Models> {
    let event = load_event_model(&dir.join("event.json"))?;
    let count = load_count_model(&dir.join("count.json"))?;
    let compound = if method == Method::Hierarchical {
        Some(load_event_model(&dir.join("compound.json"))?)
    } else {
        None
    };
    if compound.as_ref().is_some_and(|c| c.vocab != event.vocab) {
        bail!("compound and event models were trained on different mark vocabularies");
    }
    Ok(Models { event, count, compound })
}

fn forecast_cmd(cfg: &PipelineConfig, args: &ForecastArgs) -> Result<()> {
    let models = load_models(&args.models, args.method)?;
    if (models.count.delta() - cfg.delta).abs() > 1e-9 * cfg.delta.abs() {
        bail!("count model was trained with delta {} but --delta is {}", models.count.delta(), cfg.delta);
    }
    let data = read_events(&args.data)?;
    let (train, _, test) = prepare_splits(&data, cfg)?;
    if train.vocab != models.event.vocab {
        bail!("event model vocabulary {:?} does not match the data's {:?}", models.event.vocab.labels, train.vocab.labels);
    }
    let instances =
        sample_test_instances(&test, cfg.delta, cfg.n_hist, cfg.n_horizon, cfg.instances, cfg.seed.wrapping_add(4))?;
    let options = DecodeOptions { refresh_states: cfg.refresh_states, ..DecodeOptions::default() };
    let forecasts = parallel::with_workers(cfg.workers, || {
        forecast_all(args.method, &models, &instances, cfg.tau, &options, cfg.seed.wrapping_add(5), cfg.execution)
    })?;
    fs::create_dir_all(&args.out)?;
    write_json(&instances, &args.out.join("instances.json"))?;
    write_forecasts(&forecasts, &args.out.join(args.method.name()))?;
    info!("{} forecasts written to {}", forecasts.len(), args.out.display());
    Ok(())
}

fn read_forecasts(dir: &Path, method: Method, n: usize) -> Result<Vec<Forecast>> {
    (0..n)
        .map(|i| {
            let path = dir.join(format!("instance_{i:03}.jsonl"));
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let events = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str::<ForecastEvent>)
                .collect::<Result<Vec<_>, _>>()
                .with_context(|| format!("parsing {}", path.display()))?;
            Ok(Forecast { method, events, bins: Vec::new(), truncated: false })
        })
        .collect()
}

fn evaluate_cmd(cfg: &PipelineConfig, args: &EvaluateArgs) -> Result<()> {
    let inst_path = args.data.join("instances.json");
    let text = fs::read_to_string(&inst_path).with_context(|| format!("reading {}", inst_path.display()))?;
    let instances: Vec<ForecastInstance> = serde_json::from_str(&text)?;
    let methods: Vec<Method> = if args.method.is_empty() {
        Method::ALL.into_iter().filter(|m| args.data.join(m.name()).is_dir()).collect()
    } else {
        args.method.clone()
    };
    if methods.is_empty() {
        bail!("no forecasts found under {}", args.data.display());
    }
    let mut reports = Vec::new();
    for m in methods {
        let forecasts = read_forecasts(&args.data.join(m.name()), m, instances.len())?;
        let report = evaluate(m, &instances, &forecasts, cfg.mode)?;
        write_report(&report, &args.out)?;
        println!(
            "{:<18} wass {:>10.2}  countmae {:>7.3}  bleu {:.4}",
            m.name(),
            report.wass_dist,
            report.count_mae,
            report.bleu
        );
        reports.push(report);
    }
    if args.emit_fig3 {
        write_fig3_table(&reports, fs::File::create(args.out.join("fig3.csv"))?)?;
    }
    Ok(())
}

fn pipeline_cmd(mut cfg: PipelineConfig, args: &PipelineArgs) -> Result<()> {
    if let Some(d) = args.days {
        cfg.days = d;
    }
    if !args.method.is_empty() {
        cfg.methods = args.method.clone();
    }
    let summary = run_pipeline(&cfg, &args.out)?;
    if !args.emit_fig3 {
        let _ = fs::remove_file(args.out.join("reports").join("fig3.csv"));
    }
    for m in &summary.methods {
        println!(
            "{:<18} wass {:>10.2}  countmae {:>7.3}  bleu {:.4}",
            m.method.name(),
            m.wass_dist,
            m.count_mae,
            m.bleu
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Generate(a) => {
            apply(&mut cfg, &a.common);
            if let Some(d) = a.days {
                cfg.days = d;
            }
            generate(&cfg, &a.out)
        }
        Command::TrainEvent(a) => {
            apply(&mut cfg, &a.common);
            train("event", &cfg, &a)
        }
        Command::TrainCount(a) => {
            apply(&mut cfg, &a.common);
            train("count", &cfg, &a)
        }
        Command::TrainCompound(a) => {
            apply(&mut cfg, &a.common);
            train("compound", &cfg, &a)
        }
        Command::Forecast(a) => {
            apply(&mut cfg, &a.common);
            forecast_cmd(&cfg, &a)
        }
        Command::Evaluate(a) => {
            apply(&mut cfg, &a.common);
            evaluate_cmd(&cfg, &a)
        }
        Command::Pipeline(a) => {
            apply(&mut cfg, &a.common);
            pipeline_cmd(cfg, &a)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
