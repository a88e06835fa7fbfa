//! Argument definitions and the body of each subcommand.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use wbstudio_core::model::WbNet;
use wbstudio_core::pipeline::{edit_wb, evaluate, identity_baseline, EditRequest, WbTarget};
use wbstudio_core::synthdata::{load_dataset, make_dataset_with, save_dataset, DatasetConfig};
use wbstudio_core::training::{fit_from, smoothed_losses, TrainConfig, TrainState};
use wbstudio_core::{ImageRGB, WbError};

use crate::{CliError, CliResult, Context};

#[derive(Parser, Debug)]
#[command(name = "wbstudio", version, about = "Deep white-balance editing: train, edit, evaluate, serve")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a network on a generated dataset
    Train(TrainArgs),
    /// Render a synthetic dataset to a directory
    GenData(GenDataArgs),
    /// Change the white balance of one image
    Edit(EditArgs),
    /// Score a model against a dataset's ground truth
    Eval(EvalArgs),
    /// Serve the HTTP API
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON training config; may name a base `profile` and override fields
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base profile when no config file is given
    #[arg(long, default_value = "desk")]
    pub profile: String,
    /// Dataset directory from `gen-data`
    #[arg(long)]
    pub data: PathBuf,
    /// Output checkpoint (weights plus optimizer state)
    #[arg(long)]
    pub out: PathBuf,
    /// Override the iteration budget
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Continue from this checkpoint
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Loss history CSV; defaults to `<out>.loss.csv`
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub scenes: usize,
    /// Square image side, a multiple of 16
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    /// Extra ground-truth temperatures in Kelvin, comma separated
    #[arg(long, value_delimiter = ',', default_values_t = [3800u32, 5500, 6500])]
    pub extra_temps: Vec<u32>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("target").required(true).args(["wb", "temp"])))]
pub struct EditArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Preset: awb, tungsten or shade
    #[arg(long)]
    pub wb: Option<String>,
    /// Color temperature in Kelvin, 2850..=7500
    #[arg(long)]
    pub temp: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Per-image CSV; `<stem>_summary.csv` and `<stem>.json` are written next to it
    #[arg(long)]
    pub report: PathBuf,
    /// Settings to score, e.g. `awb,tungsten,shade,5500`; defaults to the
    /// presets plus every extra temperature in the dataset
    #[arg(long, value_delimiter = ',')]
    pub settings: Vec<String>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::GenData(a) => gen_data(a),
        Command::Edit(a) => edit(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

/// Reads a training config. A `profile` key selects the base values that the
/// remaining keys override.
pub fn load_train_config(path: Option<&Path>, profile: &str) -> CliResult<TrainConfig> {
    let Some(path) = path else {
        return TrainConfig::profile(profile).map_err(|e| CliError::bad_args(e.to_string()));
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::from_wb("reading config", WbError::io(path, e)))?;
    let mut over: Value =
        serde_json::from_str(&text).map_err(|e| CliError::bad_args(format!("{}: {e}", path.display())))?;
    let profile = match over.as_object_mut().and_then(|o| o.remove("profile")) {
        Some(Value::String(p)) => p,
        Some(other) => return Err(CliError::bad_args(format!("profile must be a string, got {other}"))),
        None => profile.to_string(),
    };
    let base = TrainConfig::profile(&profile).map_err(|e| CliError::bad_args(e.to_string()))?;
    let mut value = serde_json::to_value(base).expect("config serializes");
    merge(&mut value, over);
    let cfg: TrainConfig =
        serde_json::from_value(value).map_err(|e| CliError::bad_args(format!("{}: {e}", path.display())))?;
    cfg.validate().map_err(|e| CliError::bad_args(e.to_string()))?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = load_train_config(a.config.as_deref(), &a.profile)?;
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    let (_, data) = load_dataset(&a.data).ctx(|| format!("loading dataset {}", a.data.display()))?;
    let state = match &a.resume {
        Some(p) => TrainState::load_checkpoint(p).ctx(|| format!("loading checkpoint {}", p.display()))?,
        None => TrainState::new(WbNet::build(cfg.net.clone(), cfg.seed).ctx(|| "building network".into())?),
    };
    eprintln!(
        "training {} parameters on {} scenes, {} iterations from {}",
        state.net.param_count(),
        data.len(),
        cfg.iterations,
        state.iteration
    );
    let start = Instant::now();
    let out = a.out.clone();
    let state = fit_from(state, &data, &cfg, |s| {
        let smooth = smoothed_losses(&s.loss_history, 100).last().copied().unwrap_or(f64::NAN);
        eprintln!(
            "iter {:>7}  epoch {:>4}  loss {:.5}  ({:.0}s)",
            s.iteration,
            s.epoch,
            smooth,
            start.elapsed().as_secs_f64()
        );
        s.save_checkpoint(&out)
    })
    .ctx(|| "training".into())?;
    state.save_checkpoint(&a.out).ctx(|| format!("writing {}", a.out.display()))?;
    let csv_path = a.loss_csv.unwrap_or_else(|| with_suffix(&a.out, ".loss.csv"));
    write_file(&csv_path, state.loss_csv().as_bytes())?;
    eprintln!("wrote {} and {}", a.out.display(), csv_path.display());
    Ok(())
}

fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let cfg = DatasetConfig {
        seed: a.seed,
        n_scenes: a.scenes,
        width: a.size,
        height: a.size,
        extra_temperatures: a.extra_temps,
    };
    let data = make_dataset_with(&cfg).map_err(|e| CliError::bad_args(e.to_string()))?;
    save_dataset(&a.out, &cfg, &data).ctx(|| format!("writing {}", a.out.display()))?;
    eprintln!("wrote {} scenes to {}", data.len(), a.out.display());
    Ok(())
}

fn load_model(path: &Path) -> CliResult<WbNet> {
    WbNet::load(path).ctx(|| format!("loading model {}", path.display()))
}

fn edit(a: EditArgs) -> CliResult<()> {
    let target = match (&a.wb, a.temp) {
        (Some(wb), None) => wb.parse::<WbTarget>(),
        (None, Some(t)) => WbTarget::Temperature(t).validate().map(|_| WbTarget::Temperature(t)),
        _ => unreachable!("clap enforces exactly one"),
    }
    .map_err(|e| CliError::bad_args(e.to_string()))?;
    let net = load_model(&a.model)?;
    let image = ImageRGB::load(&a.input).ctx(|| format!("reading {}", a.input.display()))?;
    let result = edit_wb(&net, &EditRequest { image, target }).ctx(|| "editing".into())?;
    result.output.save(&a.out).ctx(|| format!("writing {}", a.out.display()))
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let net = load_model(&a.model)?;
    let (manifest, data) = load_dataset(&a.data).ctx(|| format!("loading dataset {}", a.data.display()))?;
    let settings: Vec<WbTarget> = if a.settings.is_empty() {
        let mut s = vec![WbTarget::Awb, WbTarget::Tungsten, WbTarget::Shade];
        s.extend(manifest.config.extra_temperatures.iter().map(|&t| WbTarget::Temperature(t as f64)));
        s
    } else {
        a.settings
            .iter()
            .map(|s| s.parse())
            .collect::<Result<_, _>>()
            .map_err(|e: WbError| CliError::bad_args(e.to_string()))?
    };
    let report = evaluate(&net, &data, &settings).ctx(|| "evaluating".into())?;
    let baseline = identity_baseline(&data, &settings).ctx(|| "scoring baseline".into())?;

    let stem = a.report.with_extension("");
    write_file(&a.report, report.per_image_csv().as_bytes())?;
    write_file(&with_suffix(&stem, "_summary.csv"), report.aggregate_csv().as_bytes())?;
    let json = report.to_json().ctx(|| "serializing report".into())?;
    write_file(&with_suffix(&stem, ".json"), json.as_bytes())?;

    println!("{:<10} {:>10} {:>10} {:>10} {:>12}", "setting", "MSE", "MAE", "dE2000", "dE2000 (in)");
    for s in &settings {
        let label = s.label();
        let r = report.for_setting(&label).ctx(|| "aggregating".into())?.aggregate;
        let b = baseline.for_setting(&label).ctx(|| "aggregating".into())?.aggregate;
        println!(
            "{label:<10} {:>10.2} {:>10.2} {:>10.2} {:>12.2}",
            r.mse.mean, r.mae_degrees.mean, r.delta_e2000.mean, b.delta_e2000.mean
        );
    }
    Ok(())
}

fn serve(a: ServeArgs) -> CliResult<()> {
    let bytes = std::fs::read(&a.model)
        .map_err(|e| CliError::from_wb("loading model", WbError::io(&a.model, e)))?;
    let state = crate::server::AppState::from_model_bytes(&bytes).ctx(|| format!("loading model {}", a.model.display()))?;
    let addr = format!("{}:{}", a.host, a.port);
    let rt = tokio::runtime::Runtime::new()
        .map_err(|e| CliError::from_wb("starting runtime", WbError::io("<runtime>", e)))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::from_wb("binding", WbError::io(&addr, e)))?;
        eprintln!("listening on http://{addr}");
        axum::serve(listener, crate::server::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::from_wb("serving", WbError::io(&addr, e)))
    })
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::from_wb("creating directory", WbError::io(dir, e)))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::from_wb("writing", WbError::io(path, e)))
}
