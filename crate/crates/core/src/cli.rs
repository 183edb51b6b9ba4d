//! The `neurovis` command line: subcommands, JSON config merging and
//! per-run metadata.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::eeg::stem_file;
use crate::error::{Error, Result};
use crate::features::{PoolingChoice, PoolingMode};
use crate::freq::{filter_image, Band, DEFAULT_CUTOFF};
use crate::image::{load_image_file, IMAGE_EXTENSIONS};
use crate::manifest::load_manifest;
use crate::preprocess::{preprocess, EventList, PreprocessConfig};
use crate::retrieval::{evaluate_all, sweep_layers, sweep_pairs, write_eval_csv, write_layers_csv, write_pairs_csv};
use crate::synth::{generate, pixel_manifest, SynthConfig};
use crate::tensor::{read_tensor, write_tensor};
use crate::training::{load_checkpoint, train, DataSource, EegMode, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "neurovis", version, about = "Align EEG epochs with pooled visual-layer features")]
struct Cli {
    /// Worker threads; 1 keeps every output bitwise reproducible
    #[arg(long, global = true, env = "NEUROVIS_THREADS", default_value_t = 1,
          value_parser = clap::value_parser!(u16).range(1..))]
    threads: u16,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Segment, baseline, decimate, whiten and average a raw recording
    Preprocess(PreprocessArgs),
    /// Write a synthetic dataset with planted layer visibility
    SynthGen(SynthGenArgs),
    /// Train an alignment model on a manifest
    Train(TrainArgs),
    /// Zero-shot retrieval of a trained checkpoint on the test split
    Eval(EvalArgs),
    /// Train and evaluate one model per layer and pooling mode
    SweepLayers(SweepArgs),
    /// Train and evaluate one fused model per layer pair
    SweepPairs(SweepArgs),
    /// Keep the low or high spatial-frequency band of every image in a directory
    FilterFreq(FilterArgs),
    /// Replace a manifest's features with raw pixels of per-concept images
    ImageFeatures(ImageFeatureArgs),
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    /// Raw `(channels, samples)` tensor
    #[arg(long)]
    raw: PathBuf,
    /// JSON event list with sampling rate and onsets
    #[arg(long)]
    events: PathBuf,
    /// Output stem; writes `<stem>.nvat` and `<stem>.json`
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    pre_ms: Option<f64>,
    #[arg(long)]
    post_ms: Option<f64>,
    #[arg(long)]
    decimate: Option<usize>,
    #[arg(long)]
    mvnn_shrinkage: Option<f64>,
    /// Skip whitening
    #[arg(long, conflicts_with = "mvnn_shrinkage")]
    no_mvnn: bool,
    #[arg(long)]
    avg_group: Option<usize>,
}

#[derive(Debug, Args)]
struct SynthGenArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainOverrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    noise_sigma_rel: Option<f64>,
    /// Pooling for both topologies (mean, max or cls)
    #[arg(long)]
    pooling: Option<PoolingMode>,
    #[arg(long)]
    backbone: Option<String>,
    /// Comma-separated subject ids
    #[arg(long, value_delimiter = ',')]
    subjects: Option<Vec<String>>,
    #[arg(long, value_parser = parse_eeg_mode)]
    eeg_mode: Option<EegMode>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated layer indices to fuse
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint directory, or a training output directory (latest epoch)
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    subjects: Option<Vec<String>>,
    /// Average only the first N test repetitions (default: all)
    #[arg(long, value_name = "N")]
    test_repetitions: Option<usize>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Layers to sweep; defaults to every layer of the backbone
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Debug, Args)]
struct FilterArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    cutoff: f64,
    #[arg(long, value_parser = parse_band)]
    band: Band,
}

#[derive(Debug, Args)]
struct ImageFeatureArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of `<concept>.v<k>.<ext>` images
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_band(s: &str) -> std::result::Result<Band, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_eeg_mode(s: &str) -> std::result::Result<EegMode, String> {
    match s {
        "average" => Ok(EegMode::Average),
        "single" => Ok(EegMode::Single),
        _ => Err(format!("expected average or single, got {s}")),
    }
}

/// Reproducibility record written next to every run's outputs. Wall time
/// goes to a separate `timing.json` so this file is itself reproducible.
#[derive(Debug, Serialize)]
struct RunMetadata<'a> {
    command: &'a str,
    command_line: Vec<String>,
    version: &'static str,
    threads: u16,
    seed: Option<u64>,
    config_hash: String,
    config: &'a Value,
    outputs: Vec<String>,
}

struct Run<'a> {
    argv: &'a [String],
    threads: u16,
    started: Instant,
}

impl Run<'_> {
    fn finish(&self, command: &str, config: &Value, seed: Option<u64>, outputs: &[PathBuf], meta_stem: &Path) -> Result<()> {
        let canonical = serde_json::to_string(config).expect("config values serialize");
        let meta = RunMetadata {
            command,
            command_line: self.argv.to_vec(),
            version: env!("CARGO_PKG_VERSION"),
            threads: self.threads,
            seed,
            config_hash: hex(&Sha256::digest(canonical.as_bytes())),
            config,
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        };
        write_json(&with_suffix(meta_stem, "run.json"), &meta)?;
        let wall = self.started.elapsed().as_secs_f64();
        write_json(&with_suffix(meta_stem, "timing.json"), &serde_json::json!({ "wall_time_s": wall }))?;
        info!("command={command} wall_time_s={wall:.3} outputs={}", outputs.len());
        Ok(())
    }
}

/// `dir/name` for directory outputs, `<stem>.name` for file stems.
fn with_suffix(stem: &Path, name: &str) -> PathBuf {
    if stem.is_dir() {
        stem.join(name)
    } else {
        stem_file(stem, name)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn load_config_object(path: Option<&Path>) -> Result<Map<String, Value>> {
    let Some(path) = path else {
        return Ok(Map::new());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match serde_json::from_str(&text).map_err(|e| Error::json(path, e))? {
        Value::Object(m) => Ok(m),
        _ => Err(Error::Config(format!("{}: config must be a JSON object", path.display()))),
    }
}

/// File config, then flags on top; the merged object must parse as `T`.
fn merge<T: serde::de::DeserializeOwned + Serialize>(path: Option<&Path>, flags: Vec<(&str, Value)>) -> Result<(T, Value)> {
    let mut obj = load_config_object(path)?;
    for (k, v) in flags {
        if !v.is_null() {
            obj.insert(k.to_string(), v);
        }
    }
    let label = path.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("<flags>"));
    let cfg: T = serde_json::from_value(Value::Object(obj)).map_err(|e| Error::json(&label, e))?;
    // re-serialize so the hash covers defaults too
    let resolved = serde_json::to_value(&cfg).map_err(|e| Error::json(&label, e))?;
    Ok((cfg, resolved))
}

fn json<T: Serialize>(v: &Option<T>) -> Value {
    v.as_ref().map_or(Value::Null, |x| serde_json::to_value(x).expect("flag values serialize"))
}

fn train_config(o: &TrainOverrides, layers: &Option<Vec<usize>>) -> Result<(TrainConfig, Value)> {
    let (cfg, resolved): (TrainConfig, Value) = merge(
        o.config.as_deref(),
        vec![
            ("seed", json(&o.seed)),
            ("epochs", json(&o.epochs)),
            ("lr", json(&o.lr)),
            ("weight_decay", json(&o.weight_decay)),
            ("batch_size", json(&o.batch_size)),
            ("noise_sigma_rel", json(&o.noise_sigma_rel)),
            ("pooling", json(&o.pooling.map(PoolingChoice::uniform))),
            ("backbone", json(&o.backbone)),
            ("subjects", json(&o.subjects)),
            ("eeg_mode", json(&o.eeg_mode)),
            ("layer_indices", json(layers)),
        ],
    )?;
    cfg.validate()?;
    Ok((cfg, resolved))
}

fn cmd_preprocess(run: &Run, a: &PreprocessArgs) -> Result<()> {
    let shrink = if a.no_mvnn {
        Value::Null
    } else {
        json(&a.mvnn_shrinkage)
    };
    let (mut cfg, _): (PreprocessConfig, Value) = merge(
        a.config.as_deref(),
        vec![
            ("pre_ms", json(&a.pre_ms)),
            ("post_ms", json(&a.post_ms)),
            ("decimate", json(&a.decimate)),
            ("mvnn_shrinkage", shrink),
            ("avg_group", json(&a.avg_group)),
        ],
    )?;
    if a.no_mvnn {
        cfg.mvnn_shrinkage = None;
    }
    let resolved = serde_json::to_value(&cfg).expect("config serializes");
    let raw = read_tensor(&a.raw)?;
    let events = EventList::load(&a.events)?;
    let (epochs, concepts) = preprocess(&raw, &events, &cfg)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    epochs.save(&a.out, &concepts)?;
    info!("epochs dims={:?} fs={}", epochs.dims(), epochs.sampling_rate_hz);
    let outputs = vec![stem_file(&a.out, "nvat"), stem_file(&a.out, "json")];
    run.finish("preprocess", &resolved, None, &outputs, &a.out)
}

fn cmd_synth(run: &Run, a: &SynthGenArgs) -> Result<()> {
    let (cfg, resolved): (SynthConfig, Value) = merge(a.config.as_deref(), vec![("seed", json(&a.seed))])?;
    let data = generate(&cfg)?;
    mkdir(&a.out)?;
    data.write(&a.out)?;
    info!("synthetic dataset concepts={} subjects={}", data.concepts.len(), data.eeg.len());
    let outputs = vec![a.out.join("manifest.json")];
    run.finish("synth-gen", &resolved, Some(cfg.seed), &outputs, &a.out)
}

fn cmd_train(run: &Run, a: &TrainArgs) -> Result<()> {
    let (cfg, resolved) = train_config(&a.train, &a.layers)?;
    let m = load_manifest(&a.manifest)?;
    let src = DataSource::load(&m, cfg.backbone.as_deref(), &cfg.subjects)?;
    let ds = src.dataset(&cfg.layer_indices, cfg.pooling)?;
    info!("training layers={:?} train={} steps_per_epoch={}", ds.layer_indices(), ds.train_rows.len(), ds.train_rows.len() / cfg.batch_size);
    mkdir(&a.out)?;
    let outcome = train(&ds, &cfg, Some(&a.out))?;
    if let Some(last) = outcome.curve.last() {
        info!("final step={} loss={:.6} tau={:.6}", last.step, last.loss, last.tau);
    }
    write_json(&a.out.join("config.json"), &resolved)?;
    let mut outputs = vec![a.out.join("loss.csv"), a.out.join("config.json")];
    outputs.extend(outcome.checkpoints);
    run.finish("train", &resolved, Some(cfg.seed), &outputs, &a.out)
}

fn cmd_eval(run: &Run, a: &EvalArgs) -> Result<()> {
    let (model, info) = load_checkpoint(&a.checkpoint)?;
    let m = load_manifest(&a.manifest)?;
    let subjects = a.subjects.clone().unwrap_or_default();
    let src = DataSource::load(&m, info.backbone.as_deref(), &subjects)?;
    let ds = src.dataset(&info.layers, info.pooling)?;
    let reports = evaluate_all(&model, &ds, a.test_repetitions)?;
    for (s, r) in &reports {
        info!("subject={s} n_way={} top1={} top5={}", r.n_way, r.top1, r.top5);
    }
    mkdir(&a.out)?;
    let csv = a.out.join("eval.csv");
    write_eval_csv(&reports, &csv)?;
    let config = serde_json::json!({
        "checkpoint": a.checkpoint,
        "epoch": info.epoch,
        "layers": info.layers,
        "pooling": info.pooling,
        "backbone": info.backbone,
        "subjects": subjects,
        "test_repetitions": a.test_repetitions,
    });
    run.finish("eval", &config, None, &[csv], &a.out)
}

fn sweep_setup(a: &SweepArgs) -> Result<(TrainConfig, Value, DataSource, Vec<usize>)> {
    let (cfg, resolved) = train_config(&a.train, &None)?;
    let m = load_manifest(&a.manifest)?;
    let src = DataSource::load(&m, cfg.backbone.as_deref(), &cfg.subjects)?;
    let layers = match &a.layers {
        Some(l) => l.clone(),
        None => src.features.layers.iter().map(|l| l.index).collect(),
    };
    let mut resolved = resolved;
    resolved["sweep_layers"] = serde_json::json!(layers);
    mkdir(&a.out)?;
    Ok((cfg, resolved, src, layers))
}

fn cmd_sweep_layers(run: &Run, a: &SweepArgs) -> Result<()> {
    let (cfg, resolved, src, layers) = sweep_setup(a)?;
    let rows = sweep_layers(&src, &cfg, &layers)?;
    for r in &rows {
        info!("layer={} pooling={} top1={} top5={}", r.layer, r.pooling, r.top1, r.top5);
    }
    let csv = a.out.join("layers.csv");
    write_layers_csv(&rows, &csv)?;
    run.finish("sweep-layers", &resolved, Some(cfg.seed), &[csv], &a.out)
}

fn cmd_sweep_pairs(run: &Run, a: &SweepArgs) -> Result<()> {
    let (cfg, resolved, src, layers) = sweep_setup(a)?;
    let rows = sweep_pairs(&src, &cfg, &layers)?;
    for r in &rows {
        info!("layers={},{} top1={} top5={}", r.layer_a, r.layer_b, r.top1, r.top5);
    }
    let csv = a.out.join("pairs.csv");
    write_pairs_csv(&rows, &csv)?;
    run.finish("sweep-pairs", &resolved, Some(cfg.seed), &[csv], &a.out)
}

fn cmd_filter(run: &Run, a: &FilterArgs) -> Result<()> {
    let mut inputs: Vec<PathBuf> = fs::read_dir(&a.input)
        .map_err(|e| Error::io(&a.input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e))
        })
        .collect();
    inputs.sort();
    if inputs.is_empty() {
        return Err(Error::BadImage(format!("no images in {}", a.input.display())));
    }
    mkdir(&a.out)?;
    let mut outputs = Vec::with_capacity(inputs.len());
    for p in &inputs {
        let filtered = filter_image(&load_image_file(p)?, a.cutoff, a.band)?;
        // floats, since filtered values leave [0, 1]
        let stem = p.file_stem().expect("listed files have names");
        let dst = stem_file(&a.out.join(stem), "nvat");
        if outputs.contains(&dst) {
            return Err(Error::BadImage(format!("two inputs map to {}", dst.display())));
        }
        write_tensor(&filtered.to_tensor()?, &dst)?;
        outputs.push(dst);
    }
    info!("filtered images={} band={:?} cutoff={}", outputs.len(), a.band, a.cutoff);
    let band = match a.band {
        Band::Low => "low",
        Band::High => "high",
    };
    let config = serde_json::json!({ "in": a.input, "cutoff": a.cutoff, "band": band });
    run.finish("filter-freq", &config, None, &outputs, &a.out)
}

fn cmd_image_features(run: &Run, a: &ImageFeatureArgs) -> Result<()> {
    let m = load_manifest(&a.manifest)?;
    mkdir(&a.out)?;
    let out = pixel_manifest(&m, &a.images, &a.out)?;
    info!("pixel features views={}", out.num_views);
    let config = serde_json::json!({ "manifest": a.manifest, "images": a.images });
    run.finish("image-features", &config, None, &[a.out.join("manifest.json")], &a.out)
}

#[cfg(feature = "parallel")]
fn init_threads(n: u16) {
    // a second call in the same process keeps the existing pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n as usize).build_global();
}

#[cfg(not(feature = "parallel"))]
fn init_threads(_: u16) {}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => EXIT_USAGE,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    init_threads(cli.threads);
    let argv_s: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let run = Run {
        argv: &argv_s,
        threads: cli.threads,
        started: Instant::now(),
    };
    let result = match &cli.command {
        Command::Preprocess(a) => cmd_preprocess(&run, a),
        Command::SynthGen(a) => cmd_synth(&run, a),
        Command::Train(a) => cmd_train(&run, a),
        Command::Eval(a) => cmd_eval(&run, a),
        Command::SweepLayers(a) => cmd_sweep_layers(&run, a),
        Command::SweepPairs(a) => cmd_sweep_pairs(&run, a),
        Command::FilterFreq(a) => cmd_filter(&run, a),
        Command::ImageFeatures(a) => cmd_image_features(&run, a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}
