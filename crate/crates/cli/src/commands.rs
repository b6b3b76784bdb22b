use crate::config::{Preset, RunConfig};
use crate::error::{CliError, Result};
use bsonet_core::image::{read_image, write_image, ImageFormat};
use bsonet_core::metrics::{summary_table, MetricsSummary};
use bsonet_core::n2v::{build_pair, pair_seed, Flips};
use bsonet_core::noise::{apply_noise, NoiseConfig};
use bsonet_core::phantom::{generate_phantom, random_scene, SceneSpec};
use bsonet_core::Image;
use bsonet_model::checkpoint::Checkpoint;
use bsonet_model::eval::{evaluate, EvalSample, Method};
use bsonet_model::train::{train, EpochRecord};
use bsonet_model::{full_pipeline_infer, BSoNet, ModelError, Precision};
use bsonet_service::{serve, Client, ServerConfig};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

/// Mixed into scene seeds to derive independent noise seeds.
const NOISE_SALT: u64 = 0x6E6F_6973_6500_0000;

#[derive(Debug, Parser)]
#[command(name = "bsonet", version, about = "Backscatter image restoration toolkit")]
pub struct Cli {
    /// Base seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML configuration file; explicit flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Model and training preset.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom corpus (clean, noisy and a manifest).
    GenData(GenDataArgs),
    /// Write blind-spot training pairs for inspection.
    MakePairs(MakePairsArgs),
    /// Train on noisy images and write a checkpoint plus loss history.
    Train(TrainArgs),
    /// Restore images with a checkpoint.
    Infer(InferArgs),
    /// Compare restoration methods on a corpus.
    Eval(EvalArgs),
    /// Run the inference server.
    Serve(ServeArgs),
    /// Send images to a running server.
    Send(SendArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: Option<usize>,
    /// Side length of the square phantoms.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// `bsr` or `png`.
    #[arg(long)]
    pub format: Option<String>,
}

#[derive(Debug, Args)]
pub struct MakePairsArgs {
    /// Image file or directory.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Maximum number of images to process.
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Image file or directory (a corpus root uses its `noisy/` folder).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Random crop side; 0 trains the full pipeline on whole images.
    #[arg(long)]
    pub crop_size: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_parser = parse_precision)]
    pub precision: Option<Precision>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image file or directory.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Image file or directory; a corpus root supplies clean references.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Required for the `bsonet` method.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated subset of identity,gaussian,bilateral,nlm,bsonet.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Restrict to the held-out images listed in a training `split.json`.
    #[arg(long)]
    pub split: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Bind address; `BSONET_PORT` overrides its port.
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub storage: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub queue_depth: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SendArgs {
    #[arg(long)]
    pub server: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Seconds.
    #[arg(long)]
    pub timeout: Option<f64>,
    /// Image files or directories.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        _ => Err(format!("expected f32 or f64, got {s}")),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub size: usize,
    pub sigma: f64,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub scene_seed: u64,
    pub noise: NoiseConfig,
    pub scene: SceneSpec,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub held_out: Vec<String>,
}

#[derive(Debug, Serialize)]
struct PairRecord {
    source: String,
    seed: u64,
    masked: usize,
    flips: Flips,
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), cli.preset)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.train.seed = cfg.seed;
    match cli.command {
        Command::GenData(a) => gen_data(cfg, a),
        Command::MakePairs(a) => make_pairs(cfg, a),
        Command::Train(a) => train_cmd(cfg, a),
        Command::Infer(a) => infer(cfg, a),
        Command::Eval(a) => eval(cfg, a),
        Command::Serve(a) => serve_cmd(cfg, a),
        Command::Send(a) => send(cfg, a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path.display(), e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Failed(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn load(path: &Path) -> Result<Image> {
    read_image(path).map_err(|e| CliError::io(path.display(), e))
}

fn save(img: &Image, path: &Path) -> Result<()> {
    write_image(img, path).map_err(|e| CliError::io(path.display(), e))
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn extension(path: &Path) -> &'static str {
    ImageFormat::from_path(path).map(|f| f.extension()).unwrap_or("bsr")
}

/// Images under `path`, sorted by name. A directory holding a `noisy/`
/// folder is treated as a generated corpus and that folder is used.
pub fn list_images(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(CliError::Io(format!("{}: no such file or directory", path.display())));
    }
    let dir = if path.join("noisy").is_dir() { path.join("noisy") } else { path.to_path_buf() };
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| CliError::io(dir.display(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && ImageFormat::from_path(p).is_ok())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Io(format!("{}: no images found", dir.display())));
    }
    Ok(files)
}

fn gen_data(mut cfg: RunConfig, a: GenDataArgs) -> Result<()> {
    if let Some(v) = a.count {
        cfg.data.count = v;
    }
    if let Some(v) = a.size {
        cfg.data.size = v;
    }
    if let Some(v) = a.sigma {
        cfg.data.sigma = v;
    }
    if let Some(v) = a.format {
        cfg.data.format = v;
    }
    let ext = match cfg.data.format.as_str() {
        "bsr" | "png" => cfg.data.format.clone(),
        other => return Err(CliError::usage(format!("unknown image format {other:?}"))),
    };
    if cfg.data.count == 0 {
        return Err(CliError::usage("count must be positive"));
    }
    let clean_dir = a.out.join("clean");
    let noisy_dir = a.out.join("noisy");
    create_dir(&clean_dir)?;
    create_dir(&noisy_dir)?;

    let size = cfg.data.size;
    let mut entries = Vec::with_capacity(cfg.data.count);
    for i in 0..cfg.data.count {
        let scene_seed = pair_seed(cfg.seed, i as u64);
        let scene = random_scene(size, size, scene_seed);
        let clean = generate_phantom(&scene, scene_seed)?;
        let noise = NoiseConfig::gaussian(cfg.data.sigma, scene_seed ^ NOISE_SALT);
        let noisy = apply_noise(&clean, &noise)?;
        let file = format!("phantom_{i:04}.{ext}");
        save(&clean, &clean_dir.join(&file))?;
        save(&noisy, &noisy_dir.join(&file))?;
        entries.push(ManifestEntry { file, scene_seed, noise, scene });
    }
    let manifest = Manifest { seed: cfg.seed, size, sigma: cfg.data.sigma, entries };
    write_json(&a.out.join("manifest.json"), &manifest)?;
    cfg.echo(&a.out)?;
    println!("wrote {} phantoms to {}", cfg.data.count, a.out.display());
    Ok(())
}

fn make_pairs(cfg: RunConfig, a: MakePairsArgs) -> Result<()> {
    let mut files = list_images(&a.input)?;
    if let Some(n) = a.count {
        files.truncate(n);
    }
    create_dir(&a.out)?;
    let mut records = Vec::new();
    for (i, path) in files.iter().enumerate() {
        let img = load(path)?;
        let seed = pair_seed(cfg.seed, i as u64);
        let pair = build_pair(&img, &cfg.n2v.with_seed(seed))?;
        let (name, ext) = (stem(path), extension(path));
        save(&pair.input, &a.out.join(format!("{name}_input.{ext}")))?;
        save(&pair.target, &a.out.join(format!("{name}_target.{ext}")))?;
        save(&pair.mask.to_image(), &a.out.join(format!("{name}_mask.{ext}")))?;
        records.push(PairRecord {
            source: file_name(path),
            seed,
            masked: pair.mask.count(),
            flips: pair.flips,
        });
    }
    write_json(&a.out.join("pairs.json"), &records)?;
    cfg.echo(&a.out)?;
    println!("wrote {} pairs to {}", records.len(), a.out.display());
    Ok(())
}

fn train_cmd(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr_initial = v;
    }
    if let Some(v) = a.crop_size {
        cfg.train.crop_size = (v > 0).then_some(v);
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.precision {
        cfg.train.precision = v;
    }
    cfg.train.validate()?;

    let files = list_images(&a.data)?;
    let n_train = ((files.len() as f64 * cfg.train.split_ratio).round() as usize).clamp(1, files.len());
    let (train_files, held_out) = files.split_at(n_train);
    let images = train_files.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
    create_dir(&a.out)?;
    cfg.echo(&a.out)?;
    let split = Split {
        train: train_files.iter().map(|p| file_name(p)).collect(),
        held_out: held_out.iter().map(|p| file_name(p)).collect(),
    };
    write_json(&a.out.join("split.json"), &split)?;

    log::info!("training on {} images for {} epochs", images.len(), cfg.train.epochs);
    let outcome = match train(&images, &cfg.n2v, &cfg.model, &cfg.train) {
        Ok(o) => o,
        Err(ModelError::Diverged { epoch, loss, last_good }) => {
            if let Some(ck) = last_good {
                ck.save(a.out.join("last_good.ckpt"))?;
            }
            return Err(CliError::Diverged(format!(
                "training diverged at epoch {epoch} (loss {loss}); last good checkpoint kept"
            )));
        }
        Err(e) => return Err(e.into()),
    };
    outcome.checkpoint.save(a.out.join("model.ckpt"))?;
    write_text(&a.out.join("history.jsonl"), &history_lines(&outcome.history))?;
    let best = &outcome.history[outcome.best_epoch - 1];
    println!("best epoch {} loss {:.6}", best.epoch, best.loss);
    Ok(())
}

fn history_lines(history: &[EpochRecord]) -> String {
    history
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect()
}

fn load_model(path: &Path) -> Result<BSoNet> {
    let ck = Checkpoint::load(path).map_err(|e| CliError::io(path.display(), e))?;
    Ok(ck.to_model()?)
}

fn infer(cfg: RunConfig, a: InferArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let files = list_images(&a.input)?;
    create_dir(&a.out)?;
    for path in &files {
        let out = full_pipeline_infer(&load(path)?, &model)?;
        save(&out, &a.out.join(file_name(path)))?;
    }
    cfg.echo(&a.out)?;
    println!("restored {} images into {}", files.len(), a.out.display());
    Ok(())
}

fn eval(cfg: RunConfig, a: EvalArgs) -> Result<()> {
    let methods: Vec<Method> = match &a.methods {
        Some(names) => names.iter().map(|n| n.trim().parse()).collect::<std::result::Result<_, _>>()?,
        None => Method::ALL.to_vec(),
    };
    let model = match (&a.checkpoint, methods.contains(&Method::Bsonet)) {
        (Some(p), true) => Some(load_model(p)?),
        (None, true) => return Err(CliError::usage("method bsonet needs --checkpoint")),
        _ => None,
    };
    let mut files = list_images(&a.data)?;
    if let Some(split_path) = &a.split {
        let text = std::fs::read_to_string(split_path).map_err(|e| CliError::io(split_path.display(), e))?;
        let split: Split = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("{}: {e}", split_path.display())))?;
        files.retain(|p| split.held_out.contains(&file_name(p)));
        if files.is_empty() {
            return Err(CliError::usage("split leaves no held-out images"));
        }
    }
    let clean_dir = a.data.join("clean");
    let samples = files
        .iter()
        .map(|p| {
            let reference = clean_dir.join(file_name(p));
            let clean = if a.data.is_dir() && reference.is_file() { Some(load(&reference)?) } else { None };
            Ok(EvalSample { id: stem(p), input: load(p)?, clean })
        })
        .collect::<Result<Vec<_>>>()?;

    create_dir(&a.out)?;
    let mut summaries: Vec<MetricsSummary> = Vec::new();
    for method in methods {
        log::info!("evaluating {method} on {} images", samples.len());
        let report = evaluate(method, &samples, model.as_ref(), &cfg.baselines)?;
        let path = a.out.join(format!("{method}.jsonl"));
        let file = std::fs::File::create(&path).map_err(|e| CliError::io(path.display(), e))?;
        report.write_jsonl(std::io::BufWriter::new(file))?;
        summaries.push(report.summary);
    }
    let table = summary_table(&summaries);
    write_text(&a.out.join("summary.tsv"), &table)?;
    cfg.echo(&a.out)?;
    print!("{table}");
    Ok(())
}

fn serve_cmd(mut cfg: RunConfig, a: ServeArgs) -> Result<()> {
    if let Some(v) = a.bind {
        cfg.server.bind = v;
    }
    if let Some(v) = a.storage {
        cfg.server.storage_root = v.to_string_lossy().into_owned();
    }
    if let Some(v) = a.workers {
        cfg.server.workers = v;
    }
    if let Some(v) = a.queue_depth {
        cfg.server.queue_depth = v;
    }
    let model = load_model(&a.checkpoint)?;
    let server_cfg = ServerConfig {
        bind: cfg.server.bind.clone(),
        storage_root: PathBuf::from(&cfg.server.storage_root),
        workers: cfg.server.workers,
        queue_depth: cfg.server.queue_depth,
        ..ServerConfig::default()
    };
    let handle = serve(model, server_cfg)?;
    println!("listening on {}", handle.local_addr());
    std::io::stdout().flush()?;
    handle.join();
    Ok(())
}

fn send(mut cfg: RunConfig, a: SendArgs) -> Result<()> {
    if let Some(v) = a.timeout {
        cfg.server.timeout_secs = v;
    }
    if !(cfg.server.timeout_secs > 0.0) {
        return Err(CliError::usage("timeout must be positive"));
    }
    let mut files = Vec::new();
    for input in &a.inputs {
        files.extend(list_images(input)?);
    }
    let mut client = Client::connect(&a.server, Duration::from_secs_f64(cfg.server.timeout_secs))?;
    create_dir(&a.out)?;
    for path in &files {
        let result = client.optimize(&load(path)?)?;
        save(&result.image, &a.out.join(file_name(path)))?;
        println!(
            "{}\tround_trip_us={}\tinference_us={}",
            file_name(path),
            result.round_trip_micros,
            result.inference_micros
        );
    }
    Ok(())
}
