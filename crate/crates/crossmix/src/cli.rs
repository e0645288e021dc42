//! Command-line wiring: dataset generation, training, evaluation, the
//! ablation grid, and report aggregation.
//!
//! Every command resolves its configuration fully (defaults, then config
//! file, then flags) before any work starts, and persists that resolved
//! configuration verbatim into `manifest.json` next to its outputs. Output
//! files contain no timestamps, so re-running a manifest reproduces them
//! byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{self, EpisodeSplit, SampleRecord, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{self, Direction, EvalReport};
use crate::trainer::{self, EpochMetrics, ModelState, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser)]
#[command(
    name = "crossmix",
    version,
    about = "Few-shot cross-modal retrieval with mixture prototypes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-peak cross-modal dataset.
    Generate(GenerateArgs),
    /// Train projections on the source-domain classes of a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the target domain (optionally k-shot).
    Evaluate(EvaluateArgs),
    /// Run the full/no-mixture/no-rdp grid over seeds and shot counts.
    Ablate(AblateArgs),
    /// Aggregate evaluation outputs under a run directory into a table.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output dataset path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    classes: Option<u32>,
    /// Latent peaks per class.
    #[arg(long)]
    peaks: Option<usize>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    image_descriptors: Option<usize>,
    #[arg(long)]
    text_descriptors: Option<usize>,
    #[arg(long)]
    image_dim: Option<usize>,
    #[arg(long)]
    text_dim: Option<usize>,
    #[arg(long)]
    class_spread: Option<f64>,
    #[arg(long)]
    coupling_noise: Option<f64>,
    #[arg(long)]
    image_noise: Option<f64>,
    #[arg(long)]
    text_noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print the resolved generator settings and exit.
    #[arg(long)]
    print_config: bool,
}

/// Training hyperparameters shared by `train`, `evaluate`, and `ablate`.
/// Unset flags fall back to the config file, then to built-in defaults.
#[derive(Args, Clone)]
struct HyperArgs {
    /// Flat key-value config file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Shared latent dimension.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    components_image: Option<usize>,
    #[arg(long)]
    components_text: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    stage1_epochs: Option<u32>,
    #[arg(long)]
    stage2_epochs: Option<u32>,
    #[arg(long)]
    finetune_epochs: Option<u32>,
    /// Replace per-sample mixtures with mean-pooled prototypes.
    #[arg(long)]
    disable_gmm: bool,
    /// Force the distance-preservation weight to zero.
    #[arg(long)]
    disable_rdp: bool,
    /// Fraction of classes assigned to the source domain.
    #[arg(long)]
    source_fraction: Option<f64>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for checkpoint, metrics, and manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Resume from an existing checkpoint instead of initializing.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset path; defaults to the one recorded in the manifest next to
    /// the checkpoint.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Support samples per target class (0 = zero-shot).
    #[arg(long, default_value_t = 0)]
    k: usize,
    /// Episode seed; defaults to the training seed in the checkpoint.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated shot counts, e.g. `0,1,3,5`.
    #[arg(long, default_value = "0,3")]
    k: String,
    /// Seeds as a comma list or inclusive range, e.g. `1..5`.
    #[arg(long, default_value = "1..5")]
    seeds: String,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory produced by `train`/`evaluate`/`ablate`.
    run: PathBuf,
}

/// Parse and execute; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with success codes.
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Report(args) => cmd_report(args),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e @ Error::Usage { .. }) => {
            eprintln!("{e}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

// --- configuration resolution ---

const CONFIG_KEYS: &[&str] = &[
    "dim",
    "components-image",
    "components-text",
    "tau",
    "alpha",
    "lambda",
    "theta",
    "lr",
    "batch",
    "stage1-epochs",
    "stage2-epochs",
    "finetune-epochs",
    "seed",
    "disable-gmm",
    "disable-rdp",
    "source-fraction",
];

fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let content = fs::read_to_string(path).map_err(|e| Error::Usage {
        message: format!("cannot read config file {}: {e}", path.display()),
    })?;
    let mut map = BTreeMap::new();
    for (line_no, line) in content.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Usage {
            message: format!("config line {}: expected `key = value`", line_no + 1),
        })?;
        let key = key.trim().to_string();
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(Error::Usage {
                message: format!("config line {}: unknown key `{key}`", line_no + 1),
            });
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Usage {
        message: format!("config key `{key}`: cannot parse `{value}`"),
    })
}

/// Resolved settings beyond the trainer config proper.
#[derive(Debug, Clone, Serialize)]
struct RunSettings {
    train: TrainConfig,
    source_fraction: f64,
    disable_rdp: bool,
}

/// Defaults, overlaid by the config file, overlaid by flags.
fn resolve(hyper: &HyperArgs, seed_flag: Option<u64>) -> Result<RunSettings> {
    let mut train = TrainConfig::default();
    let mut source_fraction = 0.5;
    let mut disable_rdp = false;

    if let Some(path) = &hyper.config {
        let file = parse_config_file(path)?;
        for (key, value) in &file {
            match key.as_str() {
                "dim" => train.latent_dim = parse_value(key, value)?,
                "components-image" => train.image_components = parse_value(key, value)?,
                "components-text" => train.text_components = parse_value(key, value)?,
                "tau" => train.temperature = parse_value(key, value)?,
                "alpha" => train.alpha = parse_value(key, value)?,
                "lambda" => train.lambda = parse_value(key, value)?,
                "theta" => train.theta = parse_value(key, value)?,
                "lr" => train.learning_rate = parse_value(key, value)?,
                "batch" => train.batch_size = parse_value(key, value)?,
                "stage1-epochs" => train.stage1_epochs = parse_value(key, value)?,
                "stage2-epochs" => train.stage2_epochs = parse_value(key, value)?,
                "finetune-epochs" => train.finetune_epochs = parse_value(key, value)?,
                "seed" => train.seed = parse_value(key, value)?,
                "disable-gmm" => train.disable_gmm = parse_value(key, value)?,
                "disable-rdp" => disable_rdp = parse_value(key, value)?,
                "source-fraction" => source_fraction = parse_value(key, value)?,
                _ => unreachable!("key list is closed"),
            }
        }
    }

    if let Some(v) = hyper.dim {
        train.latent_dim = v;
    }
    if let Some(v) = hyper.components_image {
        train.image_components = v;
    }
    if let Some(v) = hyper.components_text {
        train.text_components = v;
    }
    if let Some(v) = hyper.tau {
        train.temperature = v;
    }
    if let Some(v) = hyper.alpha {
        train.alpha = v;
    }
    if let Some(v) = hyper.lambda {
        train.lambda = v;
    }
    if let Some(v) = hyper.theta {
        train.theta = v;
    }
    if let Some(v) = hyper.lr {
        train.learning_rate = v;
    }
    if let Some(v) = hyper.batch {
        train.batch_size = v;
    }
    if let Some(v) = hyper.stage1_epochs {
        train.stage1_epochs = v;
    }
    if let Some(v) = hyper.stage2_epochs {
        train.stage2_epochs = v;
    }
    if let Some(v) = hyper.finetune_epochs {
        train.finetune_epochs = v;
    }
    if hyper.disable_gmm {
        train.disable_gmm = true;
    }
    if hyper.disable_rdp {
        disable_rdp = true;
    }
    if let Some(v) = hyper.source_fraction {
        source_fraction = v;
    }
    if let Some(v) = seed_flag {
        train.seed = v;
    }
    if disable_rdp {
        train.lambda = 0.0;
    }
    train.validate()?;
    Ok(RunSettings {
        train,
        source_fraction,
        disable_rdp,
    })
}

fn print_settings(settings: &RunSettings) {
    let t = &settings.train;
    println!("dim = {}", t.latent_dim);
    println!("components-image = {}", t.image_components);
    println!("components-text = {}", t.text_components);
    println!("tau = {}", t.temperature);
    println!("alpha = {}", t.alpha);
    println!("lambda = {}", t.lambda);
    println!("theta = {}", t.theta);
    println!("lr = {}", t.learning_rate);
    println!("batch = {}", t.batch_size);
    println!("stage1-epochs = {}", t.stage1_epochs);
    println!("stage2-epochs = {}", t.stage2_epochs);
    println!("finetune-epochs = {}", t.finetune_epochs);
    println!("seed = {}", t.seed);
    println!("disable-gmm = {}", t.disable_gmm);
    println!("disable-rdp = {}", settings.disable_rdp);
    println!("source-fraction = {}", settings.source_fraction);
}

// --- manifests and common output helpers ---

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    crate_version: &'a str,
    dataset: Option<String>,
    dataset_sha256: Option<String>,
    settings: Option<&'a RunSettings>,
    seeds: Vec<u64>,
    k_values: Vec<usize>,
    outputs: Vec<String>,
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn write_manifest(dir: &Path, manifest: &Manifest<'_>) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(manifest)?,
    )?;
    Ok(())
}

fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,stage,lambda,ence_image,ence_text,cross,rdp,total\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{:.12},{:.12},{:.12},{:.12},{:.12}\n",
            m.epoch, m.stage, m.lambda, m.ence_image, m.ence_text, m.cross, m.rdp, m.total
        ));
    }
    out
}

fn load_records(path: &Path) -> Result<Vec<SampleRecord>> {
    let (_, records) = data::load_dataset(path)?;
    Ok(records)
}

fn source_records(records: &[SampleRecord], split: &EpisodeSplit) -> Vec<SampleRecord> {
    records
        .iter()
        .filter(|r| split.is_source_class(r.label))
        .cloned()
        .collect()
}

fn write_eval_outputs(dir: &Path, report: &EvalReport) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let stem = match report.direction {
        Direction::ImageToText => "eval_i2t",
        Direction::TextToImage => "eval_t2i",
    };
    let json_name = format!("{stem}.json");
    let csv_name = format!("{stem}.csv");
    fs::write(dir.join(&json_name), report.to_json()?)?;
    fs::write(dir.join(&csv_name), report.to_csv())?;
    Ok(vec![json_name, csv_name])
}

/// Fine-tune (when the split has support) and evaluate both directions.
fn evaluate_split(
    state: &ModelState,
    records: &[SampleRecord],
    split: &EpisodeSplit,
) -> Result<(EvalReport, EvalReport)> {
    let mut state = state.clone();
    if split.k > 0 {
        trainer::finetune(&mut state, records, split)?;
    }
    let i2t = eval::evaluate(&state, records, split, Direction::ImageToText)?;
    let t2i = eval::evaluate(&state, records, split, Direction::TextToImage)?;
    Ok((i2t, t2i))
}

// --- commands ---

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let defaults = SyntheticSpec::default();
    let spec = SyntheticSpec {
        classes: args.classes.unwrap_or(defaults.classes),
        peaks_per_class: args.peaks.unwrap_or(defaults.peaks_per_class),
        samples_per_class: args.samples_per_class.unwrap_or(defaults.samples_per_class),
        latent_dim: args.latent_dim.unwrap_or(defaults.latent_dim),
        image_descriptors: args
            .image_descriptors
            .unwrap_or(defaults.image_descriptors),
        text_descriptors: args.text_descriptors.unwrap_or(defaults.text_descriptors),
        image_dim: args.image_dim.unwrap_or(defaults.image_dim),
        text_dim: args.text_dim.unwrap_or(defaults.text_dim),
        class_spread: args.class_spread.unwrap_or(defaults.class_spread),
        coupling_noise: args.coupling_noise.unwrap_or(defaults.coupling_noise),
        image_noise: args.image_noise.unwrap_or(defaults.image_noise),
        text_noise: args.text_noise.unwrap_or(defaults.text_noise),
        seed: args.seed.unwrap_or(defaults.seed),
    };
    if args.print_config {
        println!("classes = {}", spec.classes);
        println!("peaks = {}", spec.peaks_per_class);
        println!("samples-per-class = {}", spec.samples_per_class);
        println!("latent-dim = {}", spec.latent_dim);
        println!("image-descriptors = {}", spec.image_descriptors);
        println!("text-descriptors = {}", spec.text_descriptors);
        println!("image-dim = {}", spec.image_dim);
        println!("text-dim = {}", spec.text_dim);
        println!("class-spread = {}", spec.class_spread);
        println!("coupling-noise = {}", spec.coupling_noise);
        println!("image-noise = {}", spec.image_noise);
        println!("text-noise = {}", spec.text_noise);
        println!("seed = {}", spec.seed);
        return Ok(());
    }
    let records = data::generate_synthetic(&spec)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    data::save_dataset(&args.out, &records)?;
    println!(
        "wrote {} samples over {} classes to {}",
        records.len(),
        spec.classes,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let settings = resolve(&args.hyper, args.seed)?;
    if args.hyper.print_config {
        print_settings(&settings);
        return Ok(());
    }
    let records = load_records(&args.dataset)?;
    let split = data::make_episode(&records, settings.train.seed, 0, settings.source_fraction)?;
    let source = source_records(&records, &split);

    let (mut state, mut metrics) = match &args.resume {
        Some(path) => {
            let mut state = trainer::load_checkpoint(&fs::read(path)?)?;
            let remaining = state.config.total_epochs().saturating_sub(state.epoch);
            let metrics = trainer::train_epochs(&mut state, &source, remaining)?;
            (state, metrics)
        }
        None => trainer::train(&settings.train, &source)?,
    };
    // Drop wall-clock fields from persisted CSV inputs.
    for m in metrics.iter_mut() {
        m.wall_seconds = 0.0;
    }

    fs::create_dir_all(&args.out)?;
    fs::write(
        args.out.join("checkpoint.gckp"),
        trainer::save_checkpoint(&state),
    )?;
    fs::write(args.out.join("metrics.csv"), metrics_csv(&metrics))?;
    write_manifest(
        &args.out,
        &Manifest {
            command: "train",
            crate_version: env!("CARGO_PKG_VERSION"),
            dataset: Some(args.dataset.display().to_string()),
            dataset_sha256: Some(file_sha256(&args.dataset)?),
            settings: Some(&settings),
            seeds: vec![settings.train.seed],
            k_values: vec![],
            outputs: vec!["checkpoint.gckp".to_string(), "metrics.csv".to_string()],
        },
    )?;
    let last = metrics.last();
    println!(
        "trained {} epochs on {} source samples (final loss {})",
        state.epoch,
        source.len(),
        last.map(|m| m.total).unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Find the dataset path recorded by `train` next to a checkpoint.
fn dataset_from_manifest(checkpoint: &Path) -> Result<PathBuf> {
    let dir = checkpoint.parent().unwrap_or_else(|| Path::new("."));
    let manifest_path = dir.join("manifest.json");
    let content = fs::read_to_string(&manifest_path).map_err(|_| Error::Usage {
        message: format!(
            "no --dataset given and no manifest at {}",
            manifest_path.display()
        ),
    })?;
    let value: serde_json::Value = serde_json::from_str(&content)?;
    value
        .get("dataset")
        .and_then(|v| v.as_str())
        .map(PathBuf::from)
        .ok_or(Error::Usage {
            message: "manifest has no dataset entry; pass --dataset".to_string(),
        })
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let state = trainer::load_checkpoint(&fs::read(&args.checkpoint)?)?;
    let settings = RunSettings {
        train: state.config.clone(),
        source_fraction: args.hyper.source_fraction.unwrap_or(0.5),
        disable_rdp: state.config.lambda == 0.0,
    };
    if args.hyper.print_config {
        print_settings(&settings);
        return Ok(());
    }
    let dataset = match &args.dataset {
        Some(path) => path.clone(),
        None => dataset_from_manifest(&args.checkpoint)?,
    };
    let records = load_records(&dataset)?;
    let seed = args.seed.unwrap_or(state.config.seed);
    let split = data::make_episode(&records, seed, args.k, settings.source_fraction)?;
    let (i2t, t2i) = evaluate_split(&state, &records, &split)?;

    let out = args.out.clone().unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .to_path_buf()
    });
    let mut outputs = write_eval_outputs(&out, &i2t)?;
    outputs.extend(write_eval_outputs(&out, &t2i)?);
    write_manifest(
        &out,
        &Manifest {
            command: "evaluate",
            crate_version: env!("CARGO_PKG_VERSION"),
            dataset: Some(dataset.display().to_string()),
            dataset_sha256: Some(file_sha256(&dataset)?),
            settings: Some(&settings),
            seeds: vec![seed],
            k_values: vec![args.k],
            outputs,
        },
    )?;
    println!(
        "k={} I2T {:.4} T2I {:.4} Avg {:.4} (excluded {})",
        args.k,
        i2t.map,
        t2i.map,
        eval::average_map(&i2t, &t2i),
        i2t.excluded + t2i.excluded
    );
    Ok(())
}

fn parse_k_list(text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in text.split(',') {
        out.push(part.trim().parse().map_err(|_| Error::Usage {
            message: format!("bad k value `{part}`"),
        })?);
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

fn parse_seed_list(text: &str) -> Result<Vec<u64>> {
    if let Some((start, end)) = text.split_once("..") {
        let start: u64 = start.trim().parse().map_err(|_| Error::Usage {
            message: format!("bad seed range `{text}`"),
        })?;
        let end: u64 = end.trim().parse().map_err(|_| Error::Usage {
            message: format!("bad seed range `{text}`"),
        })?;
        if end < start {
            return Err(Error::Usage {
                message: format!("empty seed range `{text}`"),
            });
        }
        return Ok((start..=end).collect());
    }
    let mut out = Vec::new();
    for part in text.split(',') {
        out.push(part.trim().parse().map_err(|_| Error::Usage {
            message: format!("bad seed value `{part}`"),
        })?);
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Ablation variants mirrored by the report layout.
const VARIANTS: &[&str] = &["full", "no-gmm", "no-rdp"];

fn variant_config(base: &TrainConfig, variant: &str, seed: u64) -> TrainConfig {
    let mut config = base.clone();
    config.seed = seed;
    match variant {
        "full" => {}
        "no-gmm" => config.disable_gmm = true,
        "no-rdp" => config.lambda = 0.0,
        _ => unreachable!(),
    }
    config
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let settings = resolve(&args.hyper, None)?;
    if args.hyper.print_config {
        print_settings(&settings);
        return Ok(());
    }
    let ks = parse_k_list(&args.k)?;
    let seeds = parse_seed_list(&args.seeds)?;
    if ks.is_empty() || seeds.is_empty() {
        return Err(Error::Usage {
            message: "ablate needs at least one k and one seed".to_string(),
        });
    }
    let records = load_records(&args.dataset)?;
    fs::create_dir_all(&args.out)?;

    for &seed in &seeds {
        for variant in VARIANTS {
            let config = variant_config(&settings.train, variant, seed);
            let class_split = data::make_episode(&records, seed, 0, settings.source_fraction)?;
            let source = source_records(&records, &class_split);
            let (state, mut metrics) = trainer::train(&config, &source)?;
            for m in metrics.iter_mut() {
                m.wall_seconds = 0.0;
            }

            let run_dir = args.out.join(variant).join(format!("seed{seed}"));
            fs::create_dir_all(&run_dir)?;
            fs::write(
                run_dir.join("checkpoint.gckp"),
                trainer::save_checkpoint(&state),
            )?;
            fs::write(run_dir.join("metrics.csv"), metrics_csv(&metrics))?;

            for &k in &ks {
                let split = data::make_episode(&records, seed, k, settings.source_fraction)?;
                let (i2t, t2i) = evaluate_split(&state, &records, &split)?;
                let k_dir = run_dir.join(format!("k{k}"));
                write_eval_outputs(&k_dir, &i2t)?;
                write_eval_outputs(&k_dir, &t2i)?;
                println!(
                    "{variant} seed={seed} k={k}: I2T {:.4} T2I {:.4} Avg {:.4}",
                    i2t.map,
                    t2i.map,
                    eval::average_map(&i2t, &t2i)
                );
            }
        }
    }

    write_manifest(
        &args.out,
        &Manifest {
            command: "ablate",
            crate_version: env!("CARGO_PKG_VERSION"),
            dataset: Some(args.dataset.display().to_string()),
            dataset_sha256: Some(file_sha256(&args.dataset)?),
            settings: Some(&settings),
            seeds: seeds.clone(),
            k_values: ks.clone(),
            outputs: vec!["report.csv".to_string()],
        },
    )?;
    let table = build_report(&args.out)?;
    fs::write(args.out.join("report.csv"), table.to_csv())?;
    print!("{}", table.render());
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let table = build_report(&args.run)?;
    fs::write(args.run.join("report.csv"), table.to_csv())?;
    print!("{}", table.render());
    Ok(())
}

// --- report aggregation ---

#[derive(Debug)]
struct EvalRow {
    variant: String,
    k: usize,
    seed: u64,
    direction: Direction,
    map: f64,
}

#[derive(Debug, Default)]
pub(crate) struct ReportTable {
    rows: Vec<ReportRow>,
    incomplete: Vec<String>,
}

#[derive(Debug)]
struct ReportRow {
    variant: String,
    k: usize,
    seeds: usize,
    i2t: (f64, f64),
    t2i: (f64, f64),
    avg: (f64, f64),
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl ReportTable {
    pub(crate) fn to_csv(&self) -> String {
        let mut out = String::from(
            "variant,k,seeds,i2t_mean,i2t_std,t2i_mean,t2i_std,avg_mean,avg_std\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.variant, r.k, r.seeds, r.i2t.0, r.i2t.1, r.t2i.0, r.t2i.1, r.avg.0, r.avg.1
            ));
        }
        for missing in &self.incomplete {
            out.push_str(&format!("# incomplete: {missing}\n"));
        }
        out
    }

    pub(crate) fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<8} {:>2} {:>5}  {:<16} {:<16} {:<16}\n",
            "variant", "k", "seeds", "I2T", "T2I", "Avg"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<8} {:>2} {:>5}  {:<16} {:<16} {:<16}\n",
                r.variant,
                r.k,
                r.seeds,
                format!("{:.3} ± {:.3}", r.i2t.0, r.i2t.1),
                format!("{:.3} ± {:.3}", r.t2i.0, r.t2i.1),
                format!("{:.3} ± {:.3}", r.avg.0, r.avg.1),
            ));
        }
        for missing in &self.incomplete {
            out.push_str(&format!("incomplete: {missing}\n"));
        }
        out
    }
}

fn collect_eval_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_eval_files(&path, out)?;
        } else if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
            if name.starts_with("eval_") && name.ends_with(".json") {
                out.push(path);
            }
        }
    }
    Ok(())
}

fn collect_checkpoint_dirs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_checkpoint_dirs(&path, out)?;
        } else if path.file_name().and_then(|n| n.to_str()) == Some("checkpoint.gckp") {
            out.push(dir.to_path_buf());
        }
    }
    Ok(())
}

/// The ablation variant implied by a run's configuration.
fn variant_of(config: &TrainConfig) -> &'static str {
    if config.disable_gmm {
        "no-gmm"
    } else if config.lambda == 0.0 {
        "no-rdp"
    } else {
        "full"
    }
}

pub(crate) fn build_report(run_dir: &Path) -> Result<ReportTable> {
    let mut files = Vec::new();
    collect_eval_files(run_dir, &mut files)?;
    files.sort();

    let mut rows = Vec::new();
    for path in &files {
        let report: EvalReport = serde_json::from_str(&fs::read_to_string(path)?)?;
        rows.push(EvalRow {
            variant: variant_of(&report.config).to_string(),
            k: report.k,
            seed: report.seed,
            direction: report.direction,
            map: report.map,
        });
    }

    // Runs that trained but never evaluated are reported, not skipped.
    let mut incomplete = Vec::new();
    let mut checkpoint_dirs = Vec::new();
    collect_checkpoint_dirs(run_dir, &mut checkpoint_dirs)?;
    checkpoint_dirs.sort();
    for dir in checkpoint_dirs {
        let mut evals = Vec::new();
        collect_eval_files(&dir, &mut evals)?;
        if evals.is_empty() {
            incomplete.push(dir.display().to_string());
        }
    }

    let mut groups: BTreeMap<(String, usize), Vec<&EvalRow>> = BTreeMap::new();
    for row in &rows {
        groups
            .entry((row.variant.clone(), row.k))
            .or_default()
            .push(row);
    }
    let mut table_rows = Vec::new();
    for ((variant, k), group) in groups {
        let mut per_seed: BTreeMap<u64, (Option<f64>, Option<f64>)> = BTreeMap::new();
        for row in group {
            let entry = per_seed.entry(row.seed).or_default();
            match row.direction {
                Direction::ImageToText => entry.0 = Some(row.map),
                Direction::TextToImage => entry.1 = Some(row.map),
            }
        }
        let mut i2t = Vec::new();
        let mut t2i = Vec::new();
        let mut avg = Vec::new();
        for (seed, (i, t)) in &per_seed {
            match (i, t) {
                (Some(i), Some(t)) => {
                    i2t.push(*i);
                    t2i.push(*t);
                    avg.push((i + t) / 2.0);
                }
                _ => incomplete.push(format!("{variant} k={k} seed={seed}: one direction missing")),
            }
        }
        if i2t.is_empty() {
            continue;
        }
        table_rows.push(ReportRow {
            variant,
            k,
            seeds: i2t.len(),
            i2t: mean_std(&i2t),
            t2i: mean_std(&t2i),
            avg: mean_std(&avg),
        });
    }
    Ok(ReportTable {
        rows: table_rows,
        incomplete,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists_accept_ranges_and_commas() {
        assert_eq!(parse_seed_list("1..5").unwrap(), vec![1, 2, 3, 4, 5]);
        assert_eq!(parse_seed_list("7").unwrap(), vec![7]);
        assert_eq!(parse_seed_list("3,1,3").unwrap(), vec![1, 3]);
        assert!(parse_seed_list("5..1").is_err());
        assert!(parse_seed_list("x").is_err());
    }

    #[test]
    fn k_lists_parse_and_dedupe() {
        assert_eq!(parse_k_list("0,1,3,5").unwrap(), vec![0, 1, 3, 5]);
        assert_eq!(parse_k_list("3,0,3").unwrap(), vec![0, 3]);
        assert!(parse_k_list("0,x").is_err());
    }

    #[test]
    fn config_file_merges_under_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# comment\ntau = 0.25\nbatch = 6\nlambda = 2.0\n").unwrap();
        let hyper = HyperArgs {
            config: Some(path),
            dim: None,
            components_image: None,
            components_text: None,
            tau: None,
            alpha: None,
            lambda: Some(3.0),
            theta: None,
            lr: None,
            batch: None,
            stage1_epochs: None,
            stage2_epochs: None,
            finetune_epochs: None,
            disable_gmm: false,
            disable_rdp: false,
            source_fraction: None,
            print_config: false,
        };
        let settings = resolve(&hyper, Some(9)).unwrap();
        assert_eq!(settings.train.temperature, 0.25); // from file
        assert_eq!(settings.train.batch_size, 6); // from file
        assert_eq!(settings.train.lambda, 3.0); // flag wins
        assert_eq!(settings.train.seed, 9);
    }

    #[test]
    fn unknown_config_keys_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cfg");
        fs::write(&path, "taux = 0.25\n").unwrap();
        let hyper = HyperArgs {
            config: Some(path),
            dim: None,
            components_image: None,
            components_text: None,
            tau: None,
            alpha: None,
            lambda: None,
            theta: None,
            lr: None,
            batch: None,
            stage1_epochs: None,
            stage2_epochs: None,
            finetune_epochs: None,
            disable_gmm: false,
            disable_rdp: false,
            source_fraction: None,
            print_config: false,
        };
        assert!(matches!(
            resolve(&hyper, None),
            Err(Error::Usage { .. })
        ));
    }

    #[test]
    fn disable_rdp_zeroes_lambda() {
        let hyper = HyperArgs {
            config: None,
            dim: None,
            components_image: None,
            components_text: None,
            tau: None,
            alpha: None,
            lambda: Some(5.0),
            theta: None,
            lr: None,
            batch: None,
            stage1_epochs: None,
            stage2_epochs: None,
            finetune_epochs: None,
            disable_gmm: false,
            disable_rdp: true,
            source_fraction: None,
            print_config: false,
        };
        let settings = resolve(&hyper, None).unwrap();
        assert_eq!(settings.train.lambda, 0.0);
        assert!(settings.disable_rdp);
    }

    #[test]
    fn variants_map_back_from_configs() {
        let base = TrainConfig::default();
        assert_eq!(variant_of(&variant_config(&base, "full", 1)), "full");
        assert_eq!(variant_of(&variant_config(&base, "no-gmm", 1)), "no-gmm");
        assert_eq!(variant_of(&variant_config(&base, "no-rdp", 1)), "no-rdp");
    }

    #[test]
    fn mean_std_of_singletons_and_pairs() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (mean, std) = mean_std(&[1.0, 3.0]);
        assert_eq!(mean, 2.0);
        assert!((std - 2.0f64.sqrt()).abs() < 1e-12);
    }
}
