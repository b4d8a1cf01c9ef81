//! Command-line front end: `train`, `score`, `eval`, `ablate` and `synth`.
//!
//! Settings come from an optional JSON file (`--config`) and are overridden
//! by flags. The resolved configuration is written to
//! `<out>/resolved_config.json` before anything else happens.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::datasets::{
    normalize, one_class_split, pad_to, read_cifar10, read_idx, read_image_dir, synth_generate,
    write_idx, write_image_dir, LabeledImages, NormalizeMode, OneClassSplit, Polarity, SynthSpec,
};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_csv, latent_csv, latent_projection, records_auc, records_roc, roc_csv, run_ablation,
    score_split, scores_csv, AblationVariant, ScoreKind,
};
use crate::losses::{LossWeights, RankBudget};
use crate::networks::{build_networks, read_checkpoint_precision};
use crate::tensor::{Precision, Scalar};
use crate::trainer::{load_checkpoint, save_checkpoint, train_with, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Shape { .. } => EXIT_CONFIG,
        Error::Parse { .. } | Error::Io { .. } | Error::Checkpoint { .. } => EXIT_DATA,
        Error::Numerical(_) | Error::NonFiniteLoss { .. } => EXIT_NUMERICAL,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Train,
    Score,
    Eval,
    Ablate,
    Synth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "lower")]
pub enum DataKind {
    Mnist,
    Cifar10,
    Dir,
    #[default]
    Synth,
}

impl DataKind {
    /// Number of classes when fixed by the format.
    fn class_count(self) -> Option<u32> {
        match self {
            DataKind::Mnist | DataKind::Cifar10 => Some(10),
            DataKind::Synth => Some(2),
            DataKind::Dir => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SynthFormat {
    #[default]
    Idx,
    Dir,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub dir: Option<PathBuf>,
    pub channels: usize,
    pub image_size: usize,
    pub normalize: NormalizeMode,
    pub synth: SynthSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Synth,
            images: None,
            labels: None,
            dir: None,
            channels: 1,
            image_size: 32,
            normalize: NormalizeMode::TanhRange,
            synth: SynthSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub held_class: u32,
    pub polarity: Polarity,
    pub train_fraction: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            held_class: 1,
            polarity: Polarity::ClassIsAnomaly,
            train_fraction: 2000.0 / 2200.0,
        }
    }
}

/// Everything a run needs, after merging the config file and the flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub command: Command,
    pub data: DataConfig,
    pub protocol: ProtocolConfig,
    pub train: TrainConfig,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub deterministic: bool,
    pub threads: usize,
    pub variants: Vec<AblationVariant>,
    pub synth_format: SynthFormat,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: Command::Train,
            data: DataConfig::default(),
            protocol: ProtocolConfig::default(),
            train: TrainConfig::default(),
            out: PathBuf::from("runs/default"),
            checkpoint: None,
            deterministic: false,
            threads: 1,
            variants: AblationVariant::ALL.to_vec(),
            synth_format: SynthFormat::Idx,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lrad", version, about = "Adversarial anomaly detection with a low-rank latent penalty")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Train on the normal samples of a one-class split and save a checkpoint.
    Train(RunArgs),
    /// Score the test split with a checkpoint and write scores.csv.
    Score(RunArgs),
    /// Score, compute ROC and AUC, and export the 3-D latent projection.
    Eval(RunArgs),
    /// Train every loss variant from the same seed and compare AUCs.
    Ablate(RunArgs),
    /// Write the synthetic disk-versus-stripes dataset to disk.
    Synth(RunArgs),
}

#[derive(Debug, Args, Default, Clone)]
pub struct RunArgs {
    /// JSON file with run settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub data: Option<DataKind>,
    /// IDX image file.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// IDX label file.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// CIFAR-10 batch directory or image directory.
    #[arg(long)]
    pub dir: Option<PathBuf>,
    #[arg(long)]
    pub held_class: Option<u32>,
    #[arg(long, value_parser = parse_polarity)]
    pub polarity: Option<Polarity>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub base_width: Option<usize>,
    /// Target latent rank r.
    #[arg(long)]
    pub rank: Option<usize>,
    /// Loss weights wi,wa,wz,wr.
    #[arg(long, value_parser = parse_weights)]
    pub weights: Option<LossWeights>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_precision)]
    pub precision: Option<Precision>,
    /// Channels and side length for image directories.
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub zscore: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Epochs between intermediate checkpoints (0 = none).
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    /// Single-threaded, bitwise reproducible execution.
    #[arg(long)]
    pub deterministic: bool,
    /// Ablation variants, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
    pub variants: Option<Vec<AblationVariant>>,
    /// Output format of `synth`.
    #[arg(long, value_enum)]
    pub format: Option<SynthFormat>,
}

fn parse_polarity(s: &str) -> std::result::Result<Polarity, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_weights(s: &str) -> std::result::Result<LossWeights, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_variant(s: &str) -> std::result::Result<AblationVariant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn read_config_file(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))
}

/// Reads `LRAD_THREADS`; `None` when unset.
fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("LRAD_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| Error::Config(format!("LRAD_THREADS={v:?} is not a positive integer"))),
        Err(_) => Ok(None),
    }
}

/// Merges the config file, flags and environment, then validates.
pub fn parse_and_validate(command: Command, args: &RunArgs) -> Result<RunConfig> {
    let mut c = match &args.config {
        Some(p) => read_config_file(p)?,
        None => RunConfig::default(),
    };
    c.command = command;
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag.clone() {
                $field = v;
            }
        };
    }
    set!(args.data, c.data.kind);
    if args.images.is_some() {
        c.data.images = args.images.clone();
    }
    if args.labels.is_some() {
        c.data.labels = args.labels.clone();
    }
    if args.dir.is_some() {
        c.data.dir = args.dir.clone();
    }
    set!(args.channels, c.data.channels);
    set!(args.image_size, c.data.image_size);
    if args.zscore {
        c.data.normalize = NormalizeMode::ZScore;
    }
    set!(args.held_class, c.protocol.held_class);
    set!(args.polarity, c.protocol.polarity);
    set!(args.train_fraction, c.protocol.train_fraction);
    set!(args.epochs, c.train.epochs);
    set!(args.batch, c.train.batch_size);
    set!(args.lr, c.train.lr);
    set!(args.latent_dim, c.train.latent_dim);
    set!(args.base_width, c.train.base_width);
    if let Some(r) = args.rank {
        c.train.rank = RankBudget(r);
    }
    set!(args.weights, c.train.weights);
    set!(args.seed, c.train.seed);
    set!(args.precision, c.train.precision);
    set!(args.checkpoint_interval, c.train.checkpoint_interval);
    set!(args.out, c.out);
    if args.checkpoint.is_some() {
        c.checkpoint = args.checkpoint.clone();
    }
    c.deterministic |= args.deterministic;
    set!(args.variants, c.variants);
    set!(args.format, c.synth_format);
    if let Some(t) = threads_from_env()? {
        c.threads = t;
    }
    if c.deterministic {
        c.threads = 1;
    }
    validate(&c)?;
    Ok(c)
}

fn require_path(p: &Option<PathBuf>, flag: &str, kind: &str) -> Result<()> {
    match p {
        None => Err(Error::Config(format!("--data {kind} needs {flag}"))),
        Some(p) if !p.exists() => Err(Error::Config(format!("{flag} {} does not exist", p.display()))),
        Some(_) => Ok(()),
    }
}

pub fn validate(c: &RunConfig) -> Result<()> {
    if c.command != Command::Synth {
        match c.data.kind {
            DataKind::Mnist => {
                require_path(&c.data.images, "--images", "mnist")?;
                require_path(&c.data.labels, "--labels", "mnist")?;
            }
            DataKind::Cifar10 => require_path(&c.data.dir, "--dir", "cifar10")?,
            DataKind::Dir => require_path(&c.data.dir, "--dir", "dir")?,
            DataKind::Synth => c.data.synth.validate().map_err(|e| Error::Config(e.to_string()))?,
        }
        if let Some(n) = c.data.kind.class_count() {
            if c.protocol.held_class >= n {
                return Err(Error::Config(format!(
                    "--held-class {} is out of range for {:?}, which has classes 0..{}",
                    c.protocol.held_class,
                    c.data.kind,
                    n - 1
                )));
            }
        }
        if !(c.protocol.train_fraction > 0.0 && c.protocol.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "--train-fraction {} must lie strictly between 0 and 1",
                c.protocol.train_fraction
            )));
        }
        c.train.validate()?;
    } else {
        c.data.synth.validate().map_err(|e| Error::Config(e.to_string()))?;
    }
    if c.command == Command::Score && c.checkpoint.is_none() {
        return Err(Error::Config("score needs --checkpoint".into()));
    }
    if let Some(p) = &c.checkpoint {
        if matches!(c.command, Command::Score | Command::Eval) && !p.exists() {
            return Err(Error::Config(format!("--checkpoint {} does not exist", p.display())));
        }
    }
    if c.command == Command::Ablate && c.variants.is_empty() {
        return Err(Error::Config("--variants must name at least one variant".into()));
    }
    std::fs::create_dir_all(&c.out)
        .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", c.out.display())))
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    std::fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
    Ok(p)
}

/// Loads and normalises the configured dataset.
pub fn load_data(c: &DataConfig) -> Result<LabeledImages<f32>> {
    let data = match c.kind {
        DataKind::Mnist => {
            let d = read_idx(c.images.as_deref().unwrap(), c.labels.as_deref().unwrap())?;
            let (_, h, w) = d.image_dims();
            if h < 32 && w < 32 {
                // Byte value 0, i.e. the background of the digits.
                pad_to(&d, 32, -1.0)?
            } else {
                d
            }
        }
        DataKind::Cifar10 => read_cifar10(c.dir.as_deref().unwrap())?,
        DataKind::Dir => read_image_dir(c.dir.as_deref().unwrap(), c.channels, c.image_size)?,
        DataKind::Synth => synth_generate(&c.synth)?,
    };
    normalize(&data, c.normalize)
}

fn load_split(c: &RunConfig) -> Result<OneClassSplit<f32>> {
    let data = load_data(&c.data)?;
    one_class_split(
        &data,
        c.protocol.held_class,
        c.protocol.polarity,
        c.protocol.train_fraction,
        c.train.seed,
    )
}

fn default_checkpoint(c: &RunConfig) -> PathBuf {
    c.checkpoint.clone().unwrap_or_else(|| c.out.join("model.lrad"))
}

fn cmd_train<T: Scalar>(c: &RunConfig) -> Result<()> {
    let split = load_split(c)?;
    let ckpt = default_checkpoint(c);
    let interval = c.train.checkpoint_interval;
    let (state, history) = train_with::<T>(&c.train, &split.train_normals, |epoch, st, h| {
        if interval > 0 && (epoch + 1) % interval == 0 {
            save_checkpoint(st, h, &c.out.join(format!("epoch_{:04}.lrad", epoch + 1)))?;
        }
        Ok(())
    })?;
    save_checkpoint(&state, &history, &ckpt)?;
    write_out(&c.out, "history.csv", &history.to_csv())?;
    println!("checkpoint written to {}", ckpt.display());
    Ok(())
}

fn model_for<T: Scalar>(c: &RunConfig, split: &OneClassSplit<f32>) -> Result<crate::networks::NetworkState<T>> {
    match &c.checkpoint {
        Some(p) => Ok(load_checkpoint::<T>(p)?.0),
        None => {
            log::warn!("no --checkpoint given; evaluating a freshly initialised model");
            let (ch, h, _) = split.test.image_dims();
            build_networks(&c.train.network_spec(ch, h), c.train.seed)
        }
    }
}

fn cmd_score<T: Scalar>(c: &RunConfig) -> Result<()> {
    let split = load_split(c)?;
    let model = model_for::<T>(c, &split)?;
    let records = score_split(&model, &split)?;
    let p = write_out(&c.out, "scores.csv", &scores_csv(&records))?;
    println!("scores written to {}", p.display());
    Ok(())
}

fn cmd_eval<T: Scalar>(c: &RunConfig) -> Result<()> {
    let split = load_split(c)?;
    let model = model_for::<T>(c, &split)?;
    let records = score_split(&model, &split)?;
    write_out(&c.out, "scores.csv", &scores_csv(&records))?;
    let roc = records_roc(&records, ScoreKind::Latent)?;
    write_out(&c.out, "roc.csv", &roc_csv(&roc))?;
    let pixel_auc = records_auc(&records, ScoreKind::Pixel)?;
    write_out(
        &c.out,
        "metrics.csv",
        &format!("metric,value\nauc_latent,{}\nauc_pixel,{}\n", roc.auc, pixel_auc),
    )?;
    let k = 3.min(c.train.latent_dim).min(split.test.len());
    let coords = latent_projection(&model, &split.test.images.cast::<T>(), k)?;
    write_out(
        &c.out,
        "latent3d.csv",
        &latent_csv(&split.test.ids, &split.test_anomaly_flags, &coords),
    )?;
    println!("auc_latent {}", roc.auc);
    println!("auc_pixel {pixel_auc}");
    Ok(())
}

fn cmd_ablate<T: Scalar>(c: &RunConfig) -> Result<()> {
    let split = load_split(c)?;
    let rows = run_ablation::<T>(&c.train, &split, &c.variants)?;
    write_out(&c.out, "ablation.csv", &ablation_csv(&rows))?;
    for r in &rows {
        println!("{} {}", r.variant.name(), r.auc);
    }
    Ok(())
}

fn cmd_synth(c: &RunConfig) -> Result<()> {
    let data = synth_generate(&c.data.synth)?;
    match c.synth_format {
        SynthFormat::Idx => {
            write_idx(&data, &c.out.join("images.idx"), &c.out.join("labels.idx"))?;
            println!("wrote {} samples to {}/{{images,labels}}.idx", data.len(), c.out.display());
        }
        SynthFormat::Dir => {
            write_image_dir(&data, &c.out.join("images"))?;
            println!("wrote {} samples under {}/images", data.len(), c.out.display());
        }
    }
    Ok(())
}

fn dispatch<T: Scalar>(c: &RunConfig) -> Result<()> {
    match c.command {
        Command::Train => cmd_train::<T>(c),
        Command::Score => cmd_score::<T>(c),
        Command::Eval => cmd_eval::<T>(c),
        Command::Ablate => cmd_ablate::<T>(c),
        Command::Synth => cmd_synth(c),
    }
}

/// Runs a validated configuration.
pub fn execute(c: &RunConfig) -> Result<()> {
    let resolved = serde_json::to_string_pretty(c).map_err(|e| Error::Config(e.to_string()))?;
    write_out(&c.out, "resolved_config.json", &(resolved + "\n"))?;
    log::info!("running {:?} with {} worker thread(s)", c.command, c.threads);
    let precision = match (&c.checkpoint, c.command) {
        (Some(p), Command::Score | Command::Eval) => read_checkpoint_precision(p)?,
        _ => c.train.precision,
    };
    match precision {
        Precision::F32 => dispatch::<f32>(c),
        Precision::F64 => dispatch::<f64>(c),
    }
}

/// Parses `argv`, runs, and returns the process exit status. Errors are
/// printed on standard error as one line.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let (command, args) = match cli.command {
        CliCommand::Train(a) => (Command::Train, a),
        CliCommand::Score(a) => (Command::Score, a),
        CliCommand::Eval(a) => (Command::Eval, a),
        CliCommand::Ablate(a) => (Command::Ablate, a),
        CliCommand::Synth(a) => (Command::Synth, a),
    };
    match parse_and_validate(command, &args).and_then(|c| execute(&c)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
