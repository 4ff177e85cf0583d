//! Command-line front end: dataset generation, training, tokenization and
//! metrics, each leaving a manifest next to its artifacts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_synthetic, load_dataset, save_dataset, DataFormat, Dataset, InputDims, SyntheticConfig};
use crate::error::{Error, Result};
use crate::metrics::{quant_report, tokenize, write_sid_jsonl};
use crate::model::{load_checkpoint, save_checkpoint, MixQuantModel};
use crate::train::{history_csv, train, TrainConfig};

/// File name of the manifest written into every output directory.
pub const MANIFEST_NAME: &str = "manifest.json";
pub const CHECKPOINT_NAME: &str = "checkpoint.bin";
pub const HISTORY_NAME: &str = "history.csv";

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_MISMATCH: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "mixquant", version, about = "Mixture-of-quantization item tokenizer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with Zipf-skewed behavior norms.
    GenData(GenDataArgs),
    /// Train a tokenizer and write its checkpoint and loss history.
    Train(TrainArgs),
    /// Emit one Semantic-ID line per item.
    Tokenize(TokenizeArgs),
    /// Print reconstruction, entropy and utilization as JSON.
    Metrics(MetricsArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub items: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub clusters: u64,
    #[arg(long, value_parser = positive_f64)]
    pub zipf: f64,
    /// `t,v,b` or a single width shared by all three modalities.
    #[arg(long, default_value = "32,32,32")]
    pub dims: InputDims,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "jsonl")]
    pub format: DataFormat,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoint, history and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `epochs` from the config file.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TokenizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Behavior positions with router weight at or below this are PAD.
    #[arg(long, default_value_t = 0.0, value_parser = finite_f64)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0, value_parser = finite_f64)]
    pub threshold: f64,
}

fn positive_f64(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(format!("expected a positive finite number, got {s}"))
    }
}

fn finite_f64(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("expected a finite number, got {s}"))
    }
}

/// Inputs and outputs of one command invocation. Contains nothing that
/// varies between reruns with identical inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    /// Hex SHA-256 of the dataset file's bytes.
    pub dataset_sha256: String,
    pub seed: u64,
    /// Artifact role to path, as given on the command line.
    pub artifacts: Vec<(String, PathBuf)>,
}

impl RunManifest {
    fn new(command: &str, config: serde_json::Value, dataset_sha256: String, seed: u64) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            dataset_sha256,
            seed,
            artifacts: Vec::new(),
        }
    }

    fn artifact(mut self, role: &str, path: &Path) -> Self {
        self.artifacts.push((role.to_string(), path.to_path_buf()));
        self
    }

    /// Writes `manifest.json` into `dir`, replacing any earlier one.
    pub fn write_into(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_NAME);
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(&path, json).map_err(|e| Error::file(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Process exit code for a failed command.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NonFinite(_) => EXIT_NUMERIC,
        Error::Mismatch(_) | Error::Format(_) => EXIT_MISMATCH,
        // Shape faults are internal bugs, not bad input.
        Error::Shape { .. } => 1,
        _ => EXIT_USAGE,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => gen_data(&args),
        Command::Train(args) => train_cmd(&args),
        Command::Tokenize(args) => tokenize_cmd(&args),
        Command::Metrics(args) => metrics_cmd(&args),
    }
}

/// Directory a file argument lives in; `.` for bare file names.
fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))
}

fn load_data(path: &Path) -> Result<(Dataset<f64>, String)> {
    let format = DataFormat::detect(path)?;
    let dataset = load_dataset(path, format)?;
    Ok((dataset, file_sha256(path)?))
}

fn load_model_for(checkpoint: &Path, dataset: &Dataset<f64>) -> Result<(MixQuantModel<f64>, u64)> {
    let (model, header) = load_checkpoint::<f64>(checkpoint)?;
    if model.config().dims != dataset.dims() {
        return Err(Error::Mismatch(format!(
            "checkpoint expects input dims {:?}, dataset has {:?}",
            model.config().dims,
            dataset.dims()
        )));
    }
    Ok((model, header.seed))
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let cfg = SyntheticConfig::new(args.items as usize, args.dims, args.clusters as usize, args.zipf, args.seed);
    let data = generate_synthetic::<f64>(&cfg)?;
    let dir = parent_dir(&args.out);
    create_dir(&dir)?;
    save_dataset(&data.dataset, &args.out, args.format)?;
    let config = serde_json::json!({ "synthetic": cfg, "format": args.format });
    RunManifest::new("gen-data", config, file_sha256(&args.out)?, args.seed)
        .artifact("dataset", &args.out)
        .write_into(&dir)?;
    log::info!("wrote {} items to {}", data.dataset.len(), args.out.display());
    Ok(())
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::load(&args.config)?;
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    let (dataset, digest) = load_data(&args.data)?;
    let (model, history) = train(&dataset, &cfg)?;

    create_dir(&args.out)?;
    let config = serde_json::to_value(&cfg)?;
    let checkpoint = args.out.join(CHECKPOINT_NAME);
    save_checkpoint(&model, cfg.seed, config.clone(), &checkpoint)?;
    let history_path = args.out.join(HISTORY_NAME);
    fs::write(&history_path, history_csv(&history)).map_err(|e| Error::file(&history_path, e))?;
    RunManifest::new("train", config, digest, cfg.seed)
        .artifact("data", &args.data)
        .artifact("checkpoint", &checkpoint)
        .artifact("history", &history_path)
        .write_into(&args.out)?;
    log::info!("trained {} epochs; checkpoint at {}", history.len(), checkpoint.display());
    Ok(())
}

fn tokenize_cmd(args: &TokenizeArgs) -> Result<()> {
    let (dataset, digest) = load_data(&args.data)?;
    let (model, seed) = load_model_for(&args.checkpoint, &dataset)?;
    let sids = tokenize(&model, dataset.items(), args.threshold)?;

    let dir = parent_dir(&args.out);
    create_dir(&dir)?;
    let file = fs::File::create(&args.out).map_err(|e| Error::file(&args.out, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_sid_jsonl(&sids, &mut w)?;
    w.flush()?;
    RunManifest::new("tokenize", serde_json::json!({ "threshold": args.threshold }), digest, seed)
        .artifact("checkpoint", &args.checkpoint)
        .artifact("data", &args.data)
        .artifact("sids", &args.out)
        .write_into(&dir)?;
    Ok(())
}

fn metrics_cmd(args: &MetricsArgs) -> Result<()> {
    let (dataset, digest) = load_data(&args.data)?;
    let (model, seed) = load_model_for(&args.checkpoint, &dataset)?;
    let report = quant_report(&model, &dataset, args.threshold)?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    match &args.out {
        None => {
            std::io::stdout().write_all(json.as_bytes())?;
        }
        Some(out) => {
            let dir = parent_dir(out);
            create_dir(&dir)?;
            fs::write(out, json).map_err(|e| Error::file(out, e))?;
            RunManifest::new("metrics", serde_json::json!({ "threshold": args.threshold }), digest, seed)
                .artifact("checkpoint", &args.checkpoint)
                .artifact("data", &args.data)
                .artifact("report", out)
                .write_into(&dir)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::NonFinite("recon".into())), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::Mismatch("dims".into())), EXIT_MISMATCH);
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        let missing = Error::file("nope", std::io::Error::from(std::io::ErrorKind::NotFound));
        assert_eq!(exit_code(&missing), EXIT_USAGE);
    }

    #[test]
    fn flag_validation() {
        let parse = |args: &[&str]| Cli::try_parse_from(std::iter::once("mixquant").chain(args.iter().copied()));
        assert!(parse(&["gen-data", "--items", "0", "--clusters", "1", "--zipf", "1", "--out", "x"]).is_err());
        assert!(parse(&["gen-data", "--items", "5", "--clusters", "1", "--zipf", "0", "--out", "x"]).is_err());
        assert!(parse(&["gen-data", "--items", "5", "--clusters", "1", "--zipf", "1", "--out", "x", "--format", "csv"]).is_err());
        assert!(parse(&["gen-data", "--items", "5", "--clusters", "1", "--zipf", "1", "--out", "x"]).is_ok());
        assert!(parse(&["tokenize", "--checkpoint", "c", "--data", "d", "--out", "o", "--threshold", "nan"]).is_err());
    }

    #[test]
    fn parent_of_bare_file_is_cwd() {
        assert_eq!(parent_dir(Path::new("data.jsonl")), PathBuf::from("."));
        assert_eq!(parent_dir(Path::new("a/b.jsonl")), PathBuf::from("a"));
    }
}
