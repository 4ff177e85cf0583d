use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mixquant::cli::{file_sha256, RunManifest, MANIFEST_NAME};
use mixquant::data::{generate_synthetic, load_dataset, DataFormat, InputDims, SyntheticConfig};
use mixquant::metrics::{quant_report, QuantReport, SemanticIds};
use mixquant::model::load_checkpoint;
use tempfile::TempDir;

/// Checkpoint of the reference config trained on the reference dataset,
/// recorded on the first run.
const REFERENCE_CHECKPOINT_SHA256: &str = "1959e135dfc9a895a92102d933b7a7bc2ba8cafc52b6a00feee1713d12c08b2a";

fn mixquant(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixquant"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = mixquant(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small dataset and a model trained on it for two epochs.
struct Fixture {
    dir: TempDir,
    data: PathBuf,
    checkpoint: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data/items.jsonl");
    ok(&["gen-data", "--items", "120", "--clusters", "4", "--zipf", "1.1", "--dims", "8,6,10", "--seed", "3", "--out", s(&data)]);
    let config = dir.path().join("config.json");
    fs::write(&config, r#"{"epochs": 2, "batch_size": 32, "codebook_size": 8, "latent_dim": 6, "seed": 3}"#).unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&run)]);
    Fixture {
        checkpoint: run.join("checkpoint.bin"),
        dir,
        data,
    }
}

fn read_sids(path: &Path) -> Vec<SemanticIds> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn gen_data_is_deterministic_and_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    for (name, format) in [("a.jsonl", "jsonl"), ("b.jsonl", "jsonl"), ("c.bin", "packed")] {
        let out = dir.path().join(name);
        ok(&["gen-data", "--items", "100", "--clusters", "5", "--zipf", "1.1", "--seed", "7", "--out", s(&out), "--format", format]);
    }
    let bytes = |n: &str| fs::read(dir.path().join(n)).unwrap();
    assert_eq!(bytes("a.jsonl"), bytes("b.jsonl"));

    let want = generate_synthetic::<f64>(&SyntheticConfig::new(100, InputDims::new(32, 32, 32), 5, 1.1, 7)).unwrap();
    let jsonl = load_dataset::<f64>(&dir.path().join("a.jsonl"), DataFormat::Jsonl).unwrap();
    assert_eq!(jsonl.norm_stats(), want.dataset.norm_stats());
    // The packed format stores f32, so its stats agree to f32 precision.
    let packed = load_dataset::<f64>(&dir.path().join("c.bin"), DataFormat::Packed).unwrap();
    assert!((packed.norm_stats().max - want.dataset.norm_stats().max).abs() < 1e-5);

    let manifest = RunManifest::load(&dir.path().join(MANIFEST_NAME)).unwrap();
    assert_eq!(manifest.command, "gen-data");
    assert_eq!(manifest.seed, 7);
    assert_eq!(manifest.dataset_sha256, file_sha256(&dir.path().join("c.bin")).unwrap());
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.jsonl");
    let r = mixquant(&["gen-data", "--items", "0", "--clusters", "1", "--zipf", "1.1", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    // More clusters than items.
    let r = mixquant(&["gen-data", "--items", "3", "--clusters", "5", "--zipf", "1.1", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    let missing = dir.path().join("missing.json");
    let r = mixquant(&["train", "--config", s(&missing), "--data", s(&out), "--out", s(dir.path())]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("missing.json"));
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"epochs": 1, "learnig_rate": 0.1}"#).unwrap();
    ok(&["gen-data", "--items", "10", "--clusters", "1", "--zipf", "1.1", "--dims", "4", "--out", s(&out)]);
    let r = mixquant(&["train", "--config", s(&bad), "--data", s(&out), "--out", s(dir.path())]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn numeric_blow_up_exits_3_naming_the_component() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    ok(&["gen-data", "--items", "64", "--clusters", "2", "--zipf", "1.1", "--dims", "4", "--out", s(&data)]);
    let config = dir.path().join("c.json");
    fs::write(&config, r#"{"epochs": 3, "learning_rate": 1e308, "codebook_size": 4, "batch_size": 16}"#).unwrap();
    let r = mixquant(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&dir.path().join("run"))]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("non-finite value produced by"));
}

#[test]
fn zero_epoch_override_gives_empty_history() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    ok(&["gen-data", "--items", "40", "--clusters", "2", "--zipf", "1.1", "--dims", "4", "--out", s(&data)]);
    let config = dir.path().join("c.json");
    fs::write(&config, r#"{"epochs": 5, "codebook_size": 4}"#).unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&run), "--epochs", "0"]);
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1);
    assert!(history.starts_with("epoch,"));
    let (_, header) = load_checkpoint::<f64>(&run.join("checkpoint.bin")).unwrap();
    assert_eq!(header.hyperparams["epochs"], 0);
    let manifest = RunManifest::load(&run.join(MANIFEST_NAME)).unwrap();
    assert_eq!(manifest.dataset_sha256, file_sha256(&data).unwrap());
    assert_eq!(manifest.config["epochs"], 0);
}

#[test]
fn reference_run_matches_recorded_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("ref.jsonl");
    ok(&["gen-data", "--items", "2000", "--clusters", "5", "--zipf", "1.1", "--dims", "32", "--seed", "7", "--out", s(&data)]);
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.json");
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&run)]);
    assert_eq!(file_sha256(&run.join("checkpoint.bin")).unwrap(), REFERENCE_CHECKPOINT_SHA256);
}

#[test]
fn tokenize_outputs_and_threshold_sweep() {
    let fx = fixture();
    let n_items = 120;
    let mut previous: Option<Vec<usize>> = None;
    for (i, threshold) in ["0", "0.01", "0.1", "0.5", "2", "1e9"].iter().enumerate() {
        let out = fx.dir.path().join(format!("tok/{i}.jsonl"));
        ok(&["tokenize", "--checkpoint", s(&fx.checkpoint), "--data", s(&fx.data), "--out", s(&out), "--threshold", threshold]);
        let sids = read_sids(&out);
        assert_eq!(sids.len(), n_items);
        assert_eq!(sids[0].item_id, "item-000000");
        let pads: Vec<usize> = sids.iter().map(|s| s.codes.iter().filter(|&&c| c == 8).count()).collect();
        if let Some(prev) = &previous {
            assert!(pads.iter().zip(prev).all(|(now, before)| now >= before), "PAD count fell at threshold {threshold}");
        }
        previous = Some(pads);
    }
    // Threshold 1e9 silences every behavior position.
    let sids = read_sids(&fx.dir.path().join("tok/5.jsonl"));
    assert!(sids.iter().all(|s| s.active_behavior == 0 && s.codes[6..].iter().all(|&c| c == 8)));
    let manifest = RunManifest::load(&fx.dir.path().join("tok").join(MANIFEST_NAME)).unwrap();
    assert_eq!(manifest.command, "tokenize");
}

#[test]
fn dims_mismatch_exits_4() {
    let fx = fixture();
    let other = fx.dir.path().join("other.jsonl");
    ok(&["gen-data", "--items", "10", "--clusters", "1", "--zipf", "1.1", "--dims", "4", "--out", s(&other)]);
    let out = fx.dir.path().join("x.jsonl");
    let r = mixquant(&["tokenize", "--checkpoint", s(&fx.checkpoint), "--data", s(&other), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(4));
    let r = mixquant(&["metrics", "--checkpoint", s(&fx.checkpoint), "--data", s(&other)]);
    assert_eq!(r.status.code(), Some(4));
    // A dataset file passed where a checkpoint is expected.
    let r = mixquant(&["metrics", "--checkpoint", s(&fx.data), "--data", s(&fx.data)]);
    assert_eq!(r.status.code(), Some(4));
}

#[test]
fn metrics_stdout_matches_library() {
    let fx = fixture();
    let r = ok(&["metrics", "--checkpoint", s(&fx.checkpoint), "--data", s(&fx.data)]);
    let printed: QuantReport = serde_json::from_slice(&r.stdout).unwrap();
    for v in [printed.recon_loss, printed.entropy, printed.utilization] {
        assert!(v.is_finite());
    }
    let (model, _) = load_checkpoint::<f64>(&fx.checkpoint).unwrap();
    let dataset = load_dataset::<f64>(&fx.data, DataFormat::Jsonl).unwrap();
    assert_eq!(printed, quant_report(&model, &dataset, 0.0).unwrap());

    let out = fx.dir.path().join("m/report.json");
    let r = ok(&["metrics", "--checkpoint", s(&fx.checkpoint), "--data", s(&fx.data), "--out", s(&out)]);
    assert!(r.stdout.is_empty());
    let written: QuantReport = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(written, printed);
}
