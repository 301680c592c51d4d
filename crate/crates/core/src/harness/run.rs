use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalArtifacts, MetricsReport};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::ModelConfig;
use crate::persona::write_corpus;
use crate::train::{read_metrics, MetricsWriter, Trainer};

use super::{build_world, conditioning_source, ExperimentConfig};

pub(super) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(super) fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub arm: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub iterations: u64,
    pub single_seed: bool,
    pub final_checkpoint: PathBuf,
    /// File name to SHA-256 for every artifact in the run directory.
    pub artifacts: BTreeMap<String, String>,
    pub reproduced_collapse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
    pub checkpoints: Vec<PathBuf>,
    pub metrics_path: PathBuf,
    pub report: MetricsReport,
    pub artifacts: EvalArtifacts,
    /// SHA-256 of the written manifest.
    pub manifest_sha256: String,
}

impl RunRecord {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join("run_record.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Trainer for one seed of `cfg`, freshly initialized.
pub fn build_trainer(cfg: &ExperimentConfig, seed: u64) -> Result<Trainer> {
    let world = build_world(cfg.preset, cfg.split, cfg.corpus_seed, &cfg.embedding)?;
    let spec = cfg.preset.spec();
    let train = cfg.train_config(seed);
    let mut model_cfg = ModelConfig::new(
        world.env.obs_dim(),
        crate::env::ontology::ActionOntology::new(spec.ontology).len(),
        train.ablation.conditioning(),
    );
    model_cfg.raw_dim = world.embeddings.dim();
    let source = conditioning_source(cfg.baseline, &world, &model_cfg, seed)?;
    Trainer::new(
        train,
        world.env,
        world.corpus,
        world.split,
        world.embeddings,
        source,
    )
}

fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt_{iteration:05}.ppck")
}

fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if dir.exists() {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let p = entry.map_err(|e| Error::io(dir, e))?.path();
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name.starts_with("ckpt_") && name.ends_with(".ppck") {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Keeps the first `n` lines of the metrics stream.
fn truncate_metrics(path: &Path, n: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kept: String = text.lines().take(n).map(|l| format!("{l}\n")).collect();
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Trains, evaluates and records one seed. Resumes from the newest
/// checkpoint in the run directory when one exists.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<RunRecord> {
    cfg.validate()?;
    let run_dir = cfg.run_dir(seed);
    let ck_dir = run_dir.join("checkpoints");
    create_dir(&ck_dir)?;
    let mut trainer = build_trainer(cfg, seed)?;
    write_corpus(&run_dir.join("corpus.jsonl"), &trainer.corpus)?;
    trainer.split.save(&run_dir.join("split.json"))?;
    fs::write(run_dir.join("config.toml"), cfg.to_toml()?)
        .map_err(|e| Error::io(run_dir.join("config.toml"), e))?;

    let metrics_path = run_dir.join("metrics.jsonl");
    match list_checkpoints(&ck_dir)?.last() {
        Some(latest) => {
            trainer.restore(Checkpoint::load(latest)?)?;
            truncate_metrics(&metrics_path, trainer.iteration as usize)?;
        }
        None => truncate_metrics(&metrics_path, 0)?,
    }

    let total = trainer.config.iterations as u64;
    let mut writer = MetricsWriter::create(&metrics_path)?;
    while trainer.iteration < total {
        let metrics = match trainer.train_iteration() {
            Ok(m) => m,
            Err(e @ Error::Numerical(_)) => {
                trainer.checkpoint().save(&run_dir.join("diagnostic.ppck"))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writer.write(&metrics)?;
        let it = trainer.iteration;
        if it % cfg.checkpoint_every as u64 == 0 || it == total {
            trainer.checkpoint().save(&ck_dir.join(checkpoint_name(it)))?;
        }
    }
    if total == 0 {
        trainer.checkpoint().save(&ck_dir.join(checkpoint_name(0)))?;
    }
    drop(writer);

    let final_ck = ck_dir.join(checkpoint_name(total));
    let (report, artifacts) = evaluate(&trainer.eval_inputs(), &cfg.eval)?;
    write_json(&run_dir.join("report.json"), &report)?;
    MetricsReport::write_csv(std::slice::from_ref(&report), &run_dir.join("report.csv"))?;
    write_json(&run_dir.join("eval_artifacts.json"), &artifacts)?;

    let mut hashes = BTreeMap::new();
    for name in [
        "corpus.jsonl",
        "split.json",
        "config.toml",
        "metrics.jsonl",
        "report.json",
        "report.csv",
        "eval_artifacts.json",
    ] {
        hashes.insert(name.to_string(), file_sha256(&run_dir.join(name))?);
    }
    let checkpoints = list_checkpoints(&ck_dir)?;
    for ck in &checkpoints {
        let rel = format!("checkpoints/{}", ck.file_name().unwrap().to_string_lossy());
        hashes.insert(rel, file_sha256(ck)?);
    }
    let run_id = format!("{}_s{seed}", cfg.arm_name());
    let manifest = RunManifest {
        run_id,
        arm: cfg.arm_name(),
        seed,
        config: cfg.clone(),
        config_hash: hex(&trainer.config_hash()),
        iterations: total,
        single_seed: cfg.seeds.len() == 1,
        final_checkpoint: final_ck,
        artifacts: hashes,
        reproduced_collapse: report.collapsed(),
    };
    let manifest_path = run_dir.join("manifest.json");
    write_json(&manifest_path, &manifest)?;
    let record = RunRecord {
        run_dir: run_dir.clone(),
        manifest,
        checkpoints,
        metrics_path,
        report,
        artifacts,
        manifest_sha256: file_sha256(&manifest_path)?,
    };
    write_json(&run_dir.join("run_record.json"), &record)?;
    Ok(record)
}

/// Runs every seed of `cfg` in order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    cfg.seeds.iter().map(|&s| run_seed(cfg, s)).collect()
}

/// Re-evaluates a saved checkpoint under `cfg`'s world and protocol.
pub fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    seed: u64,
    checkpoint: &Path,
) -> Result<(MetricsReport, EvalArtifacts)> {
    let mut trainer = build_trainer(cfg, seed)?;
    trainer.restore(Checkpoint::load(checkpoint)?)?;
    evaluate(&trainer.eval_inputs(), &cfg.eval)
}

/// Reads the metrics stream of a finished run.
pub(super) fn run_metrics(record: &RunRecord) -> Result<Vec<crate::train::IterationMetrics>> {
    read_metrics(&record.metrics_path)
}
