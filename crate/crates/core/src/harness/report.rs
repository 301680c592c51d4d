use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{wilson_interval, Z_95};
use crate::train::Ablation;

use super::run::{file_sha256, run_metrics, run_seed, RunRecord};
use super::ExperimentConfig;

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// One ablation arm aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub seeds: usize,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub zs_top1_mean: f64,
    pub zs_top1_std: f64,
    /// Wilson interval over the pooled judgments of every seed.
    pub zs_top1_pooled_low: f64,
    pub zs_top1_pooled_high: f64,
    pub chance_level: f64,
    pub kl_mean: f64,
    pub kl_std: f64,
    pub rho_mean: Option<f64>,
    pub rho_std: Option<f64>,
    pub coherence_mean: Option<f64>,
    pub coherence_std: Option<f64>,
    pub collapsed_runs: usize,
    /// `;`-joined manifest hashes of the contributing runs.
    pub run_hashes: String,
}

impl AblationRow {
    pub fn from_records(arm: &str, records: &[&RunRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Parameter(format!("arm {arm} has no runs")));
        }
        let pick = |f: fn(&RunRecord) -> Option<f64>| -> Vec<f64> {
            records.iter().filter_map(|r| f(r)).collect()
        };
        let opt = |xs: Vec<f64>| -> (Option<f64>, Option<f64>) {
            if xs.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&xs);
                (Some(m), Some(s))
            }
        };
        let (reward_mean, reward_std) = mean_std(&pick(|r| Some(r.report.mean_reward)));
        let (zs_top1_mean, zs_top1_std) = mean_std(&pick(|r| Some(r.report.zs_top1)));
        let (kl_mean, kl_std) = mean_std(&pick(|r| Some(r.report.mean_pairwise_kl)));
        let (rho_mean, rho_std) = opt(pick(|r| r.report.spearman_rho));
        let (coherence_mean, coherence_std) = opt(pick(|r| r.report.coherence_ratio));
        let hits: usize = records
            .iter()
            .map(|r| (r.report.zs_top1 * r.report.n_trajectories as f64).round() as usize)
            .sum();
        let n: usize = records.iter().map(|r| r.report.n_trajectories).sum();
        let (lo, hi) = wilson_interval(hits, n, Z_95)?;
        Ok(Self {
            arm: arm.to_string(),
            seeds: records.len(),
            reward_mean,
            reward_std,
            zs_top1_mean,
            zs_top1_std,
            zs_top1_pooled_low: lo,
            zs_top1_pooled_high: hi,
            chance_level: records[0].report.chance_level,
            kl_mean,
            kl_std,
            rho_mean,
            rho_std,
            coherence_mean,
            coherence_std,
            collapsed_runs: records.iter().filter(|r| r.report.collapsed()).count(),
            run_hashes: records
                .iter()
                .map(|r| r.manifest_sha256.as_str())
                .collect::<Vec<_>>()
                .join(";"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub records: Vec<RunRecord>,
    /// Reward of `no_consist` minus `full`, when both arms ran.
    pub no_consist_reward_gap: Option<f64>,
    pub csv_path: PathBuf,
}

/// Runs every `(ablation, seed)` pair on at most `workers` threads and
/// writes `ablation_table.csv` into the base output directory.
pub fn run_ablation_matrix(
    base: &ExperimentConfig,
    ablations: &[Ablation],
    seeds: &[u64],
    workers: usize,
) -> Result<AblationTable> {
    if ablations.len() < 2 {
        return Err(Error::Parameter("an ablation matrix needs at least two arms".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Parameter("an ablation matrix needs at least one seed".into()));
    }
    let arms: Vec<ExperimentConfig> = ablations
        .iter()
        .map(|&a| {
            let mut c = base.clone();
            c.ablation = a;
            c.seeds = seeds.to_vec();
            c.validate().map(|_| c)
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, u64)> = (0..arms.len())
        .flat_map(|a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunRecord>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len()) {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(a, s)) = jobs.get(j) else { break };
                let r = run_seed(&arms[a], s);
                results.lock().unwrap()[j] = Some(r);
            });
        }
    });
    let records: Vec<RunRecord> = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (a, arm) in arms.iter().enumerate() {
        let of_arm: Vec<&RunRecord> = records
            .iter()
            .zip(&jobs)
            .filter(|(_, &(ja, _))| ja == a)
            .map(|(r, _)| r)
            .collect();
        rows.push(AblationRow::from_records(&arm.arm_name(), &of_arm)?);
    }
    let reward_of = |abl: Ablation| {
        ablations
            .iter()
            .position(|&a| a == abl)
            .map(|i| rows[i].reward_mean)
    };
    let no_consist_reward_gap = match (reward_of(Ablation::NoConsist), reward_of(Ablation::Full)) {
        (Some(nc), Some(f)) => Some(nc - f),
        _ => None,
    };
    fs::create_dir_all(&base.output_dir).map_err(|e| Error::io(&base.output_dir, e))?;
    let csv_path = base.output_dir.join("ablation_table.csv");
    write_rows(&csv_path, &rows)?;
    Ok(AblationTable {
        rows,
        records,
        no_consist_reward_gap,
        csv_path,
    })
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Serialize)]
struct RunRow<'a> {
    run_id: &'a str,
    manifest_sha256: &'a str,
    seed: u64,
    single_seed: bool,
    reproduced_collapse: bool,
}

#[derive(Debug, Clone, Serialize)]
struct CurveRow {
    iteration: u64,
    env_steps: u64,
    mean_episode_reward: f64,
    loss_total: f64,
    loss_ppo: f64,
    loss_consist: f64,
    loss_diverse: f64,
    entropy: f64,
}

#[derive(Debug, Clone, Serialize)]
struct ScatterRow {
    persona_a: u32,
    persona_b: u32,
    distance: f64,
    kl: f64,
}

#[derive(Debug, Clone, Serialize)]
struct AccuracyRow {
    persona_id: u32,
    top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub out_dir: PathBuf,
    pub runs_csv: PathBuf,
    pub reward_curves: Vec<PathBuf>,
    pub scatters: Vec<PathBuf>,
    pub accuracy_bars: Vec<PathBuf>,
    pub summaries: Vec<PathBuf>,
}

/// Writes `runs.csv` plus per-run reward curves, distance/KL scatters,
/// per-persona accuracy bars and JSON summaries into `out_dir`.
pub fn emit_report(records: &[RunRecord], out_dir: &Path) -> Result<ReportBundle> {
    if records.is_empty() {
        return Err(Error::Parameter("a report needs at least one run".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let runs_csv = out_dir.join("runs.csv");
    let rows: Vec<(RunRow<'_>, &crate::eval::MetricsReport)> = records
        .iter()
        .map(|r| {
            let row = RunRow {
                run_id: &r.manifest.run_id,
                manifest_sha256: &r.manifest_sha256,
                seed: r.manifest.seed,
                single_seed: r.manifest.single_seed,
                reproduced_collapse: r.manifest.reproduced_collapse,
            };
            (row, &r.report)
        })
        .collect();
    write_rows(&runs_csv, &rows)?;

    let mut bundle = ReportBundle {
        out_dir: out_dir.to_path_buf(),
        runs_csv,
        reward_curves: Vec::new(),
        scatters: Vec::new(),
        accuracy_bars: Vec::new(),
        summaries: Vec::new(),
    };
    for r in records {
        let id = &r.manifest.run_id;
        let curve: Vec<CurveRow> = run_metrics(r)?
            .into_iter()
            .map(|m| CurveRow {
                iteration: m.iteration,
                env_steps: m.env_steps,
                mean_episode_reward: m.mean_episode_reward,
                loss_total: m.loss_total,
                loss_ppo: m.loss_ppo,
                loss_consist: m.loss_consist,
                loss_diverse: m.loss_diverse,
                entropy: m.entropy,
            })
            .collect();
        let path = out_dir.join(format!("{id}_reward_curve.csv"));
        write_rows(&path, &curve)?;
        bundle.reward_curves.push(path);

        let scatter: Vec<ScatterRow> = r
            .artifacts
            .scatter
            .iter()
            .map(|&(a, b, d, k)| ScatterRow {
                persona_a: a,
                persona_b: b,
                distance: d,
                kl: k,
            })
            .collect();
        let path = out_dir.join(format!("{id}_distance_kl.csv"));
        write_rows(&path, &scatter)?;
        bundle.scatters.push(path);

        let bars: Vec<AccuracyRow> = r
            .artifacts
            .per_persona_top1
            .iter()
            .map(|&(persona_id, top1)| AccuracyRow { persona_id, top1 })
            .collect();
        let path = out_dir.join(format!("{id}_persona_accuracy.csv"));
        write_rows(&path, &bars)?;
        bundle.accuracy_bars.push(path);

        let path = out_dir.join(format!("{id}_summary.json"));
        let summary = serde_json::json!({
            "run_id": id,
            "manifest_sha256": r.manifest_sha256,
            "final_checkpoint": r.manifest.final_checkpoint,
            "final_checkpoint_sha256": file_sha256(&r.manifest.final_checkpoint).ok(),
            "single_seed": r.manifest.single_seed,
            "flags": if r.manifest.reproduced_collapse { vec!["REPRODUCED-COLLAPSE"] } else { vec![] },
            "report": r.report,
        });
        let text =
            serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        bundle.summaries.push(path);
    }
    Ok(bundle)
}
