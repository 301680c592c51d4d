use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use persona_policy::embedding::{
    write_embeddings_binary, write_embeddings_text, SyntheticEmbedder, SyntheticEmbedderConfig,
};
use persona_policy::env::rollout::write_trajectories;
use persona_policy::env::EnvState;
use persona_policy::eval::{hardware_manifest, knn_zero_shot, latency_benchmark, MetricsReport};
use persona_policy::harness::{
    build_trainer, build_world, emit_report, evaluate_checkpoint, run_ablation_matrix,
    run_experiment, EmbeddingSpec, ExperimentConfig, Preset, RunRecord,
};
use persona_policy::nn::checkpoint::Checkpoint;
use persona_policy::persona::{read_corpus, write_corpus, SplitKind};
use persona_policy::train::Ablation;
use persona_policy::Error;

#[derive(Parser)]
#[command(name = "persona-policy", version, about = "Persona-conditioned multi-agent policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    UnseenOccupation,
    UnseenArchetype,
    UnseenCross,
}

impl From<Split> for SplitKind {
    fn from(s: Split) -> Self {
        match s {
            Split::UnseenOccupation => SplitKind::UnseenOccupation,
            Split::UnseenArchetype => SplitKind::UnseenArchetype,
            Split::UnseenCross => SplitKind::UnseenCross,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbeddingFormat {
    Binary,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a persona corpus and its train/held-out split.
    GenPersonas {
        /// v1, v2, v3 or v3-large
        #[arg(long, default_value = "v1")]
        preset: Preset,
        #[arg(long, value_enum, default_value = "unseen-occupation")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corpus output (JSON lines).
        #[arg(long, short)]
        out: PathBuf,
        /// Split output (JSON).
        #[arg(long)]
        split_out: Option<PathBuf>,
    },
    /// Embed a corpus with the synthetic text embedder.
    Embed {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "binary")]
        format: EmbeddingFormat,
        #[arg(long, default_value_t = SyntheticEmbedderConfig::default().dim)]
        dim: usize,
        #[arg(long, default_value_t = SyntheticEmbedderConfig::default().occupation_bias)]
        occupation_bias: f64,
        #[arg(long, default_value_t = SyntheticEmbedderConfig::default().noise_scale)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate every seed of an experiment config.
    Train {
        #[arg(long, short)]
        config: PathBuf,
    },
    /// Re-evaluate a checkpoint.
    Eval {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Training seed the checkpoint belongs to.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report output (JSON); printed to stdout when absent.
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Write the held-out evaluation rollouts as JSON lines.
        #[arg(long)]
        dump_trajectories: Option<PathBuf>,
    },
    /// Run several ablation arms across seeds and tabulate them.
    Ablate {
        #[arg(long, short)]
        config: PathBuf,
        /// Comma-separated arms: full, no_consist, no_diverse, concat.
        #[arg(long, value_delimiter = ',', default_value = "full,no_consist,no_diverse,concat")]
        arms: Vec<Ablation>,
        /// Comma-separated seeds; defaults to the config's seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Time single-agent policy inference.
    Bench {
        /// Experiment config; a default v1 config is used when absent.
        #[arg(long, short)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "v1")]
        preset: Preset,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 100)]
        warmup: usize,
    },
    /// Collect finished runs into tables and plot-ready files.
    Report {
        /// Run directories (each holding run_record.json).
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(label: &str, r: &MetricsReport) {
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    println!(
        "{label}: reward {:.2}  top1 {:.3} [{:.3}, {:.3}]  top3 {:.3}  chance {:.3}  kl {:.3}  rho {}  coherence {}{}",
        r.mean_reward,
        r.zs_top1,
        r.zs_top1_low,
        r.zs_top1_high,
        r.zs_top3,
        r.chance_level,
        r.mean_pairwise_kl,
        opt(r.spearman_rho),
        opt(r.coherence_ratio),
        if r.collapsed() { "  REPRODUCED-COLLAPSE" } else { "" },
    );
}

fn gen_personas(preset: Preset, split: Split, seed: u64, out: &Path, split_out: Option<&Path>) -> Result<()> {
    let world = build_world(preset, split.into(), seed, &EmbeddingSpec::default())?;
    write_corpus(out, &world.corpus)?;
    if let Some(p) = split_out {
        world.split.save(p)?;
    }
    println!(
        "{} personas ({} train, {} held out) -> {}",
        world.corpus.len(),
        world.split.train_ids.len(),
        world.split.heldout_ids.len(),
        out.display()
    );
    Ok(())
}

fn embed(corpus: &Path, out: &Path, format: EmbeddingFormat, config: SyntheticEmbedderConfig) -> Result<()> {
    let personas = read_corpus(corpus)?;
    let embedder = SyntheticEmbedder::new(config)?;
    let mut map = BTreeMap::new();
    for p in &personas {
        map.insert(p.persona_id, embedder.embed(p)?);
    }
    match format {
        EmbeddingFormat::Binary => write_embeddings_binary(out, &map)?,
        EmbeddingFormat::Text => write_embeddings_text(out, &map)?,
    }
    println!("{} embeddings of dim {} -> {}", map.len(), config.dim, out.display());
    Ok(())
}

fn train(config: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    for record in run_experiment(&cfg)? {
        print_report(&record.manifest.run_id, &record.report);
        println!("  run dir {}", record.run_dir.display());
    }
    Ok(())
}

fn eval(config: &Path, checkpoint: &Path, seed: u64, out: Option<&Path>, dump: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let (report, _) = evaluate_checkpoint(&cfg, seed, checkpoint)?;
    if let Some(path) = dump {
        let mut trainer = build_trainer(&cfg, seed)?;
        trainer.restore(Checkpoint::load(checkpoint)?)?;
        let zs = knn_zero_shot(&trainer.eval_inputs(), cfg.eval.episodes_per_persona, cfg.eval.seed)?;
        write_trajectories(path, &zs.trajectories)?;
    }
    match out {
        Some(path) => {
            let text = serde_json::to_string_pretty(&report)?;
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
            print_report("eval", &report);
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn ablate(config: &Path, arms: &[Ablation], seeds: &[u64], workers: usize) -> Result<()> {
    let cfg = load_config(config)?;
    let seeds = if seeds.is_empty() { cfg.seeds.clone() } else { seeds.to_vec() };
    let table = run_ablation_matrix(&cfg, arms, &seeds, workers)?;
    for row in &table.rows {
        println!("{}", serde_json::to_string(row)?);
    }
    if let Some(gap) = table.no_consist_reward_gap {
        println!("no_consist - full reward gap: {gap:+.3}");
    }
    println!("table -> {}", table.csv_path.display());
    Ok(())
}

fn bench(config: Option<&Path>, preset: Preset, checkpoint: Option<&Path>, trials: usize, warmup: usize) -> Result<()> {
    let cfg = match config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::new(preset, Ablation::Full, vec![0], std::env::temp_dir()),
    };
    let seed = cfg.seeds[0];
    let mut trainer = build_trainer(&cfg, seed)?;
    if let Some(ck) = checkpoint {
        trainer.restore(Checkpoint::load(ck)?)?;
    }
    let inputs = trainer.eval_inputs();
    let heldout = &inputs.split.heldout_ids;
    let n = inputs.env.n_agents;
    if heldout.len() < n {
        bail!("need {n} held-out personas, split has {}", heldout.len());
    }
    let cond = inputs.conditioning(&heldout[..1])?;
    let personas: Vec<_> = heldout[..n].iter().map(|&id| &inputs.corpus[id as usize]).collect();
    let env = EnvState::reset(inputs.env, &personas, seed)?;
    let stats = latency_benchmark(&inputs.model.policy, cond.row(0), &env, trials, warmup)?;
    println!(
        "latency over {} trials: mean {:.4} ms  p50 {:.4} ms  p95 {:.4} ms  max {:.4} ms",
        stats.trials, stats.mean_ms, stats.p50_ms, stats.p95_ms, stats.max_ms
    );
    println!("hardware: {}", hardware_manifest().describe());
    Ok(())
}

fn report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let records = runs
        .iter()
        .map(|d| RunRecord::load(d))
        .collect::<persona_policy::Result<Vec<_>>>()?;
    let bundle = emit_report(&records, out)?;
    println!("{} runs -> {}", records.len(), bundle.runs_csv.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenPersonas {
            preset,
            split,
            seed,
            out,
            split_out,
        } => gen_personas(preset, split, seed, &out, split_out.as_deref()),
        Command::Embed {
            corpus,
            out,
            format,
            dim,
            occupation_bias,
            noise,
            seed,
        } => embed(
            &corpus,
            &out,
            format,
            SyntheticEmbedderConfig {
                dim,
                occupation_bias,
                noise_scale: noise,
                seed,
            },
        ),
        Command::Train { config } => train(&config),
        Command::Eval {
            config,
            checkpoint,
            seed,
            out,
            dump_trajectories,
        } => eval(&config, &checkpoint, seed, out.as_deref(), dump_trajectories.as_deref()),
        Command::Ablate {
            config,
            arms,
            seeds,
            workers,
        } => ablate(&config, &arms, &seeds, workers),
        Command::Bench {
            config,
            preset,
            checkpoint,
            trials,
            warmup,
        } => bench(config.as_deref(), preset, checkpoint.as_deref(), trials, warmup),
        Command::Report { runs, out } => report(&runs, &out),
    }
}

/// 2 for configuration problems, 3 for numerical aborts, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config { .. } | Error::Parameter(_)) => 2,
        Some(Error::Numerical(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
