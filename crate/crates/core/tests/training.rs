use std::collections::BTreeSet;
use std::fs;

use persona_policy::harness::{
    build_trainer, build_world, emit_report, run_ablation_matrix, run_experiment, run_seed,
    Baseline, ExperimentConfig, Preset, RunRecord,
};
use persona_policy::persona::SplitKind;
use persona_policy::train::{read_metrics, Ablation, IterationMetrics, Trainer};
use persona_policy::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn quick(ablation: Ablation, dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(Preset::V1, ablation, vec![0], dir);
    cfg.train.iterations = 3;
    cfg.train.batch_size = 512;
    cfg.train.minibatch_size = 256;
    cfg.train.epochs = 2;
    cfg.checkpoint_every = 2;
    cfg.eval.episodes_per_persona = 2;
    cfg.eval.kl_pairs = 20;
    cfg.eval.kl_states = 16;
    cfg
}

fn train(trainer: &mut Trainer, n: usize) -> Vec<IterationMetrics> {
    (0..n).map(|_| trainer.train_iteration().unwrap()).collect()
}

#[test]
fn no_consist_never_touches_the_encoder() {
    let dir = TempDir::new().unwrap();
    let mut t = build_trainer(&quick(Ablation::NoConsist, dir.path()), 0).unwrap();
    let before = t.encoder_fingerprint();
    for m in train(&mut t, 3) {
        assert_eq!(m.loss_consist, 0.0);
        assert_eq!(m.lambda1, 0.0);
    }
    assert_eq!(t.encoder_fingerprint(), before);

    let mut full = build_trainer(&quick(Ablation::Full, dir.path()), 0).unwrap();
    let before = full.encoder_fingerprint();
    let m = train(&mut full, 2);
    assert!(m[1].loss_consist > 0.0);
    assert_ne!(full.encoder_fingerprint(), before);
}

#[test]
fn no_diverse_logs_zero_diversity() {
    let dir = TempDir::new().unwrap();
    let mut t = build_trainer(&quick(Ablation::NoDiverse, dir.path()), 1).unwrap();
    for m in train(&mut t, 2) {
        assert_eq!(m.loss_diverse, 0.0);
        assert_eq!(m.lambda2, 0.0);
    }
}

#[test]
fn total_loss_is_the_weighted_sum_of_its_parts() {
    let dir = TempDir::new().unwrap();
    let mut t = build_trainer(&quick(Ablation::Full, dir.path()), 2).unwrap();
    for m in train(&mut t, 3) {
        let parts = m.loss_ppo + 0.5 * m.loss_consist + 0.1 * m.loss_diverse;
        assert!((m.loss_total - parts).abs() < 1e-10);
        let total = m.reward_needs + m.reward_persona + m.reward_social + m.reward_style;
        assert!((m.mean_episode_reward - total).abs() < 1e-9);
    }
}

#[test]
fn rollouts_only_use_training_personas() {
    let dir = TempDir::new().unwrap();
    let t = build_trainer(&quick(Ablation::Full, dir.path()), 3).unwrap();
    let train_ids: BTreeSet<u32> = t.split.train_ids.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (trajs, ids) = t.collect_rollouts(&mut rng).unwrap();
    assert_eq!(trajs.iter().map(|tr| tr.actions.len()).sum::<usize>(), 512);
    assert!(ids.iter().all(|id| train_ids.contains(id)));
}

#[test]
fn identical_seeds_are_bit_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = quick(Ablation::Full, dir.path());
    let mut a = build_trainer(&cfg, 5).unwrap();
    let mut b = build_trainer(&cfg, 5).unwrap();
    assert_eq!(train(&mut a, 3), train(&mut b, 3));
    assert_eq!(a.checkpoint().to_bytes(), b.checkpoint().to_bytes());
    let mut c = build_trainer(&cfg, 6).unwrap();
    assert_ne!(train(&mut c, 1)[0], train(&mut build_trainer(&cfg, 5).unwrap(), 1)[0]);
}

/// Zero auxiliary weights plus one fixed conditioning vector reproduce the
/// constant-conditioning baseline exactly.
#[test]
fn zero_weights_with_fixed_conditioning_equal_the_no_persona_baseline() {
    let dir = TempDir::new().unwrap();
    let mut b1_cfg = quick(Ablation::Full, dir.path());
    b1_cfg.baseline = Baseline::Constant;
    let mut b1 = build_trainer(&b1_cfg, 4).unwrap();

    let mut plain = quick(Ablation::Full, dir.path());
    plain.train.lambda1 = 0.0;
    plain.train.lambda2 = 0.0;
    let world = build_world(plain.preset, plain.split, plain.corpus_seed, &plain.embedding).unwrap();
    let mut paired = Trainer::new(
        plain.train_config(4),
        world.env.clone(),
        world.corpus.clone(),
        world.split.clone(),
        world.embeddings.clone(),
        b1.source.clone(),
    )
    .unwrap();
    let mut projected = build_trainer(&plain, 4).unwrap();

    let trace_b1 = train(&mut b1, 3);
    assert_eq!(trace_b1, train(&mut paired, 3));
    assert_ne!(trace_b1, train(&mut projected, 3));
}

#[test]
fn constant_conditioning_rejects_auxiliary_losses() {
    let dir = TempDir::new().unwrap();
    let mut b1_cfg = quick(Ablation::Full, dir.path());
    b1_cfg.baseline = Baseline::Constant;
    let b1 = build_trainer(&b1_cfg, 0).unwrap();
    let cfg = quick(Ablation::Full, dir.path());
    let world = build_world(cfg.preset, cfg.split, cfg.corpus_seed, &cfg.embedding).unwrap();
    let err = Trainer::new(
        cfg.train_config(0),
        world.env,
        world.corpus,
        world.split,
        world.embeddings,
        b1.source.clone(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config { .. }));
}

#[test]
fn interrupted_runs_resume_to_the_same_result() {
    let dir = TempDir::new().unwrap();
    let cfg = quick(Ablation::Full, &dir.path().join("straight"));
    let straight = run_seed(&cfg, 0).unwrap();

    let cfg2 = quick(Ablation::Full, &dir.path().join("resumed"));
    let first = run_seed(&cfg2, 0).unwrap();
    let ck_dir = first.run_dir.join("checkpoints");
    // drop the final checkpoint so the rerun restarts from iteration 2
    fs::remove_file(ck_dir.join("ckpt_00003.ppck")).unwrap();
    let resumed = run_seed(&cfg2, 0).unwrap();

    assert_eq!(
        read_metrics(&straight.metrics_path).unwrap(),
        read_metrics(&resumed.metrics_path).unwrap()
    );
    assert_eq!(
        fs::read(&straight.manifest.final_checkpoint).unwrap(),
        fs::read(&resumed.manifest.final_checkpoint).unwrap()
    );
    assert_eq!(straight.report.without_timing(), resumed.report.without_timing());
}

#[test]
fn run_record_and_report_bundle_are_complete() {
    let dir = TempDir::new().unwrap();
    let cfg = quick(Ablation::Full, dir.path());
    let records = run_experiment(&cfg).unwrap();
    assert_eq!(records.len(), 1);
    let r = &records[0];
    assert_eq!(RunRecord::load(&r.run_dir).unwrap(), *r);
    assert!(r.manifest.single_seed);
    assert_eq!(r.manifest.reproduced_collapse, r.report.collapsed());
    assert_eq!(r.checkpoints.len(), 2);
    for (name, hash) in &r.manifest.artifacts {
        let bytes = fs::read(r.run_dir.join(name)).unwrap();
        use sha2::Digest;
        let got: String = sha2::Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        assert_eq!(&got, hash, "{name}");
    }
    let rep = &r.report;
    assert_eq!(rep.n_personas, 60);
    assert_eq!(rep.n_trajectories, 120);
    assert!((rep.chance_level - 1.0 / 60.0).abs() < 1e-15);
    assert!(rep.zs_top1_low <= rep.zs_top1 && rep.zs_top1 <= rep.zs_top1_high);
    assert!(rep.zs_top3 >= rep.zs_top1);
    assert!(rep.latency_mean_ms > 0.0 && !rep.hardware.is_empty());

    let out = dir.path().join("report");
    let bundle = emit_report(&records, &out).unwrap();
    let lines = |p: &std::path::Path| fs::read_to_string(p).unwrap().lines().count();
    assert_eq!(lines(&bundle.runs_csv), 2);
    assert_eq!(lines(&bundle.reward_curves[0]), 1 + 3);
    assert_eq!(lines(&bundle.scatters[0]), 1 + cfg.eval.kl_pairs);
    assert_eq!(lines(&bundle.accuracy_bars[0]), 1 + 60);
    let header = fs::read_to_string(&bundle.scatters[0]).unwrap();
    assert!(header.starts_with("persona_a,persona_b,distance,kl"));
    assert!(emit_report(&[], &out).is_err());
}

#[test]
fn ablation_matrix_tabulates_every_arm() {
    let dir = TempDir::new().unwrap();
    let mut cfg = quick(Ablation::Full, dir.path());
    cfg.train.iterations = 1;
    let table = run_ablation_matrix(&cfg, &[Ablation::Full, Ablation::NoConsist], &[0, 1], 2).unwrap();
    assert_eq!(table.records.len(), 4);
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.rows[1].arm, "v1_no_consist");
    let gap = table.rows[1].reward_mean - table.rows[0].reward_mean;
    assert_eq!(table.no_consist_reward_gap, Some(gap));
    let csv = fs::read_to_string(&table.csv_path).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let dirs: BTreeSet<_> = table.records.iter().map(|r| r.run_dir.clone()).collect();
    assert_eq!(dirs.len(), 4);
    assert!(matches!(
        run_ablation_matrix(&cfg, &[Ablation::Full], &[0], 1),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn held_out_axes_follow_the_split_kind() {
    for kind in [SplitKind::UnseenOccupation, SplitKind::UnseenArchetype, SplitKind::UnseenCross] {
        let w = build_world(Preset::V3, kind, 0, &Default::default()).unwrap();
        let n = w.split.heldout_ids.len();
        match kind {
            SplitKind::UnseenOccupation | SplitKind::UnseenArchetype => assert_eq!(n, 60),
            SplitKind::UnseenCross => assert_eq!(n, 12),
        }
    }
}
