//! Evaluation protocol: zero-shot persona identification on held-out
//! personas, pairwise behavioral KL, distance/KL alignment, trajectory
//! coherence and batch-1 latency.

mod latency;
pub mod stats;

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingTable, ProjectionParams};
use crate::env::rollout::{collect, ActionSelection, Actor, Trajectory};
use crate::env::{EnvConfig, EnvState};
use crate::error::{Error, Result};
use crate::linalg::{cosine, euclidean, log_softmax, Matrix};
use crate::nn::{ConditionedMlp, EncoderInput, GruEncoder, Model};
use crate::persona::{CorpusSplit, PersonaRecord};
use crate::seeding::{derive_seed, rng_for, tag};
use crate::train::ConditioningSource;

pub use latency::{hardware_manifest, latency_benchmark, HardwareInfo, LatencyStats};
pub use stats::{average_ranks, spearman, wilson_interval, Z_95};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes_per_persona: usize,
    pub kl_pairs: usize,
    pub kl_states: usize,
    pub latency_trials: usize,
    pub latency_warmup: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes_per_persona: 5,
            kl_pairs: 100,
            kl_states: 200,
            latency_trials: 1000,
            latency_warmup: 100,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes_per_persona < 2 {
            return Err(Error::config("eval.episodes_per_persona", "must be at least 2"));
        }
        if self.kl_pairs < 10 {
            return Err(Error::config("eval.kl_pairs", "must be at least 10"));
        }
        if self.kl_states == 0 {
            return Err(Error::config("eval.kl_states", "must be positive"));
        }
        if self.latency_trials < 1000 {
            return Err(Error::config("eval.latency_trials", "must be at least 1000"));
        }
        Ok(())
    }
}

/// Everything the protocol reads from a trained run.
#[derive(Debug, Clone, Copy)]
pub struct EvalInputs<'a> {
    pub model: &'a Model,
    pub initial_projection: &'a ProjectionParams,
    pub source: &'a ConditioningSource,
    pub env: &'a EnvConfig,
    pub corpus: &'a [PersonaRecord],
    pub embeddings: &'a EmbeddingTable,
    pub split: &'a CorpusSplit,
}

impl EvalInputs<'_> {
    /// Conditioning rows the policy sees for `ids`.
    pub fn conditioning(&self, ids: &[u32]) -> Result<Matrix> {
        match self.source {
            ConditioningSource::Projected => self.project(&self.model.projection, ids),
            ConditioningSource::Constant(c) => {
                let mut m = Matrix::zeros(ids.len(), c.len());
                for i in 0..ids.len() {
                    m.row_mut(i).copy_from_slice(c);
                }
                Ok(m)
            }
        }
    }

    pub fn project(&self, projection: &ProjectionParams, ids: &[u32]) -> Result<Matrix> {
        Ok(projection.project_batch(&self.embeddings.rows(ids))?.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub truth: usize,
    pub predicted: usize,
    /// 1-based rank of the true candidate.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub records: Vec<RetrievalRecord>,
}

impl Retrieval {
    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn hits(&self, k: usize) -> usize {
        self.records.iter().filter(|r| r.rank <= k).count()
    }

    pub fn top_k(&self, k: usize) -> f64 {
        self.hits(k) as f64 / self.n().max(1) as f64
    }
}

/// Cosine nearest-candidate retrieval. Ties rank the lower index first.
pub fn retrieve(queries: &Matrix, truth: &[usize], candidates: &Matrix) -> Result<Retrieval> {
    if queries.rows != truth.len() {
        return Err(Error::Shape(format!("{} queries, {} labels", queries.rows, truth.len())));
    }
    if queries.cols != candidates.cols {
        return Err(Error::Shape(format!(
            "query width {} vs candidate width {}",
            queries.cols, candidates.cols
        )));
    }
    if candidates.rows == 0 {
        return Err(Error::Parameter("no retrieval candidates".into()));
    }
    let mut records = Vec::with_capacity(truth.len());
    for (q, &t) in truth.iter().enumerate() {
        if t >= candidates.rows {
            return Err(Error::Parameter(format!("label {t} out of range")));
        }
        let scores: Vec<f64> = (0..candidates.rows)
            .map(|c| cosine(queries.row(q), candidates.row(c)))
            .collect();
        let mut predicted = 0;
        for (c, &s) in scores.iter().enumerate() {
            if s > scores[predicted] {
                predicted = c;
            }
        }
        let st = scores[t];
        let rank = 1 + scores
            .iter()
            .enumerate()
            .filter(|&(c, &s)| s > st || (s == st && c < t))
            .count();
        records.push(RetrievalRecord { truth: t, predicted, rank });
    }
    Ok(Retrieval { records })
}

/// Held-out rollouts plus their encodings and retrieval outcome.
#[derive(Debug, Clone)]
pub struct ZeroShot {
    /// Scored trajectories, `episodes_per_persona` per held-out persona.
    pub trajectories: Vec<Trajectory>,
    /// Index into `split.heldout_ids` for each trajectory.
    pub labels: Vec<usize>,
    pub embeddings: Matrix,
    pub retrieval: Retrieval,
}

pub fn encode_trajectories(encoder: &GruEncoder, trajs: &[Trajectory]) -> Result<Matrix> {
    let inputs: Vec<EncoderInput<'_>> = trajs
        .iter()
        .map(|t| EncoderInput {
            actions: &t.actions,
            observations: (encoder.obs_concat > 0).then_some(t.observations.as_slice()),
        })
        .collect();
    encoder.encode_batch(&inputs)
}

/// Each round shuffles the held-out personas into environments of
/// `n_agents`; the last environment is topped up with already-scored
/// personas whose trajectories are discarded.
pub fn knn_zero_shot(inputs: &EvalInputs<'_>, episodes_per_persona: usize, seed: u64) -> Result<ZeroShot> {
    let heldout = &inputs.split.heldout_ids;
    let train: BTreeSet<u32> = inputs.split.train_ids.iter().copied().collect();
    if let Some(id) = heldout.iter().find(|id| train.contains(id)) {
        return Err(Error::Protocol(format!("persona {id} is both held out and trained on")));
    }
    if heldout.is_empty() {
        return Err(Error::Protocol("no held-out personas".into()));
    }
    let n_agents = inputs.env.n_agents;
    if heldout.len() < n_agents {
        return Err(Error::Protocol(format!(
            "{} held-out personas cannot fill {n_agents} agent slots",
            heldout.len()
        )));
    }
    let model = inputs.model;
    let mut slots: Vec<usize> = Vec::new();
    let mut scored: Vec<bool> = Vec::new();
    let mut envs = Vec::new();
    for rep in 0..episodes_per_persona {
        let mut order: Vec<usize> = (0..heldout.len()).collect();
        order.shuffle(&mut rng_for(seed, &[tag::EVAL, 0, rep as u64]));
        let n_envs = order.len().div_ceil(n_agents);
        for e in 0..n_envs {
            let mut group: Vec<(usize, bool)> = order[e * n_agents..((e + 1) * n_agents).min(order.len())]
                .iter()
                .map(|&i| (i, true))
                .collect();
            let mut fill = 0;
            while group.len() < n_agents {
                group.push((order[fill], false));
                fill += 1;
            }
            let personas: Vec<&PersonaRecord> = group
                .iter()
                .map(|&(i, _)| &inputs.corpus[heldout[i] as usize])
                .collect();
            let env_seed = derive_seed(seed, &[tag::EVAL, 1, rep as u64, e as u64]);
            envs.push(EnvState::reset(inputs.env, &personas, env_seed)?);
            for (i, s) in group {
                slots.push(i);
                scored.push(s);
            }
        }
    }
    let cond = inputs.conditioning(heldout)?;
    let actor = Actor {
        policy: &model.policy,
        value: None,
        cond: &cond,
    };
    let mut rng = rng_for(seed, &[tag::EVAL, 2]);
    let all = collect(actor, envs, &slots, ActionSelection::Sample, &mut rng)?;
    let mut trajectories = Vec::new();
    let mut labels = Vec::new();
    for ((t, s), slot) in all.into_iter().zip(scored).zip(slots) {
        if s {
            trajectories.push(t);
            labels.push(slot);
        }
    }
    let embeddings = encode_trajectories(&model.encoder, &trajectories)?;
    let candidates = inputs.project(&model.projection, heldout)?;
    let retrieval = retrieve(&embeddings, &labels, &candidates)?;
    Ok(ZeroShot {
        trajectories,
        labels,
        embeddings,
        retrieval,
    })
}

/// `n` distinct unordered pairs over `0..items`.
pub fn sample_pairs(items: usize, n: usize, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
    if items < 2 {
        return Err(Error::Parameter("pairs need at least 2 personas".into()));
    }
    let total = items * (items - 1) / 2;
    if n > total {
        return Err(Error::Parameter(format!("{n} pairs requested, only {total} exist")));
    }
    let mut seen = BTreeSet::new();
    while seen.len() < n {
        let a = rng.random_range(0..items);
        let b = rng.random_range(0..items);
        if a != b {
            seen.insert((a.min(b), a.max(b)));
        }
    }
    let mut pairs: Vec<(usize, usize)> = seen.into_iter().collect();
    pairs.shuffle(rng);
    Ok(pairs)
}

/// `n` observations drawn uniformly, with replacement, from every step of
/// `trajs`.
pub fn sample_states(trajs: &[Trajectory], n: usize, rng: &mut impl Rng) -> Result<Matrix> {
    let all: Vec<&Vec<f64>> = trajs.iter().flat_map(|t| &t.observations).collect();
    if all.is_empty() {
        return Err(Error::Parameter("no states to sample".into()));
    }
    let picked: Vec<&Vec<f64>> = (0..n).map(|_| *all.choose(rng).unwrap()).collect();
    Matrix::from_rows(&picked)
}

/// `(KL(p||q) + KL(q||p)) / 2` for two log-probability vectors.
pub fn symmetric_kl(lp: &[f64], lq: &[f64]) -> f64 {
    let mut s = 0.0;
    for (a, b) in lp.iter().zip(lq) {
        s += (a.exp() - b.exp()) * (a - b);
    }
    0.5 * s
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseKl {
    pub mean: f64,
    pub per_pair: Vec<f64>,
}

/// Mean symmetric action KL over `states` for each pair of conditioning
/// rows.
pub fn pairwise_action_kl(
    policy: &ConditionedMlp,
    cond: &Matrix,
    pairs: &[(usize, usize)],
    states: &Matrix,
) -> Result<PairwiseKl> {
    if pairs.is_empty() {
        return Err(Error::Parameter("no persona pairs".into()));
    }
    let mut used: Vec<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    used.sort_unstable();
    used.dedup();
    if let Some(&bad) = used.iter().find(|&&i| i >= cond.rows) {
        return Err(Error::Parameter(format!("pair index {bad} out of range")));
    }
    let n = states.rows;
    let mut log_probs = vec![Vec::new(); cond.rows];
    for &p in &used {
        let logits = policy.forward(states, cond, &vec![p; n])?;
        log_probs[p] = (0..n).map(|s| log_softmax(logits.row(s))).collect::<Vec<_>>();
    }
    let per_pair: Vec<f64> = pairs
        .iter()
        .map(|&(a, b)| {
            (0..n)
                .map(|s| symmetric_kl(&log_probs[a][s], &log_probs[b][s]))
                .sum::<f64>()
                / n as f64
        })
        .collect();
    let mean = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
    if !mean.is_finite() {
        return Err(Error::Numerical("pairwise KL is not finite".into()));
    }
    Ok(PairwiseKl { mean, per_pair })
}

/// Euclidean distance between the rows of each pair.
pub fn pair_distances(emb: &Matrix, pairs: &[(usize, usize)]) -> Vec<f64> {
    pairs
        .iter()
        .map(|&(a, b)| euclidean(emb.row(a), emb.row(b)))
        .collect()
}

/// Spearman correlation of embedding distance against behavioral KL.
pub fn spearman_alignment(distances: &[f64], kls: &[f64]) -> Result<f64> {
    if distances.len() < 10 {
        return Err(Error::Parameter(format!(
            "alignment needs at least 10 pairs, got {}",
            distances.len()
        )));
    }
    spearman(distances, kls)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coherence {
    pub intra: f64,
    pub inter: f64,
    /// `intra / inter`; absent when `inter <= 0`.
    pub ratio: Option<f64>,
}

/// Mean same-label cosine over mean different-label cosine.
pub fn coherence_ratio(emb: &Matrix, labels: &[usize]) -> Result<Coherence> {
    if emb.rows != labels.len() {
        return Err(Error::Shape(format!("{} embeddings, {} labels", emb.rows, labels.len())));
    }
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 || counts.values().any(|&c| c < 2) {
        return Err(Error::Parameter(
            "coherence needs two or more personas with two or more trajectories each".into(),
        ));
    }
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..emb.rows {
        for j in i + 1..emb.rows {
            let c = cosine(emb.row(i), emb.row(j));
            if labels[i] == labels[j] {
                intra += c;
                n_intra += 1;
            } else {
                inter += c;
                n_inter += 1;
            }
        }
    }
    let intra = intra / n_intra as f64;
    let inter = inter / n_inter as f64;
    Ok(Coherence {
        intra,
        inter,
        ratio: (inter > 0.0).then(|| intra / inter),
    })
}

/// Flat per-run metrics, one CSV row per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_personas: usize,
    pub n_trajectories: usize,
    pub chance_level: f64,
    pub zs_top1: f64,
    pub zs_top1_low: f64,
    pub zs_top1_high: f64,
    pub zs_top3: f64,
    pub zs_top3_low: f64,
    pub zs_top3_high: f64,
    pub mean_reward: f64,
    pub mean_pairwise_kl: f64,
    pub kl_pairs: usize,
    pub kl_states: usize,
    pub spearman_rho: Option<f64>,
    pub spearman_rho_initial: Option<f64>,
    pub coherence_intra: f64,
    pub coherence_inter: f64,
    pub coherence_ratio: Option<f64>,
    pub latency_mean_ms: f64,
    pub latency_p95_ms: f64,
    pub hardware: String,
}

impl MetricsReport {
    /// Top-1 Wilson interval contains chance.
    pub fn collapsed(&self) -> bool {
        self.zs_top1_low <= self.chance_level && self.chance_level <= self.zs_top1_high
    }

    /// Copy with wall-clock fields cleared, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self {
            latency_mean_ms: 0.0,
            latency_p95_ms: 0.0,
            ..self.clone()
        }
    }

    pub fn write_csv(reports: &[MetricsReport], path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
        for r in reports {
            w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Raw material behind a report: plot data and per-persona breakdowns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifacts {
    /// `(persona_a, persona_b, distance, kl)` per evaluated pair.
    pub scatter: Vec<(u32, u32, f64, f64)>,
    /// `(persona_id, top1 accuracy)` for each held-out persona.
    pub per_persona_top1: Vec<(u32, f64)>,
    pub records: Vec<RetrievalRecord>,
}

/// Runs the whole protocol. Pairs and states come from the held-out
/// persona set and its evaluation rollouts.
pub fn evaluate(inputs: &EvalInputs<'_>, cfg: &EvalConfig) -> Result<(MetricsReport, EvalArtifacts)> {
    cfg.validate()?;
    let heldout = &inputs.split.heldout_ids;
    let zs = knn_zero_shot(inputs, cfg.episodes_per_persona, cfg.seed)?;
    let n = zs.retrieval.n();
    let (t1, t3) = (zs.retrieval.hits(1), zs.retrieval.hits(3));
    let ci1 = wilson_interval(t1, n, Z_95)?;
    let ci3 = wilson_interval(t3, n, Z_95)?;
    let mean_reward =
        zs.trajectories.iter().map(Trajectory::total_reward).sum::<f64>() / n as f64;

    let mut rng = rng_for(cfg.seed, &[tag::EVAL, 3]);
    let n_pairs = cfg.kl_pairs.min(heldout.len() * (heldout.len() - 1) / 2);
    let pairs = sample_pairs(heldout.len(), n_pairs, &mut rng)?;
    let states = sample_states(&zs.trajectories, cfg.kl_states, &mut rng)?;
    let cond = inputs.conditioning(heldout)?;
    let kl = pairwise_action_kl(&inputs.model.policy, &cond, &pairs, &states)?;
    let trained = inputs.project(&inputs.model.projection, heldout)?;
    let initial = inputs.project(inputs.initial_projection, heldout)?;
    let dist = pair_distances(&trained, &pairs);
    let rho = spearman_alignment(&dist, &kl.per_pair).ok();
    let rho_initial = spearman_alignment(&pair_distances(&initial, &pairs), &kl.per_pair).ok();
    let coherence = coherence_ratio(&zs.embeddings, &zs.labels)?;

    let probe_env = EnvState::reset(
        inputs.env,
        &heldout[..inputs.env.n_agents]
            .iter()
            .map(|&id| &inputs.corpus[id as usize])
            .collect::<Vec<_>>(),
        derive_seed(cfg.seed, &[tag::EVAL, 4]),
    )?;
    let lat = latency_benchmark(
        &inputs.model.policy,
        cond.row(0),
        &probe_env,
        cfg.latency_trials,
        cfg.latency_warmup,
    )?;

    let mut per_persona = vec![(0usize, 0usize); heldout.len()];
    for r in &zs.retrieval.records {
        per_persona[r.truth].1 += 1;
        if r.rank == 1 {
            per_persona[r.truth].0 += 1;
        }
    }
    let artifacts = EvalArtifacts {
        scatter: pairs
            .iter()
            .zip(&dist)
            .zip(&kl.per_pair)
            .map(|((&(a, b), &d), &k)| (heldout[a], heldout[b], d, k))
            .collect(),
        per_persona_top1: per_persona
            .iter()
            .zip(heldout)
            .map(|(&(h, c), &id)| (id, h as f64 / c.max(1) as f64))
            .collect(),
        records: zs.retrieval.records.clone(),
    };
    let report = MetricsReport {
        n_personas: heldout.len(),
        n_trajectories: n,
        chance_level: inputs.split.chance_level(),
        zs_top1: zs.retrieval.top_k(1),
        zs_top1_low: ci1.0,
        zs_top1_high: ci1.1,
        zs_top3: zs.retrieval.top_k(3),
        zs_top3_low: ci3.0,
        zs_top3_high: ci3.1,
        mean_reward,
        mean_pairwise_kl: kl.mean,
        kl_pairs: pairs.len(),
        kl_states: states.rows,
        spearman_rho: rho,
        spearman_rho_initial: rho_initial,
        coherence_intra: coherence.intra,
        coherence_inter: coherence.inter,
        coherence_ratio: coherence.ratio,
        latency_mean_ms: lat.mean_ms,
        latency_p95_ms: lat.p95_ms,
        hardware: lat.hardware.describe(),
    };
    Ok((report, artifacts))
}
