//! Co-training loop: PPO on rollouts from lockstep environments, plus the
//! InfoNCE consistency term and the KL diversity term, optimized jointly
//! with Adam.

pub mod losses;
pub mod optim;

use std::io::Write;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{EmbeddingTable, ProjectionParams, ProjectionRecord};
use crate::env::rollout::{collect, ActionSelection, Actor, Trajectory};
use crate::env::{EnvConfig, EnvState};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{Conditioning, EncoderInput, Model, ModelConfig, HIDDEN};
use crate::persona::{CorpusSplit, PersonaRecord};
use crate::seeding::{derive_seed, rng_for, tag};

use losses::{
    compute_gae, infonce_loss, kl_diversity_loss, normalize_advantages, ppo_loss, PpoBatch,
    PpoCoefficients, PpoStats,
};
use optim::{clip_groups, Adam, AdamConfig};

#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoConsist,
    NoDiverse,
    Concat,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoConsist,
        Ablation::NoDiverse,
        Ablation::Concat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoConsist => "no_consist",
            Ablation::NoDiverse => "no_diverse",
            Ablation::Concat => "concat",
        }
    }

    pub fn conditioning(self) -> Conditioning {
        match self {
            Ablation::Concat => Conditioning::Concat,
            _ => Conditioning::Film,
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config("ablation", format!("unknown ablation '{s}'")))
    }
}

/// Which losses feed gradients into the persona projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionGrad {
    EndToEnd,
    ConsistOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub infonce_temperature: f64,
    pub gamma: f64,
    pub clip_epsilon: f64,
    pub gae_lambda: f64,
    pub batch_size: usize,
    pub minibatch_size: usize,
    pub epochs: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub diversity_personas: usize,
    pub diversity_states: usize,
    pub contrastive_batch: usize,
    pub contrastive_pool: usize,
    pub projection_lr: f64,
    pub policy_lr: f64,
    /// Per-network gradient norm cap; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    pub normalize_advantages: bool,
    pub projection_grad: ProjectionGrad,
    pub encoder_obs_concat: bool,
    pub hidden: [usize; 3],
    pub iterations: usize,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.1,
            infonce_temperature: 0.07,
            gamma: 0.99,
            clip_epsilon: 0.2,
            gae_lambda: 0.95,
            batch_size: 2048,
            minibatch_size: 256,
            epochs: 4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            diversity_personas: 8,
            diversity_states: 32,
            contrastive_batch: 16,
            contrastive_pool: 64,
            projection_lr: 1e-4,
            policy_lr: 3e-4,
            max_grad_norm: Some(0.5),
            normalize_advantages: true,
            projection_grad: ProjectionGrad::EndToEnd,
            encoder_obs_concat: false,
            hidden: HIDDEN,
            iterations: 300,
            seed: 0,
            ablation: Ablation::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(format!("train.{field}"), msg));
        if !(self.lambda1 >= 0.0) {
            return bad("lambda1", "must be >= 0");
        }
        if !(self.lambda2 >= 0.0) {
            return bad("lambda2", "must be >= 0");
        }
        if !(self.infonce_temperature > 0.0) {
            return bad("infonce_temperature", "must be > 0");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon", "must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda", "must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be > 0");
        }
        if self.minibatch_size == 0 || self.minibatch_size > self.batch_size {
            return bad("minibatch_size", "must be in 1..=batch_size");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be > 0");
        }
        if self.diversity_personas < 2 {
            return bad("diversity_personas", "must be >= 2");
        }
        if self.diversity_states == 0 {
            return bad("diversity_states", "must be > 0");
        }
        if self.contrastive_batch == 0 || self.contrastive_pool < self.contrastive_batch {
            return bad("contrastive_batch", "must be in 1..=contrastive_pool");
        }
        if !(self.projection_lr >= 0.0) || !(self.policy_lr >= 0.0) {
            return bad("policy_lr", "learning rates must be >= 0");
        }
        if self.max_grad_norm.is_some_and(|m| !(m > 0.0)) {
            return bad("max_grad_norm", "must be > 0 when set");
        }
        if self.hidden.contains(&0) {
            return bad("hidden", "widths must be > 0");
        }
        Ok(())
    }

    /// Consistency weight after the ablation switch.
    pub fn effective_lambda1(&self) -> f64 {
        if self.ablation == Ablation::NoConsist {
            0.0
        } else {
            self.lambda1
        }
    }

    pub fn effective_lambda2(&self) -> f64 {
        if self.ablation == Ablation::NoDiverse {
            0.0
        } else {
            self.lambda2
        }
    }

    fn ppo_coefficients(&self) -> PpoCoefficients {
        PpoCoefficients {
            clip_epsilon: self.clip_epsilon,
            value_coef: self.value_coef,
            entropy_coef: self.entropy_coef,
        }
    }
}

/// Where the policy's conditioning vectors come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningSource {
    /// Projected persona embeddings (the method).
    Projected,
    /// One fixed vector for every agent (no-persona baseline).
    Constant(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: u64,
    pub env_steps: u64,
    /// Mean undiscounted return per agent episode.
    pub mean_episode_reward: f64,
    pub reward_needs: f64,
    pub reward_persona: f64,
    pub reward_social: f64,
    pub reward_style: f64,
    /// `loss_ppo + lambda1 * loss_consist + lambda2 * loss_diverse`.
    pub loss_total: f64,
    pub loss_ppo: f64,
    pub loss_policy: f64,
    pub loss_value: f64,
    pub entropy: f64,
    pub loss_consist: f64,
    pub loss_diverse: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm_projection: f64,
    pub grad_norm_rest: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PoolEntry {
    persona_id: u32,
    actions: Vec<usize>,
    observations: Option<Vec<Vec<f64>>>,
}

/// Flattened rollout ready for minibatching.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub obs: Matrix,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Row of the iteration's persona list each transition belongs to.
    pub persona_index: Vec<usize>,
    pub persona_ids: Vec<u32>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct StepStats {
    ppo: PpoStats,
    consist: f64,
    diverse: f64,
    grad_proj: f64,
    grad_rest: f64,
}

/// Mutable state of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub env: EnvConfig,
    pub corpus: Vec<PersonaRecord>,
    pub split: CorpusSplit,
    pub embeddings: EmbeddingTable,
    pub source: ConditioningSource,
    pub model: Model,
    /// Projection as initialized, kept for before/after comparisons.
    pub initial_projection: ProjectionParams,
    pub iteration: u64,
    adam: Adam,
    pool: Vec<PoolEntry>,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        env: EnvConfig,
        corpus: Vec<PersonaRecord>,
        split: CorpusSplit,
        embeddings: EmbeddingTable,
        source: ConditioningSource,
    ) -> Result<Self> {
        config.validate()?;
        env.validate()?;
        let per_env = env.n_agents * env.episode_len;
        if config.batch_size % per_env != 0 {
            return Err(Error::config(
                "train.batch_size",
                format!(
                    "{} is not a multiple of agents x episode length = {per_env}",
                    config.batch_size
                ),
            ));
        }
        let needed = config.batch_size / per_env * env.n_agents;
        if split.train_ids.len() < needed.max(config.diversity_personas) {
            return Err(Error::config(
                "split",
                format!(
                    "{} train personas cannot fill {needed} agent slots",
                    split.train_ids.len()
                ),
            ));
        }
        if embeddings.len() != corpus.len() {
            return Err(Error::config("embedding", "embedding table does not cover the corpus"));
        }
        let mut model_cfg = ModelConfig::new(
            env.obs_dim(),
            crate::env::ontology::ActionOntology::new(env.ontology).len(),
            config.ablation.conditioning(),
        );
        model_cfg.raw_dim = embeddings.dim();
        model_cfg.hidden = config.hidden;
        model_cfg.encoder_obs_concat = config.encoder_obs_concat;
        if let ConditioningSource::Constant(c) = &source {
            if c.len() != model_cfg.embed_dim {
                return Err(Error::config("baseline.constant", "constant conditioning width mismatch"));
            }
            if config.effective_lambda1() > 0.0 || config.effective_lambda2() > 0.0 {
                return Err(Error::config(
                    "baseline",
                    "constant conditioning requires lambda1 = lambda2 = 0",
                ));
            }
        }
        let model = Model::init(model_cfg, config.seed);
        let adam = Adam::new(&model, AdamConfig::default());
        Ok(Self {
            initial_projection: model.projection.clone(),
            config,
            env,
            corpus,
            split,
            embeddings,
            source,
            model,
            iteration: 0,
            adam,
            pool: Vec::new(),
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.config
    }

    /// SHA-256 over the serialized training, environment and model config.
    pub fn config_hash(&self) -> [u8; 32] {
        let text = serde_json::json!({
            "train": self.config,
            "env": self.env,
            "model": self.model.config,
            "source": self.source,
        })
        .to_string();
        Sha256::digest(text.as_bytes()).into()
    }

    /// Conditioning rows for `ids` under the current parameters.
    pub fn conditioning(&self, ids: &[u32]) -> Result<Matrix> {
        Ok(self.conditioning_recorded(ids)?.0)
    }

    fn conditioning_recorded(&self, ids: &[u32]) -> Result<(Matrix, Option<ProjectionRecord>)> {
        match &self.source {
            ConditioningSource::Projected => {
                let (m, rec) = self.model.projection.project_batch(&self.embeddings.rows(ids))?;
                Ok((m, Some(rec)))
            }
            ConditioningSource::Constant(c) => {
                let mut m = Matrix::zeros(ids.len(), c.len());
                for i in 0..ids.len() {
                    m.row_mut(i).copy_from_slice(c);
                }
                Ok((m, None))
            }
        }
    }

    fn persona(&self, id: u32) -> &PersonaRecord {
        &self.corpus[id as usize]
    }

    /// Collects one batch of on-policy experience.
    pub fn collect_rollouts(&self, rng: &mut impl Rng) -> Result<(Vec<Trajectory>, Vec<u32>)> {
        let n_agents = self.env.n_agents;
        let n_envs = self.config.batch_size / (n_agents * self.env.episode_len);
        let mut ids = self.split.train_ids.clone();
        ids.shuffle(rng);
        ids.truncate(n_envs * n_agents);
        let cond = self.conditioning(&ids)?;
        let mut envs = Vec::with_capacity(n_envs);
        for e in 0..n_envs {
            let personas: Vec<&PersonaRecord> = ids[e * n_agents..(e + 1) * n_agents]
                .iter()
                .map(|&id| self.persona(id))
                .collect();
            let seed = derive_seed(self.config.seed, &[tag::ENV, self.iteration, e as u64]);
            envs.push(EnvState::reset(&self.env, &personas, seed)?);
        }
        let actor = Actor {
            policy: &self.model.policy,
            value: Some(&self.model.value),
            cond: &cond,
        };
        let index: Vec<usize> = (0..ids.len()).collect();
        let trajs = collect(actor, envs, &index, ActionSelection::Sample, rng)?;
        Ok((trajs, ids))
    }

    fn build_batch(&self, trajs: &[Trajectory], ids: Vec<u32>) -> Result<RolloutBatch> {
        let n: usize = trajs.iter().map(Trajectory::len).sum();
        let obs_dim = self.model.config.obs_dim;
        let mut batch = RolloutBatch {
            obs: Matrix::zeros(n, obs_dim),
            actions: Vec::with_capacity(n),
            old_log_probs: Vec::with_capacity(n),
            advantages: Vec::with_capacity(n),
            returns: Vec::with_capacity(n),
            persona_index: Vec::with_capacity(n),
            persona_ids: ids,
        };
        let mut row = 0;
        for (k, t) in trajs.iter().enumerate() {
            let rewards: Vec<f64> = t.rewards.iter().map(|r| r.total()).collect();
            let mut values = t.values.clone();
            values.push(0.0);
            let mut dones = vec![false; t.len()];
            if let Some(last) = dones.last_mut() {
                *last = true;
            }
            let (adv, ret) =
                compute_gae(&rewards, &values, &dones, self.config.gamma, self.config.gae_lambda)?;
            for s in 0..t.len() {
                batch.obs.row_mut(row).copy_from_slice(&t.observations[s]);
                row += 1;
            }
            batch.actions.extend_from_slice(&t.actions);
            batch.old_log_probs.extend_from_slice(&t.log_probs);
            batch.advantages.extend(adv);
            batch.returns.extend(ret);
            batch.persona_index.extend(std::iter::repeat_n(k, t.len()));
        }
        if self.config.normalize_advantages {
            normalize_advantages(&mut batch.advantages);
        }
        Ok(batch)
    }

    fn update_pool(&mut self, trajs: &[Trajectory]) {
        let keep_obs = self.config.encoder_obs_concat;
        for t in trajs {
            self.pool.retain(|e| e.persona_id != t.persona_id);
            self.pool.push(PoolEntry {
                persona_id: t.persona_id,
                actions: t.actions.clone(),
                observations: keep_obs.then(|| t.observations.clone()),
            });
        }
        let excess = self.pool.len().saturating_sub(self.config.contrastive_pool);
        self.pool.drain(..excess);
    }

    /// Runs one collection + optimization iteration.
    pub fn train_iteration(&mut self) -> Result<IterationMetrics> {
        let mut rng = rng_for(self.config.seed, &[tag::ROLLOUT, self.iteration]);
        let (trajs, ids) = self.collect_rollouts(&mut rng)?;
        let batch = self.build_batch(&trajs, ids)?;
        self.update_pool(&trajs);

        let mut urng = rng_for(self.config.seed, &[tag::UPDATE, self.iteration]);
        let mut grads = self.model.zeros_like();
        let mut order: Vec<usize> = (0..batch.len()).collect();
        let mut sum = StepStats::default();
        let mut steps = 0usize;
        for _ in 0..self.config.epochs {
            order.shuffle(&mut urng);
            for chunk in order.chunks(self.config.minibatch_size) {
                grads.zero();
                let mut st = self.gradient_step(&batch, chunk, &mut urng, &mut grads)?;
                let (gp, gr) = match self.config.max_grad_norm {
                    Some(m) => clip_groups(&mut grads, m),
                    None => optim::group_norms(&grads),
                };
                st.grad_proj = gp;
                st.grad_rest = gr;
                if !(gp.is_finite() && gr.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "non-finite gradient norm at iteration {}",
                        self.iteration
                    )));
                }
                self.adam.step(
                    &mut self.model,
                    &grads,
                    self.config.projection_lr,
                    self.config.policy_lr,
                );
                accumulate(&mut sum, &st);
                steps += 1;
            }
        }
        if !self.model.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite parameters after iteration {}",
                self.iteration
            )));
        }
        let k = 1.0 / steps as f64;
        let l1 = self.config.effective_lambda1();
        let l2 = self.config.effective_lambda2();
        let n_traj = trajs.len() as f64;
        let part = |f: fn(&crate::env::RewardParts) -> f64| {
            trajs
                .iter()
                .map(|t| t.rewards.iter().map(f).sum::<f64>())
                .sum::<f64>()
                / n_traj
        };
        let loss_ppo = sum.ppo.loss * k;
        let loss_consist = sum.consist * k;
        let loss_diverse = sum.diverse * k;
        let m = IterationMetrics {
            iteration: self.iteration,
            env_steps: (self.iteration + 1) * batch.len() as u64,
            mean_episode_reward: trajs.iter().map(Trajectory::total_reward).sum::<f64>() / n_traj,
            reward_needs: part(|r| r.needs),
            reward_persona: part(|r| r.persona),
            reward_social: part(|r| r.social),
            reward_style: part(|r| r.style),
            loss_total: loss_ppo + l1 * loss_consist + l2 * loss_diverse,
            loss_ppo,
            loss_policy: sum.ppo.surrogate * k,
            loss_value: sum.ppo.value_loss * k,
            entropy: sum.ppo.entropy * k,
            loss_consist,
            loss_diverse,
            lambda1: l1,
            lambda2: l2,
            approx_kl: sum.ppo.approx_kl * k,
            clip_fraction: sum.ppo.clip_fraction * k,
            grad_norm_projection: sum.grad_proj * k,
            grad_norm_rest: sum.grad_rest * k,
        };
        if !m.loss_total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at iteration {}",
                self.iteration
            )));
        }
        self.iteration += 1;
        Ok(m)
    }

    fn project_grads(&self) -> bool {
        self.config.projection_grad == ProjectionGrad::EndToEnd
    }

    fn gradient_step(
        &self,
        batch: &RolloutBatch,
        rows: &[usize],
        rng: &mut impl Rng,
        grads: &mut Model,
    ) -> Result<StepStats> {
        let mut st = StepStats::default();
        let model = &self.model;

        // PPO on the minibatch
        let (cond, proj_rec) = self.conditioning_recorded(&batch.persona_ids)?;
        let obs = batch.obs.select_rows(rows);
        let idx: Vec<usize> = rows.iter().map(|&r| batch.persona_index[r]).collect();
        let (logits, prec) = model.policy.forward_recorded(&obs, &cond, &idx)?;
        let (values, vrec) = model.value.forward_recorded(&obs, &cond, &idx)?;
        let pick = |v: &[f64]| rows.iter().map(|&r| v[r]).collect::<Vec<f64>>();
        let actions: Vec<usize> = rows.iter().map(|&r| batch.actions[r]).collect();
        let (old, adv, ret) = (
            pick(&batch.old_log_probs),
            pick(&batch.advantages),
            pick(&batch.returns),
        );
        let (ppo, g) = ppo_loss(
            &logits,
            &values,
            PpoBatch {
                actions: &actions,
                old_log_probs: &old,
                advantages: &adv,
                returns: &ret,
            },
            self.config.ppo_coefficients(),
        )?;
        st.ppo = ppo;
        let mut d_cond = model.policy.backward(&prec, &g.d_logits, &mut grads.policy);
        d_cond.add_assign(&model.value.backward(&vrec, &g.d_values, &mut grads.value));
        if let (Some(rec), true) = (&proj_rec, self.project_grads()) {
            model.projection.backward(rec, &d_cond, &mut grads.projection);
        }

        let l1 = self.config.effective_lambda1();
        if l1 > 0.0 && !self.pool.is_empty() {
            let b = self.config.contrastive_batch.min(self.pool.len());
            let picks = index::sample(rng, self.pool.len(), b).into_vec();
            let entries: Vec<&PoolEntry> = picks.iter().map(|&i| &self.pool[i]).collect();
            let inputs: Vec<EncoderInput<'_>> = entries
                .iter()
                .map(|e| EncoderInput {
                    actions: &e.actions,
                    observations: e.observations.as_deref(),
                })
                .collect();
            let (z, erec) = model.encoder.encode_batch_recorded(&inputs)?;
            let ids: Vec<u32> = entries.iter().map(|e| e.persona_id).collect();
            let (e, rec) = self.conditioning_recorded(&ids)?;
            let (loss, mut dz, mut de) = infonce_loss(&z, &e, self.config.infonce_temperature)?;
            st.consist = loss;
            dz.scale(l1);
            de.scale(l1);
            model.encoder.backward(&erec, &dz, &mut grads.encoder);
            if let Some(rec) = rec {
                model.projection.backward(&rec, &de, &mut grads.projection);
            }
        }

        let l2 = self.config.effective_lambda2();
        if l2 > 0.0 {
            let n = self.config.diversity_personas;
            let s = self.config.diversity_states;
            let ids: Vec<u32> = index::sample(rng, self.split.train_ids.len(), n)
                .into_iter()
                .map(|i| self.split.train_ids[i])
                .collect();
            let states: Vec<usize> = (0..s).map(|_| rng.random_range(0..batch.len())).collect();
            let (cond, rec) = self.conditioning_recorded(&ids)?;
            let mut obs = Matrix::zeros(n * s, batch.obs.cols);
            let mut idx = Vec::with_capacity(n * s);
            for p in 0..n {
                for (k, &r) in states.iter().enumerate() {
                    obs.row_mut(p * s + k).copy_from_slice(batch.obs.row(r));
                    idx.push(p);
                }
            }
            let (logits, prec) = model.policy.forward_recorded(&obs, &cond, &idx)?;
            let (loss, mut d) = kl_diversity_loss(&logits, n, s)?;
            st.diverse = loss;
            d.scale(l2);
            let d_cond = model.policy.backward(&prec, &d, &mut grads.policy);
            if let (Some(rec), true) = (&rec, self.project_grads()) {
                model.projection.backward(rec, &d_cond, &mut grads.projection);
            }
        }
        Ok(st)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut blobs = std::collections::BTreeMap::new();
        blobs.insert("adam".to_string(), self.adam.to_bytes());
        blobs.insert(
            "contrastive_pool".to_string(),
            serde_json::to_vec(&self.pool).expect("pool serializes"),
        );
        Checkpoint {
            ontology: self.env.ontology,
            step: self.iteration,
            config_hash: self.config_hash(),
            model: self.model.clone(),
            blobs,
        }
    }

    /// Restores parameters, optimizer, pool and iteration counter.
    pub fn restore(&mut self, ck: Checkpoint) -> Result<()> {
        if ck.config_hash != self.config_hash() {
            return Err(Error::config(
                "resume",
                "checkpoint was written under a different configuration",
            ));
        }
        let adam_bytes = ck
            .blobs
            .get("adam")
            .ok_or_else(|| Error::Format("checkpoint lacks optimizer state".into()))?;
        self.adam = Adam::from_bytes(&ck.model, AdamConfig::default(), adam_bytes)?;
        self.pool = match ck.blobs.get("contrastive_pool") {
            Some(b) => serde_json::from_slice(b).map_err(|e| Error::Format(e.to_string()))?,
            None => Vec::new(),
        };
        self.model = ck.model;
        self.iteration = ck.step;
        Ok(())
    }

    pub fn eval_inputs(&self) -> crate::eval::EvalInputs<'_> {
        crate::eval::EvalInputs {
            model: &self.model,
            initial_projection: &self.initial_projection,
            source: &self.source,
            env: &self.env,
            corpus: &self.corpus,
            embeddings: &self.embeddings,
            split: &self.split,
        }
    }

    /// Encoder parameters only, for purity checks.
    pub fn encoder_fingerprint(&self) -> Vec<u8> {
        let mut h = Sha256::new();
        for (_, t) in self.model.encoder.tensors("encoder") {
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().to_vec()
    }
}

fn accumulate(sum: &mut StepStats, st: &StepStats) {
    sum.ppo.loss += st.ppo.loss;
    sum.ppo.surrogate += st.ppo.surrogate;
    sum.ppo.value_loss += st.ppo.value_loss;
    sum.ppo.entropy += st.ppo.entropy;
    sum.ppo.approx_kl += st.ppo.approx_kl;
    sum.ppo.clip_fraction += st.ppo.clip_fraction;
    sum.consist += st.consist;
    sum.diverse += st.diverse;
    sum.grad_proj += st.grad_proj;
    sum.grad_rest += st.grad_rest;
}

/// Appends one JSON line per iteration.
pub struct MetricsWriter {
    file: std::io::BufWriter<std::fs::File>,
    path: std::path::PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file: std::io::BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, m: &IterationMetrics) -> Result<()> {
        let line = serde_json::to_string(m).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<IterationMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}
