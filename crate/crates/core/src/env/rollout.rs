//! Episode driver: runs any number of environments in lockstep under one
//! conditioned policy, batching the network forward across every agent of
//! every environment.

use std::io::{BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{log_softmax, Matrix};
use crate::nn::ConditionedMlp;
use crate::persona::PersonaRecord;
use crate::seeding::{derive_seed, rng_for, tag};

use super::{EnvConfig, EnvState, RewardParts};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSelection {
    Sample,
    Greedy,
}

/// Policy, optional value head, and the conditioning rows they read.
#[derive(Debug, Clone, Copy)]
pub struct Actor<'a> {
    pub policy: &'a ConditionedMlp,
    pub value: Option<&'a ConditionedMlp>,
    pub cond: &'a Matrix,
}

/// One agent's episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub persona_id: u32,
    pub agent: usize,
    /// Observation seen before each action.
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub logits: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    /// Value estimates; empty when the actor had no value head.
    pub values: Vec<f64>,
    pub rewards: Vec<RewardParts>,
}

impl Trajectory {
    fn new(persona_id: u32, agent: usize, len: usize) -> Self {
        Self {
            persona_id,
            agent,
            observations: Vec::with_capacity(len),
            actions: Vec::with_capacity(len),
            logits: Vec::with_capacity(len),
            log_probs: Vec::with_capacity(len),
            values: Vec::with_capacity(len),
            rewards: Vec::with_capacity(len),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().map(RewardParts::total).sum()
    }
}

/// Runs `envs` to completion. `cond_index[e * n_agents + i]` selects the
/// conditioning row of agent `i` in environment `e`. Trajectories are
/// returned in the same env-major order.
pub fn collect(
    actor: Actor<'_>,
    mut envs: Vec<EnvState>,
    cond_index: &[usize],
    selection: ActionSelection,
    rng: &mut impl Rng,
) -> Result<Vec<Trajectory>> {
    let Some(first) = envs.first() else {
        return Ok(Vec::new());
    };
    let n_agents = first.agents.len();
    let obs_dim = first.obs_dim();
    let n_actions = first.n_actions();
    if envs
        .iter()
        .any(|e| e.agents.len() != n_agents || e.obs_dim() != obs_dim)
    {
        return Err(Error::Shape("environments in one batch must share a shape".into()));
    }
    if actor.policy.shape.out_dim != n_actions {
        return Err(Error::Shape(format!(
            "policy emits {} logits for {} actions",
            actor.policy.shape.out_dim, n_actions
        )));
    }
    let rows = envs.len() * n_agents;
    if cond_index.len() != rows {
        return Err(Error::Shape(format!(
            "{} conditioning indices for {rows} agents",
            cond_index.len()
        )));
    }
    let episode_len = first.config.episode_len;
    let mut trajs: Vec<Trajectory> = envs
        .iter()
        .flat_map(|e| {
            e.agents
                .iter()
                .enumerate()
                .map(|(i, a)| Trajectory::new(a.persona_id, i, episode_len))
        })
        .collect();
    let mut obs = Matrix::zeros(rows, obs_dim);
    let mut joint = vec![0usize; n_agents];
    while !envs[0].is_done() {
        for (e, env) in envs.iter().enumerate() {
            for i in 0..n_agents {
                env.observe_into(i, obs.row_mut(e * n_agents + i));
            }
        }
        let logits = actor.policy.forward(&obs, actor.cond, cond_index)?;
        let values = match actor.value {
            Some(v) => Some(v.forward(&obs, actor.cond, cond_index)?),
            None => None,
        };
        for (e, env) in envs.iter_mut().enumerate() {
            for (i, slot) in joint.iter_mut().enumerate() {
                let r = e * n_agents + i;
                let lrow = logits.row(r);
                let lp = log_softmax(lrow);
                if lp.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "non-finite policy output for persona {}",
                        trajs[r].persona_id
                    )));
                }
                let a = match selection {
                    ActionSelection::Greedy => argmax(lrow),
                    ActionSelection::Sample => {
                        let probs = lp.iter().map(|v| v.exp());
                        WeightedIndex::new(probs)
                            .map_err(|e| Error::Numerical(format!("action sampling: {e}")))?
                            .sample(rng)
                    }
                };
                *slot = a;
                let t = &mut trajs[r];
                t.observations.push(obs.row(r).to_vec());
                t.actions.push(a);
                t.logits.push(lrow.to_vec());
                t.log_probs.push(lp[a]);
                if let Some(v) = &values {
                    t.values.push(v.get(r, 0));
                }
            }
            let (rewards, _) = env.step(&joint)?;
            for (i, rw) in rewards.into_iter().enumerate() {
                trajs[e * n_agents + i].rewards.push(rw);
            }
        }
    }
    Ok(trajs)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Single-environment episode with agent `i` conditioned on `actor.cond`
/// row `i`.
pub fn rollout(
    actor: Actor<'_>,
    config: &EnvConfig,
    personas: &[&PersonaRecord],
    seed: u64,
    selection: ActionSelection,
) -> Result<Vec<Trajectory>> {
    let env = EnvState::reset(config, personas, derive_seed(seed, &[tag::ENV]))?;
    let index: Vec<usize> = (0..personas.len()).collect();
    let mut rng = rng_for(seed, &[tag::ROLLOUT]);
    collect(actor, vec![env], &index, selection, &mut rng)
}

#[derive(Serialize)]
struct StepRecord<'a> {
    persona_id: u32,
    agent: usize,
    step: usize,
    obs: &'a [f64],
    action: usize,
    reward: RewardParts,
    reward_total: f64,
    logits: &'a [f64],
}

/// Writes one JSON line per agent step.
pub fn write_trajectories(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in trajs {
        for step in 0..t.len() {
            let rec = StepRecord {
                persona_id: t.persona_id,
                agent: t.agent,
                step,
                obs: &t.observations[step],
                action: t.actions[step],
                reward: t.rewards[step],
                reward_total: t.rewards[step].total(),
                logits: &t.logits[step],
            };
            serde_json::to_writer(&mut w, &rec).map_err(|e| Error::Format(e.to_string()))?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
