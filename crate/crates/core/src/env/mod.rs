//! The diagnostic life-simulation grid world: agents with eight decaying
//! needs, a discrete action ontology, and a reward made of needs
//! satisfaction, persona bonuses, pairwise social bonuses and (v3) a
//! persona-style term.

pub mod ontology;
pub mod rollout;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::cosine;
use crate::persona::{BigFiveVector, PersonaRecord};
use crate::seeding::{rng_for, tag};

use ontology::{ActionKind, ActionOntology, OntologyVersion, N_NEEDS};

pub const EPISODE_LEN: usize = 128;
pub const HISTORY_LEN: usize = 8;
const N_AFFORDANCES: usize = N_NEEDS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConstants {
    pub need_decay: f64,
    pub persona_bonus: f64,
    pub social_base: f64,
    pub social_scale: f64,
    pub style_scale: f64,
    /// Chebyshev radius for the social bonus and social-context features.
    pub social_radius: i32,
}

impl Default for RewardConstants {
    fn default() -> Self {
        Self {
            need_decay: 0.01,
            persona_bonus: 0.5,
            social_base: 0.2,
            social_scale: 0.3,
            style_scale: 0.3,
            social_radius: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub grid_w: usize,
    pub grid_h: usize,
    pub n_agents: usize,
    pub ontology: OntologyVersion,
    pub episode_len: usize,
    #[serde(default)]
    pub rewards: RewardConstants,
}

impl EnvConfig {
    pub fn new(grid: usize, n_agents: usize, ontology: OntologyVersion) -> Self {
        Self {
            grid_w: grid,
            grid_h: grid,
            n_agents,
            ontology,
            episode_len: EPISODE_LEN,
            rewards: RewardConstants::default(),
        }
    }

    /// position 2 + time 1 + needs 8 + 3 per other agent, plus
    /// affordance 8 + social context 3 + routine 2 under v3.
    pub fn obs_dim(&self) -> usize {
        let base = 2 + 1 + N_NEEDS + 3 * (self.n_agents - 1);
        match self.ontology {
            OntologyVersion::V1 => base,
            OntologyVersion::V3 => base + N_AFFORDANCES + 3 + 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_w < 1 || self.grid_h < 1 {
            return Err(Error::config("env.grid", "grid must be at least 1x1"));
        }
        if self.n_agents < 2 {
            return Err(Error::config("env.n_agents", "need at least 2 agents"));
        }
        if self.n_agents > self.grid_w * self.grid_h {
            return Err(Error::config(
                "env.n_agents",
                format!(
                    "{} agents cannot occupy distinct cells of a {}x{} grid",
                    self.n_agents, self.grid_w, self.grid_h
                ),
            ));
        }
        if self.episode_len == 0 {
            return Err(Error::config("env.episode_len", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardParts {
    pub needs: f64,
    pub persona: f64,
    pub social: f64,
    pub style: f64,
}

impl RewardParts {
    pub fn total(&self) -> f64 {
        self.needs + self.persona + self.social + self.style
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub x: i32,
    pub y: i32,
    pub needs: [f64; N_NEEDS],
    pub persona_id: u32,
    pub big_five: BigFiveVector,
    pub preferred_actions: Vec<usize>,
    pub last_action: Option<usize>,
    /// Most recent actions, oldest first, at most `HISTORY_LEN`.
    pub history: Vec<usize>,
    pub steps_since_change: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub config: EnvConfig,
    pub ontology: ActionOntology,
    pub step_index: usize,
    pub agents: Vec<AgentState>,
    /// Per-cell need category, row-major; empty under v1.
    pub affordance_map: Vec<u8>,
    pub rng_state: ChaCha8Rng,
}

/// Splits the grid into eight contiguous zones along a serpentine cell
/// order and assigns them a seeded permutation of need categories.
fn affordance_layout(w: usize, h: usize, rng: &mut impl Rng) -> Vec<u8> {
    let mut order = Vec::with_capacity(w * h);
    for y in 0..h {
        if y % 2 == 0 {
            order.extend((0..w).map(|x| y * w + x));
        } else {
            order.extend((0..w).rev().map(|x| y * w + x));
        }
    }
    let mut needs: Vec<u8> = (0..N_AFFORDANCES as u8).collect();
    needs.shuffle(rng);
    let mut map = vec![0u8; w * h];
    let n = order.len();
    for (k, cell) in order.into_iter().enumerate() {
        let zone = (k * N_AFFORDANCES / n).min(N_AFFORDANCES - 1);
        map[cell] = needs[zone];
    }
    map
}

impl EnvState {
    pub fn reset(config: &EnvConfig, personas: &[&PersonaRecord], seed: u64) -> Result<Self> {
        config.validate()?;
        if personas.len() != config.n_agents {
            return Err(Error::config(
                "env.n_agents",
                format!(
                    "{} personas supplied for {} agents",
                    personas.len(),
                    config.n_agents
                ),
            ));
        }
        let ontology = ActionOntology::new(config.ontology);
        for p in personas {
            if p.preferred_actions.iter().any(|&a| a >= ontology.len()) {
                return Err(Error::config(
                    "env.ontology",
                    format!(
                        "persona {} prefers actions outside the {:?} ontology",
                        p.persona_id, config.ontology
                    ),
                ));
            }
        }
        let mut rng = rng_for(seed, &[tag::ENV]);
        let cells = config.grid_w * config.grid_h;
        let picks = rand::seq::index::sample(&mut rng, cells, config.n_agents);
        let agents = personas
            .iter()
            .zip(picks.iter())
            .map(|(p, cell)| {
                let mut needs = [0.0; N_NEEDS];
                needs
                    .iter_mut()
                    .for_each(|n| *n = rng.random_range(0.4..=0.8));
                AgentState {
                    x: (cell % config.grid_w) as i32,
                    y: (cell / config.grid_w) as i32,
                    needs,
                    persona_id: p.persona_id,
                    big_five: p.big_five,
                    preferred_actions: p.preferred_actions.clone(),
                    last_action: None,
                    history: Vec::with_capacity(HISTORY_LEN),
                    steps_since_change: 0,
                }
            })
            .collect();
        let affordance_map = match config.ontology {
            OntologyVersion::V1 => Vec::new(),
            OntologyVersion::V3 => affordance_layout(config.grid_w, config.grid_h, &mut rng),
        };
        Ok(Self {
            config: *config,
            ontology,
            step_index: 0,
            agents,
            affordance_map,
            rng_state: rng,
        })
    }

    pub fn n_actions(&self) -> usize {
        self.ontology.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.config.obs_dim()
    }

    fn chebyshev(a: &AgentState, b: &AgentState) -> i32 {
        (a.x - b.x).abs().max((a.y - b.y).abs())
    }

    pub fn observe(&self, agent: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.obs_dim()];
        self.observe_into(agent, &mut out);
        out
    }

    /// Writes the observation of `agent` into `out` (length `obs_dim`).
    pub fn observe_into(&self, agent: usize, out: &mut [f64]) {
        let cfg = &self.config;
        let me = &self.agents[agent];
        let n_actions = self.n_actions() as f64;
        let mut k = 0;
        let mut put = |v: f64| {
            out[k] = v;
            k += 1;
        };
        put(me.x as f64 / (cfg.grid_w.max(2) - 1) as f64);
        put(me.y as f64 / (cfg.grid_h.max(2) - 1) as f64);
        put(self.step_index as f64 / cfg.episode_len as f64);
        for &n in &me.needs {
            put(n);
        }
        for (j, other) in self.agents.iter().enumerate() {
            if j == agent {
                continue;
            }
            put((other.x - me.x) as f64 / cfg.grid_w as f64);
            put((other.y - me.y) as f64 / cfg.grid_h as f64);
            put(other.last_action.map_or(0.0, |a| a as f64 / n_actions));
        }
        if cfg.ontology == OntologyVersion::V3 {
            let zone = self.affordance_map[me.y as usize * cfg.grid_w + me.x as usize] as usize;
            for z in 0..N_AFFORDANCES {
                put(if z == zone { 1.0 } else { 0.0 });
            }
            let radius = cfg.rewards.social_radius;
            let (mut neighbors, mut cos_sum, mut same_cell) = (0usize, 0.0, false);
            for (j, other) in self.agents.iter().enumerate() {
                if j == agent {
                    continue;
                }
                let d = Self::chebyshev(me, other);
                if d <= radius {
                    neighbors += 1;
                    cos_sum += me.big_five.cosine(&other.big_five);
                }
                same_cell |= d == 0;
            }
            put(neighbors as f64 / (cfg.n_agents - 1) as f64);
            put(if neighbors > 0 {
                cos_sum / neighbors as f64
            } else {
                0.0
            });
            put(if same_cell { 1.0 } else { 0.0 });
            let mode_frac = if me.history.is_empty() {
                0.0
            } else {
                let mut counts = vec![0usize; self.n_actions()];
                me.history.iter().for_each(|&a| counts[a] += 1);
                *counts.iter().max().unwrap() as f64 / me.history.len() as f64
            };
            put(mode_frac);
            put((me.steps_since_change as f64 / HISTORY_LEN as f64).min(1.0));
        }
        debug_assert_eq!(k, out.len());
    }

    pub fn is_done(&self) -> bool {
        self.step_index >= self.config.episode_len
    }

    /// Applies one joint action. Agents resolve in index order; returns the
    /// per-agent reward decomposition and whether the episode ended.
    pub fn step(&mut self, joint_actions: &[usize]) -> Result<(Vec<RewardParts>, bool)> {
        if self.is_done() {
            return Err(Error::State("step called on a finished episode".into()));
        }
        if joint_actions.len() != self.agents.len() {
            return Err(Error::Shape(format!(
                "{} actions for {} agents",
                joint_actions.len(),
                self.agents.len()
            )));
        }
        let n_actions = self.n_actions();
        if let Some((agent, &action)) = joint_actions
            .iter()
            .enumerate()
            .find(|(_, &a)| a >= n_actions)
        {
            return Err(Error::Action {
                agent,
                action,
                n_actions,
            });
        }
        let cfg = self.config;
        let rc = cfg.rewards;
        let mut rewards = vec![RewardParts::default(); self.agents.len()];
        for (i, &action) in joint_actions.iter().enumerate() {
            let desc = &self.ontology.actions[action];
            let agent = &mut self.agents[i];
            match desc.kind {
                ActionKind::Movement => {
                    let (dx, dy) = desc.direction.expect("movement has a direction").delta();
                    agent.x = (agent.x + dx).clamp(0, cfg.grid_w as i32 - 1);
                    agent.y = (agent.y + dy).clamp(0, cfg.grid_h as i32 - 1);
                }
                ActionKind::Activity => {
                    let need = desc.target_need.expect("activity has a target need");
                    let level = agent.needs[need];
                    rewards[i].needs = desc.gain * (1.0 - level);
                    agent.needs[need] = (level + desc.gain).min(1.0);
                    if cfg.ontology == OntologyVersion::V3 {
                        rewards[i].style = rc.style_scale
                            * cosine(&agent.big_five.to_array(), &desc.style_profile);
                    }
                }
            }
            if agent.preferred_actions.contains(&action) {
                rewards[i].persona = rc.persona_bonus;
            }
        }
        for i in 0..self.agents.len() {
            if !self.ontology.is_social(joint_actions[i]) {
                continue;
            }
            for j in i + 1..self.agents.len() {
                if !self.ontology.is_social(joint_actions[j]) {
                    continue;
                }
                let (a, b) = (&self.agents[i], &self.agents[j]);
                if Self::chebyshev(a, b) <= rc.social_radius {
                    let bonus = rc.social_base + rc.social_scale * a.big_five.cosine(&b.big_five);
                    rewards[i].social += bonus;
                    rewards[j].social += bonus;
                }
            }
        }
        for (agent, &action) in self.agents.iter_mut().zip(joint_actions) {
            agent
                .needs
                .iter_mut()
                .for_each(|n| *n = (*n - rc.need_decay).clamp(0.0, 1.0));
            if agent.last_action == Some(action) {
                agent.steps_since_change += 1;
            } else {
                agent.steps_since_change = 0;
            }
            agent.last_action = Some(action);
            if agent.history.len() == HISTORY_LEN {
                agent.history.remove(0);
            }
            agent.history.push(action);
        }
        self.step_index += 1;
        Ok((rewards, self.is_done()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::persona::generate_corpus;

    fn personas(version: OntologyVersion) -> Vec<PersonaRecord> {
        generate_corpus(15, 20, 0, &ActionOntology::new(version)).unwrap()
    }

    fn state(version: OntologyVersion, n: usize, grid: usize) -> EnvState {
        let c = personas(version);
        let ps: Vec<&PersonaRecord> = c.iter().step_by(7).take(n).collect();
        EnvState::reset(&EnvConfig::new(grid, n, version), &ps, 5).unwrap()
    }

    #[test]
    fn observation_dims() {
        assert_eq!(state(OntologyVersion::V1, 4, 6).observe(0).len(), 20);
        assert_eq!(state(OntologyVersion::V3, 4, 6).observe(0).len(), 33);
        assert_eq!(state(OntologyVersion::V1, 16, 12).observe(3).len(), 56);
        assert_eq!(state(OntologyVersion::V3, 16, 12).observe(3).len(), 69);
    }

    #[test]
    fn reset_is_deterministic_and_places_distinct_agents() {
        let a = state(OntologyVersion::V3, 4, 6);
        let b = state(OntologyVersion::V3, 4, 6);
        assert_eq!(a, b);
        let mut cells: Vec<(i32, i32)> = a.agents.iter().map(|g| (g.x, g.y)).collect();
        cells.sort_unstable();
        cells.dedup();
        assert_eq!(cells.len(), 4);
        for g in &a.agents {
            assert!((0..6).contains(&g.x) && (0..6).contains(&g.y));
            assert!(g.needs.iter().all(|n| (0.4..=0.8).contains(n)));
        }
    }

    #[test]
    fn too_many_agents_is_config_error() {
        let c = personas(OntologyVersion::V1);
        let ps: Vec<&PersonaRecord> = c.iter().take(37).collect();
        let err = EnvState::reset(&EnvConfig::new(6, 37, OntologyVersion::V1), &ps, 0);
        assert!(matches!(err, Err(Error::Config { .. })));
        let err = EnvState::reset(&EnvConfig::new(6, 4, OntologyVersion::V1), &ps[..3], 0);
        assert!(matches!(err, Err(Error::Config { .. })));
    }

    #[test]
    fn eat_reward_follows_urgency() {
        let mut s = state(OntologyVersion::V1, 4, 6);
        s.agents[0].needs[0] = 0.2;
        s.agents[0].preferred_actions = vec![5, 6, 7];
        let eat = 0;
        let wait = [eat, 8, 8, 8];
        let (r, _) = s.step(&wait).unwrap();
        assert!((r[0].needs - 0.15 * 0.8).abs() < 1e-12);
        assert_eq!(r[0].persona, 0.0);
        // gain then decay
        assert!((s.agents[0].needs[0] - (0.35 - 0.01)).abs() < 1e-12);

        let mut s = state(OntologyVersion::V1, 4, 6);
        s.agents[0].needs[0] = 0.2;
        s.agents[0].preferred_actions = vec![0, 6, 7];
        let (r, _) = s.step(&wait).unwrap();
        assert!((r[0].total() - (0.12 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn adjacent_identical_personas_get_half_point_social_bonus() {
        let mut s = state(OntologyVersion::V1, 4, 6);
        let bf = s.agents[0].big_five;
        s.agents[1].big_five = bf;
        (s.agents[0].x, s.agents[0].y) = (2, 2);
        (s.agents[1].x, s.agents[1].y) = (3, 3);
        (s.agents[2].x, s.agents[2].y) = (0, 5);
        (s.agents[3].x, s.agents[3].y) = (5, 0);
        let socialize = 2;
        let (r, _) = s.step(&[socialize, socialize, 8, 8]).unwrap();
        assert!((r[0].social - 0.5).abs() < 1e-12);
        assert!((r[1].social - 0.5).abs() < 1e-12);
        assert_eq!(r[2].social, 0.0);
    }

    #[test]
    fn social_bonus_is_symmetric_in_pair_order() {
        let mut s = state(OntologyVersion::V1, 4, 6);
        (s.agents[0].x, s.agents[0].y) = (1, 1);
        (s.agents[1].x, s.agents[1].y) = (1, 2);
        let mut t = s.clone();
        t.agents.swap(0, 1);
        let (r, _) = s.step(&[2, 2, 8, 9]).unwrap();
        let (q, _) = t.step(&[2, 2, 8, 9]).unwrap();
        assert!((r[0].social - q[1].social).abs() < 1e-15);
        assert!((r[0].social - r[1].social).abs() < 1e-15);
    }

    #[test]
    fn movement_clips_at_border() {
        let mut s = state(OntologyVersion::V1, 4, 6);
        (s.agents[0].x, s.agents[0].y) = (0, 0);
        s.agents[0].preferred_actions = vec![0, 1, 2];
        let north = 8;
        let west = 11;
        let (r, _) = s.step(&[north, 0, 0, 0]).unwrap();
        assert_eq!((s.agents[0].x, s.agents[0].y), (0, 0));
        assert_eq!(r[0].total(), 0.0);
        s.step(&[west, 0, 0, 0]).unwrap();
        assert_eq!((s.agents[0].x, s.agents[0].y), (0, 0));
    }

    #[test]
    fn invalid_action_and_finished_episode() {
        let mut s = state(OntologyVersion::V1, 4, 6);
        assert!(matches!(s.step(&[12, 0, 0, 0]), Err(Error::Action { .. })));
        s.config.episode_len = 2;
        assert!(!s.step(&[0, 0, 0, 0]).unwrap().1);
        assert!(s.step(&[0, 0, 0, 0]).unwrap().1);
        assert!(matches!(s.step(&[0, 0, 0, 0]), Err(Error::State(_))));
    }

    #[test]
    fn v3_adds_style_term_for_activities_only() {
        let mut s = state(OntologyVersion::V3, 4, 6);
        let (r, _) = s.step(&[4, 16, 0, 1]).unwrap();
        let expect = 0.3
            * cosine(
                &s.agents[0].big_five.to_array(),
                &s.ontology.actions[4].style_profile,
            );
        assert!((r[0].style - expect).abs() < 1e-12);
        assert_eq!(r[1].style, 0.0);
    }

    #[test]
    fn observations_bounded_and_affordance_zones_cover_needs() {
        let mut s = state(OntologyVersion::V3, 4, 6);
        let mut zones = s.affordance_map.clone();
        zones.sort_unstable();
        zones.dedup();
        assert_eq!(zones.len(), 8);
        for t in 0..40 {
            let acts: Vec<usize> = (0..4).map(|i| (t * 3 + i * 5) % 20).collect();
            s.step(&acts).unwrap();
            for i in 0..4 {
                assert!(s.observe(i).iter().all(|v| (-1.0..=1.0).contains(v)));
                assert!(s.agents[i].needs.iter().all(|n| (0.0..=1.0).contains(n)));
            }
        }
    }
}
