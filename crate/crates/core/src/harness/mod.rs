//! Experiment driver: presets, config files, seeded runs with checkpoints
//! and manifests, ablation matrices and cross-run reports.

mod report;
mod run;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::{
    load_embeddings, EmbeddingTable, ProjectionParams, SyntheticEmbedderConfig,
};
use crate::env::ontology::{ActionOntology, OntologyVersion};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::nn::ModelConfig;
use crate::persona::{
    generate_corpus, split_unseen_archetype, split_unseen_cross, split_unseen_occupation,
    CorpusSplit, PersonaRecord, SplitKind, BASE_HELDOUT_OCCUPATIONS, LARGE_HELDOUT_OCCUPATIONS,
};
use crate::train::{Ablation, ConditioningSource, TrainConfig};

pub use report::{
    emit_report, run_ablation_matrix, AblationRow, AblationTable, ReportBundle,
};
pub use run::{
    build_trainer, evaluate_checkpoint, run_experiment, run_seed, RunManifest, RunRecord,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "v1")]
    V1,
    #[serde(rename = "v2")]
    V2,
    #[serde(rename = "v3")]
    V3,
    #[serde(rename = "v3-large")]
    V3Large,
}

/// What a preset pins down.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PresetSpec {
    pub grid: usize,
    pub n_agents: usize,
    pub ontology: OntologyVersion,
    pub archetypes: usize,
    pub occupations: usize,
    pub heldout_occupations: &'static [usize],
    pub heldout_archetypes: &'static [usize],
    pub obs_dim: usize,
}

pub const BASE_HELDOUT_ARCHETYPES: [usize; 3] = [12, 13, 14];
pub const LARGE_HELDOUT_ARCHETYPES: [usize; 4] = [16, 17, 18, 19];

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::V1, Preset::V2, Preset::V3, Preset::V3Large];

    pub fn name(self) -> &'static str {
        match self {
            Preset::V1 => "v1",
            Preset::V2 => "v2",
            Preset::V3 => "v3",
            Preset::V3Large => "v3-large",
        }
    }

    pub fn spec(self) -> PresetSpec {
        let (grid, n_agents, ontology, large, obs_dim) = match self {
            Preset::V1 => (6, 4, OntologyVersion::V1, false, 20),
            Preset::V2 => (12, 16, OntologyVersion::V1, true, 56),
            Preset::V3 => (6, 4, OntologyVersion::V3, false, 33),
            Preset::V3Large => (12, 16, OntologyVersion::V3, true, 69),
        };
        PresetSpec {
            grid,
            n_agents,
            ontology,
            archetypes: if large { 20 } else { 15 },
            occupations: if large { 25 } else { 20 },
            heldout_occupations: if large {
                &LARGE_HELDOUT_OCCUPATIONS
            } else {
                &BASE_HELDOUT_OCCUPATIONS
            },
            heldout_archetypes: if large {
                &LARGE_HELDOUT_ARCHETYPES
            } else {
                &BASE_HELDOUT_ARCHETYPES
            },
            obs_dim,
        }
    }

    pub fn env_config(self) -> EnvConfig {
        let s = self.spec();
        EnvConfig::new(s.grid, s.n_agents, s.ontology)
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config("preset", format!("unknown preset `{s}`")))
    }
}

/// Source of raw persona embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbeddingSpec {
    Synthetic {
        #[serde(default = "default_raw_dim")]
        dim: usize,
        #[serde(default = "default_bias")]
        occupation_bias: f64,
        #[serde(default = "default_noise")]
        noise_scale: f64,
        #[serde(default)]
        seed: u64,
    },
    File { path: PathBuf, dim: usize },
}

fn default_raw_dim() -> usize {
    SyntheticEmbedderConfig::default().dim
}

fn default_bias() -> f64 {
    SyntheticEmbedderConfig::default().occupation_bias
}

fn default_noise() -> f64 {
    SyntheticEmbedderConfig::default().noise_scale
}

impl Default for EmbeddingSpec {
    fn default() -> Self {
        let c = SyntheticEmbedderConfig::default();
        EmbeddingSpec::Synthetic {
            dim: c.dim,
            occupation_bias: c.occupation_bias,
            noise_scale: c.noise_scale,
            seed: c.seed,
        }
    }
}

impl EmbeddingSpec {
    /// Alternate-encoder baseline: the synthetic embedder at 384 dims.
    pub fn alternate_384() -> Self {
        let c = SyntheticEmbedderConfig::default();
        EmbeddingSpec::Synthetic {
            dim: 384,
            occupation_bias: c.occupation_bias,
            noise_scale: c.noise_scale,
            seed: c.seed,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingSpec::Synthetic { dim, .. } | EmbeddingSpec::File { dim, .. } => *dim,
        }
    }

    pub fn build(&self, corpus: &[PersonaRecord]) -> Result<EmbeddingTable> {
        match self {
            EmbeddingSpec::Synthetic {
                dim,
                occupation_bias,
                noise_scale,
                seed,
            } => EmbeddingTable::synthetic(
                corpus,
                SyntheticEmbedderConfig {
                    dim: *dim,
                    occupation_bias: *occupation_bias,
                    noise_scale: *noise_scale,
                    seed: *seed,
                },
            ),
            EmbeddingSpec::File { path, dim } => {
                let ids: Vec<u32> = corpus.iter().map(|p| p.persona_id).collect();
                EmbeddingTable::from_map(corpus, &load_embeddings(path, *dim, &ids)?)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// The method itself.
    #[default]
    None,
    /// Every agent receives one fixed conditioning vector; the auxiliary
    /// losses are switched off.
    Constant,
}

/// One experiment: a preset, an ablation arm and a list of seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default = "default_split")]
    pub split: SplitKind,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub corpus_seed: u64,
    #[serde(default)]
    pub embedding: EmbeddingSpec,
    #[serde(default)]
    pub baseline: Baseline,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_split() -> SplitKind {
    SplitKind::UnseenOccupation
}

fn default_checkpoint_every() -> usize {
    25
}

impl ExperimentConfig {
    pub fn new(preset: Preset, ablation: Ablation, seeds: Vec<u64>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            preset,
            ablation,
            split: default_split(),
            seeds,
            output_dir: output_dir.into(),
            corpus_seed: 0,
            embedding: EmbeddingSpec::default(),
            baseline: Baseline::None,
            checkpoint_every: default_checkpoint_every(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            Error::config("config", msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        let unique: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if unique.len() != self.seeds.len() {
            return Err(Error::config("seeds", "seeds must be distinct"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir", "must not be empty"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every", "must be positive"));
        }
        if self.embedding.dim() == 0 {
            return Err(Error::config("embedding.dim", "must be positive"));
        }
        let env = self.preset.env_config();
        if env.obs_dim() != self.preset.spec().obs_dim {
            return Err(Error::config(
                "preset",
                format!(
                    "{} observation width {} differs from the expected {}",
                    self.preset.name(),
                    env.obs_dim(),
                    self.preset.spec().obs_dim
                ),
            ));
        }
        self.train_config(self.seeds[0]).validate()?;
        self.eval.validate()
    }

    /// Training config for one seed, with the arm's overrides applied.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = seed;
        t.ablation = self.ablation;
        if self.baseline == Baseline::Constant {
            t.lambda1 = 0.0;
            t.lambda2 = 0.0;
        }
        t
    }

    pub fn arm_name(&self) -> String {
        let mut s = format!("{}_{}", self.preset.name(), self.ablation.name());
        if self.baseline == Baseline::Constant {
            s.push_str("_constant");
        }
        if let EmbeddingSpec::Synthetic { dim, .. } = self.embedding {
            if dim != default_raw_dim() {
                s.push_str(&format!("_d{dim}"));
            }
        }
        if self.split != SplitKind::UnseenOccupation {
            s.push_str(&format!("_{}", split_name(self.split)));
        }
        s
    }

    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(format!("{}_s{seed}", self.arm_name()))
    }
}

fn split_name(kind: SplitKind) -> &'static str {
    match kind {
        SplitKind::UnseenOccupation => "unseen_occupation",
        SplitKind::UnseenArchetype => "unseen_archetype",
        SplitKind::UnseenCross => "unseen_cross",
    }
}

/// Corpus, split and embeddings for a preset.
#[derive(Debug, Clone)]
pub struct World {
    pub env: EnvConfig,
    pub corpus: Vec<PersonaRecord>,
    pub split: CorpusSplit,
    pub embeddings: EmbeddingTable,
}

pub fn build_world(
    preset: Preset,
    split: SplitKind,
    corpus_seed: u64,
    embedding: &EmbeddingSpec,
) -> Result<World> {
    let spec = preset.spec();
    let env = preset.env_config();
    let ontology = ActionOntology::new(spec.ontology);
    let corpus = generate_corpus(spec.archetypes, spec.occupations, corpus_seed, &ontology)?;
    let occ: BTreeSet<u32> = spec.heldout_occupations.iter().map(|&o| o as u32).collect();
    let arch: BTreeSet<u32> = spec.heldout_archetypes.iter().map(|&a| a as u32).collect();
    let split = match split {
        SplitKind::UnseenOccupation => split_unseen_occupation(&corpus, &occ, corpus_seed)?,
        SplitKind::UnseenArchetype => split_unseen_archetype(&corpus, &arch, corpus_seed)?,
        SplitKind::UnseenCross => split_unseen_cross(&corpus, &occ, &arch, corpus_seed)?,
    };
    let embeddings = embedding.build(&corpus)?;
    Ok(World {
        env,
        corpus,
        split,
        embeddings,
    })
}

/// Conditioning source for a baseline arm. The constant vector is the
/// seed-initial projection of the normalized mean training embedding.
pub fn conditioning_source(
    baseline: Baseline,
    world: &World,
    model_cfg: &ModelConfig,
    seed: u64,
) -> Result<ConditioningSource> {
    match baseline {
        Baseline::None => Ok(ConditioningSource::Projected),
        Baseline::Constant => {
            let rows = world.embeddings.rows(&world.split.train_ids);
            let mut mean = vec![0.0; rows.cols];
            for i in 0..rows.rows {
                for (m, v) in mean.iter_mut().zip(rows.row(i)) {
                    *m += v;
                }
            }
            let proj = ProjectionParams::init_with(
                model_cfg.raw_dim,
                model_cfg.rank,
                model_cfg.embed_dim,
                seed,
            );
            Ok(ConditioningSource::Constant(proj.project(&mean)?))
        }
    }
}
