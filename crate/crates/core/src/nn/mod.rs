//! Fixed-architecture networks with hand-written gradients: the persona
//! projection, the conditioned policy and value MLPs, and the GRU
//! trajectory encoder.

pub mod checkpoint;
pub mod gru;
pub mod mlp;

use serde::{Deserialize, Serialize};

use crate::embedding::{ProjectionParams, PROJ_DIM, PROJ_RANK, RAW_DIM};
use crate::linalg::Matrix;
use crate::seeding::{rng_for, tag};

pub use gru::{EncoderInput, EncoderTape, GruEncoder, ENCODER_HIDDEN};
pub use mlp::{Conditioning, ConditionedMlp, MlpShape, MlpTape, HIDDEN};

/// Policy head init gain; small logits start the policy near uniform.
pub const POLICY_HEAD_GAIN: f64 = 0.01;
pub const VALUE_HEAD_GAIN: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub obs_dim: usize,
    pub n_actions: usize,
    pub raw_dim: usize,
    pub rank: usize,
    /// Width of projected persona embeddings and of trajectory embeddings.
    pub embed_dim: usize,
    pub hidden: [usize; 3],
    pub conditioning: Conditioning,
    /// Append observations to the encoder's one-hot inputs.
    #[serde(default)]
    pub encoder_obs_concat: bool,
}

impl ModelConfig {
    pub fn new(obs_dim: usize, n_actions: usize, conditioning: Conditioning) -> Self {
        Self {
            obs_dim,
            n_actions,
            raw_dim: RAW_DIM,
            rank: PROJ_RANK,
            embed_dim: PROJ_DIM,
            hidden: HIDDEN,
            conditioning,
            encoder_obs_concat: false,
        }
    }

    fn mlp_shape(&self, out_dim: usize) -> MlpShape {
        MlpShape {
            obs_dim: self.obs_dim,
            cond_dim: self.embed_dim,
            hidden: self.hidden,
            out_dim,
            conditioning: self.conditioning,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub projection: usize,
    pub policy: usize,
    pub value: usize,
    pub encoder: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.projection + self.policy + self.value + self.encoder
    }

    /// Parameters on the acting path: projection plus policy.
    pub fn acting(&self) -> usize {
        self.projection + self.policy
    }
}

/// Every trainable tensor of the system. A zeroed copy doubles as the
/// gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub projection: ProjectionParams,
    pub policy: ConditionedMlp,
    pub value: ConditionedMlp,
    pub encoder: GruEncoder,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let projection = ProjectionParams::init_with(config.raw_dim, config.rank, config.embed_dim, seed);
        let policy = ConditionedMlp::init(
            config.mlp_shape(config.n_actions),
            POLICY_HEAD_GAIN,
            &mut rng_for(seed, &[tag::POLICY]),
        );
        let value = ConditionedMlp::init(
            config.mlp_shape(1),
            VALUE_HEAD_GAIN,
            &mut rng_for(seed, &[tag::VALUE]),
        );
        let encoder = GruEncoder::init(
            config.n_actions,
            if config.encoder_obs_concat { config.obs_dim } else { 0 },
            config.embed_dim,
            &mut rng_for(seed, &[tag::ENCODER]),
        );
        Self {
            config,
            projection,
            policy,
            value,
            encoder,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            projection: self.projection.zeros_like(),
            policy: self.policy.zeros_like(),
            value: self.value.zeros_like(),
            encoder: self.encoder.zeros_like(),
        }
    }

    /// All tensors in canonical order with stable names.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = self
            .projection
            .tensors()
            .into_iter()
            .map(|(n, m)| (n.to_string(), m))
            .collect();
        out.extend(self.policy.tensors("policy"));
        out.extend(self.value.tensors("value"));
        out.extend(self.encoder.tensors("encoder"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = self
            .projection
            .tensors_mut()
            .into_iter()
            .map(|(n, m)| (n.to_string(), m))
            .collect();
        out.extend(self.policy.tensors_mut("policy"));
        out.extend(self.value.tensors_mut("value"));
        out.extend(self.encoder.tensors_mut("encoder"));
        out
    }

    pub fn param_counts(&self) -> ParamCounts {
        ParamCounts {
            projection: self.projection.param_count(),
            policy: self.policy.param_count(),
            value: self.value.param_count(),
            encoder: self.encoder.param_count(),
        }
    }

    pub fn zero(&mut self) {
        for (_, m) in self.tensors_mut() {
            m.fill(0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }
}

/// Independent parameter count from layer shapes alone.
pub fn expected_param_counts(config: &ModelConfig) -> ParamCounts {
    let dense = |i: usize, o: usize| i * o + o;
    let mlp = |out: usize| {
        let input = match config.conditioning {
            Conditioning::Film => config.obs_dim,
            Conditioning::Concat => config.obs_dim + config.embed_dim,
        };
        let widths = [input, config.hidden[0], config.hidden[1], config.hidden[2], out];
        let trunk: usize = widths.windows(2).map(|w| dense(w[0], w[1])).sum();
        let film: usize = match config.conditioning {
            Conditioning::Film => config.hidden.iter().map(|&d| 2 * dense(config.embed_dim, d)).sum(),
            Conditioning::Concat => 0,
        };
        trunk + film
    };
    let h = config.embed_dim;
    let enc_in = config.n_actions + if config.encoder_obs_concat { config.obs_dim } else { 0 };
    ParamCounts {
        projection: config.rank * config.raw_dim + config.embed_dim * config.rank,
        policy: mlp(config.n_actions),
        value: mlp(1),
        encoder: 3 * h * (enc_in + h + 1) + 3 * h * (h + h + 1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts_match_shape_walk() {
        for conditioning in [Conditioning::Film, Conditioning::Concat] {
            for (obs, acts) in [(20, 12), (33, 20), (69, 20)] {
                let cfg = ModelConfig::new(obs, acts, conditioning);
                let m = Model::init(cfg, 0);
                assert_eq!(m.param_counts(), expected_param_counts(&cfg));
            }
        }
        let v3 = expected_param_counts(&ModelConfig::new(33, 20, Conditioning::Film));
        assert_eq!(v3.policy, 193_172);
        assert_eq!(v3.projection, 17_408);
        assert!((200_000..=220_000).contains(&v3.acting()), "{}", v3.acting());
        let v1 = expected_param_counts(&ModelConfig::new(20, 12, Conditioning::Film));
        assert_eq!(v1.acting(), 206_220);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::new(20, 12, Conditioning::Film);
        assert_eq!(Model::init(cfg, 1), Model::init(cfg, 1));
        assert_ne!(Model::init(cfg, 1), Model::init(cfg, 2));
    }

    #[test]
    fn tensor_names_unique() {
        let m = Model::init(ModelConfig::new(20, 12, Conditioning::Film), 0);
        let mut names: Vec<String> = m.tensors().into_iter().map(|(n, _)| n).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }
}
