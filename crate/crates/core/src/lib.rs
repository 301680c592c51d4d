//! Persona-conditioned shared policies for multi-agent simulation.
//!
//! One policy network serves every agent; each agent is conditioned on a
//! projected embedding of its persona description. Training combines PPO,
//! an InfoNCE loss tying trajectories back to the persona that produced
//! them, and a KL term that keeps different personas behaving differently.

pub mod embedding;
pub mod env;
pub mod error;
pub mod eval;
pub mod harness;
pub mod linalg;
pub mod nn;
pub mod persona;
pub mod seeding;
pub mod train;

pub use error::{Error, Result};
