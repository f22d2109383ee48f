//! A laboratory for fast-adapting agents in finitely repeated games.
//!
//! The learner plays fixed-length repeated games (dilemma, chicken) against a
//! pool of scripted opponents. Terminated games land in a capacity-bounded
//! past-game memory; an opponent-action estimator retrieves the most similar
//! stored games mid-play and distills them into a feature vector; a
//! hierarchical history encoder fuses that estimate with the current game and
//! an action decoder picks the next move, trained end-of-game by policy
//! gradient on the score difference. Tabular Q-learning and a recurrent DQN
//! serve as baselines, and an experiment harness reproduces the comparison
//! and cross-game reuse protocols.

pub mod error;
pub mod encoding;
pub mod game;
pub mod strategies;
pub mod memory;
pub mod retrieval;
pub mod nn;
pub mod estimator;
pub mod policy;
pub mod harness;

pub use error::{Error, Result};
