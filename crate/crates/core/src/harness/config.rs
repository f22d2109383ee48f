//! Run configuration: defaults, file loading, validation, and the resolved
//! copy written next to every run's outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::PayoffMatrix;
use crate::policy::{DqnConfig, Pathway};
use crate::strategies::StrategyPool;

fn d_game() -> String {
    "pd".into()
}
fn d_pathway() -> String {
    "he-ad-pg".into()
}
fn d_turns() -> usize {
    50
}
fn d_epochs() -> usize {
    20_000
}
fn d_eval_every() -> usize {
    500
}
fn d_eval_games() -> usize {
    200
}
fn d_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}
fn d_memory_capacity() -> usize {
    1000
}
fn d_populate_games() -> usize {
    500
}
fn d_k() -> usize {
    5
}
fn d_hidden() -> usize {
    64
}
fn d_hops() -> usize {
    3
}
fn d_policy_lr() -> f64 {
    1e-3
}
fn d_oae_lr() -> f64 {
    1e-3
}
fn d_oae_epochs() -> usize {
    2000
}
fn d_q_alpha() -> f64 {
    0.1
}
fn d_q_gamma() -> f64 {
    0.9
}
fn d_q_epsilon() -> f64 {
    0.1
}
fn d_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DqnSettings {
    pub buffer_capacity: usize,
    pub batch: usize,
    pub gamma: f64,
    pub sync_every: u64,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_anneal_steps: u64,
    pub lr: f64,
}

impl Default for DqnSettings {
    fn default() -> Self {
        let d = DqnConfig::default();
        DqnSettings {
            buffer_capacity: d.buffer_capacity,
            batch: d.batch,
            gamma: d.gamma,
            sync_every: d.sync_every,
            eps_start: d.eps_start,
            eps_end: d.eps_end,
            eps_anneal_steps: d.eps_anneal_steps,
            lr: d.lr,
        }
    }
}

impl DqnSettings {
    pub fn to_config(&self, hierarchical: bool) -> DqnConfig {
        DqnConfig {
            buffer_capacity: self.buffer_capacity,
            batch: self.batch,
            gamma: self.gamma,
            sync_every: self.sync_every,
            eps_start: self.eps_start,
            eps_end: self.eps_end,
            eps_anneal_steps: self.eps_anneal_steps,
            lr: self.lr,
            hierarchical,
        }
    }
}

/// Everything one run needs. Loadable from TOML with flag-style overrides on
/// top; every field has a default so minimal files stay minimal.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Built-in game name ("pd" or "chicken"), unless `game_file` is set.
    pub game: String,
    /// Optional path to a TOML game definition overriding `game`.
    pub game_file: Option<PathBuf>,
    pub pathway: String,
    pub turns: usize,
    pub epochs: usize,
    pub eval_every: usize,
    pub eval_games: usize,
    pub seeds: Vec<u64>,
    pub memory_capacity: usize,
    pub populate_games: usize,
    pub k: usize,
    pub hidden: usize,
    pub hops: usize,
    pub policy_lr: f64,
    pub oae_lr: f64,
    pub oae_epochs: usize,
    /// Subtract a moving-average return baseline in the policy update.
    pub reinforce_baseline: bool,
    /// Train the estimator against the sampled game's own future instead of
    /// the retrieved suffixes.
    pub oae_target_true_future: bool,
    pub q_alpha: f64,
    pub q_gamma: f64,
    pub q_epsilon: f64,
    pub dqn: DqnSettings,
    pub out_dir: PathBuf,
    /// Strategy pool; defaults to the built-in old/new split.
    pub pool: Option<StrategyPool>,
    /// Optional path to a pool TOML file (overrides `pool`).
    pub pool_file: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            game: d_game(),
            game_file: None,
            pathway: d_pathway(),
            turns: d_turns(),
            epochs: d_epochs(),
            eval_every: d_eval_every(),
            eval_games: d_eval_games(),
            seeds: d_seeds(),
            memory_capacity: d_memory_capacity(),
            populate_games: d_populate_games(),
            k: d_k(),
            hidden: d_hidden(),
            hops: d_hops(),
            policy_lr: d_policy_lr(),
            oae_lr: d_oae_lr(),
            oae_epochs: d_oae_epochs(),
            reinforce_baseline: false,
            oae_target_true_future: false,
            q_alpha: d_q_alpha(),
            q_gamma: d_q_gamma(),
            q_epsilon: d_q_epsilon(),
            dqn: DqnSettings::default(),
            out_dir: d_out_dir(),
            pool: None,
            pool_file: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(pool_path) = cfg.pool_file.clone() {
            let pool_text = std::fs::read_to_string(&pool_path)?;
            cfg.pool = Some(StrategyPool::from_toml(&pool_text)?);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn matrix(&self) -> Result<PayoffMatrix> {
        match &self.game_file {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                PayoffMatrix::from_toml(&text)
            }
            None => PayoffMatrix::builtin(&self.game),
        }
    }

    pub fn pool(&self) -> StrategyPool {
        self.pool.clone().unwrap_or_else(StrategyPool::default_split)
    }

    pub fn pathway(&self) -> Result<Pathway> {
        Pathway::parse(&self.pathway)
    }

    pub fn validate(&self) -> Result<()> {
        self.matrix()?.validate()?;
        self.pathway()?;
        self.pool().validate()?;
        if self.turns < 1 {
            return Err(Error::Config("turns must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if self.memory_capacity == 0 {
            return Err(Error::Config("memory_capacity must be positive".into()));
        }
        Ok(())
    }
}
