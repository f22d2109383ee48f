//! The experiment loops: memory warm-up, estimator pre-training, policy
//! training with periodic frozen evaluation, and the cross-game reuse run.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use super::results::{summarize, ResultRow};
use crate::error::{Error, Result};
use crate::estimator::{
    build_estimator, train_estimator, Estimator, EstimatorArch, FrozenEstimator, OaeTrainConfig,
};
use crate::game::{play_repeated_game, score_difference, GameConfig};
use crate::memory::{PastMemory, SuffixMode};
use crate::policy::{
    build_agent, ActMode, LearnerAgent, LearnerSeat, Pathway, PolicyArch, RandomLearner,
};
use crate::strategies::{sample_opponent, PoolSide, StrategyPool};

/// Deterministic derived seeds: every loop gets its own stream, and streams
/// that must pair up across pathways (evaluation) exclude the pathway from
/// the mix.
pub fn mix_seed(tag: &str, parts: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    for b in tag.bytes() {
        eat(b);
    }
    for p in parts {
        for b in p.to_le_bytes() {
            eat(b);
        }
    }
    h
}

fn rng_for(tag: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(tag, parts))
}

/// Warm-up: a uniform-random learner plays old-pool opponents until the
/// configured number of games has been inserted.
pub fn populate_memory(cfg: &ExperimentConfig, seed: u64) -> Result<PastMemory> {
    let matrix = cfg.matrix()?;
    let pool = cfg.pool();
    pool.validate()?;
    let mut memory = PastMemory::new(cfg.memory_capacity);
    let mut opp_rng = rng_for("populate.opponent", &[seed]);
    for i in 0..cfg.populate_games {
        let strategy = sample_opponent(&pool, PoolSide::Old, &mut opp_rng)?;
        let gcfg = GameConfig::new(
            matrix.game_name.clone(),
            cfg.turns,
            mix_seed("populate.game", &[seed, i as u64]),
        );
        let mut learner = RandomLearner {
            arity: matrix.arity(),
        };
        let mut opp = strategy;
        let rec = play_repeated_game(&gcfg, &matrix, &mut learner, &mut opp, strategy.id())?;
        memory.insert_with_eviction(rec);
    }
    Ok(memory)
}

/// Pre-train one estimator variant on a populated memory and freeze it.
/// Returns the frozen network and the per-step training losses.
pub fn train_oae(
    cfg: &ExperimentConfig,
    memory: &PastMemory,
    mode: SuffixMode,
    seed: u64,
) -> Result<(FrozenEstimator, Vec<f64>)> {
    let matrix = cfg.matrix()?;
    let arch = EstimatorArch {
        arity: matrix.arity(),
        hidden: cfg.hidden,
        hops: cfg.hops,
        mode,
    };
    let mode_idx = match mode {
        SuffixMode::OneStep => 0u64,
        SuffixMode::MultiStep => 1,
    };
    let (mut store, est) = build_estimator(arch, mix_seed("oae.init", &[seed, mode_idx]));
    let train_cfg = OaeTrainConfig {
        epochs: cfg.oae_epochs,
        k: cfg.k,
        lr: cfg.oae_lr,
        target_true_future: cfg.oae_target_true_future,
    };
    let mut rng = rng_for("oae.train", &[seed, mode_idx]);
    let losses = train_estimator(&mut store, &est, memory, &train_cfg, &mut rng)?;
    Ok((FrozenEstimator::new(store, est), losses))
}

/// Load a frozen estimator from checkpoint bytes.
pub fn load_frozen_oae(bytes: &[u8]) -> Result<FrozenEstimator> {
    let (store, meta) = crate::nn::checkpoint::from_bytes(bytes)?;
    let arch = Estimator::arch_from_meta(&meta)?;
    let est = Estimator::lookup(&store, arch)?;
    Ok(FrozenEstimator::new(store, est))
}

/// Evaluate a frozen agent against one pool side: greedy acting, no learning,
/// no memory mutation. The RNG stream depends on (seed, epoch, side) only, so
/// every pathway faces the same opponent sequence.
pub fn evaluate_agent(
    cfg: &ExperimentConfig,
    agent: &mut LearnerAgent,
    memory: Option<&PastMemory>,
    pool: &StrategyPool,
    side: PoolSide,
    epoch: usize,
    seed: u64,
) -> Result<ResultRow> {
    let matrix = cfg.matrix()?;
    let side_idx = match side {
        PoolSide::Old => 0u64,
        PoolSide::New => 1u64,
    };
    let mut opp_rng = rng_for("eval.opponent", &[seed, epoch as u64, side_idx]);
    let mut deltas = Vec::with_capacity(cfg.eval_games);
    for g in 0..cfg.eval_games {
        let strategy = sample_opponent(pool, side, &mut opp_rng)?;
        let gcfg = GameConfig::new(
            matrix.game_name.clone(),
            cfg.turns,
            mix_seed("eval.game", &[seed, epoch as u64, side_idx, g as u64]),
        );
        agent.begin_game(ActMode::Greedy);
        let rec = {
            let mut seat = LearnerSeat { agent, memory };
            let mut opp = strategy;
            play_repeated_game(&gcfg, &matrix, &mut seat, &mut opp, strategy.id())?
        };
        agent.end_game(&rec)?;
        deltas.push(score_difference(&rec));
    }
    let (mean, stderr) = summarize(&deltas);
    Ok(ResultRow {
        pathway: agent.pathway().id().to_string(),
        pool: side,
        mean_delta_r: mean,
        stderr,
        games: cfg.eval_games,
        seed,
    })
}

/// One evaluation checkpoint: rows for both pools at a given epoch.
#[derive(Debug, Clone)]
pub struct EvalBlock {
    pub epoch: usize,
    pub rows: Vec<ResultRow>,
}

/// A finished training run: the trained agent plus the evaluation stream.
pub struct TrainRun {
    pub agent: LearnerAgent,
    pub blocks: Vec<EvalBlock>,
}

impl TrainRun {
    /// Rows of the last evaluation block.
    pub fn final_rows(&self) -> &[ResultRow] {
        self.blocks.last().map(|b| b.rows.as_slice()).unwrap_or(&[])
    }
}

/// The training loop: sample an old-pool opponent, play one game, apply the
/// end-of-game (or per-stage) update, and run a frozen evaluation against
/// both pools every `eval_every` epochs.
pub fn run_training(
    cfg: &ExperimentConfig,
    seed: u64,
    memory: Option<&PastMemory>,
    oae: Option<FrozenEstimator>,
) -> Result<TrainRun> {
    let matrix = cfg.matrix()?;
    let pool = cfg.pool();
    pool.validate()?;
    let pathway = cfg.pathway()?;
    if pathway.uses_memory() && memory.is_none() {
        return Err(Error::Config(format!(
            "pathway '{}' needs a populated memory",
            pathway.id()
        )));
    }
    if pathway.oae_mode().is_some() && oae.is_none() {
        return Err(Error::Config(format!(
            "pathway '{}' needs a pre-trained estimator",
            pathway.id()
        )));
    }
    let arch = PolicyArch {
        arity: matrix.arity(),
        hidden: cfg.hidden,
    };
    let hierarchical = matches!(pathway, Pathway::Dqn { hierarchical: true });
    let mut agent = build_agent(
        pathway,
        &matrix,
        arch,
        cfg.k,
        cfg.policy_lr,
        cfg.reinforce_baseline,
        &cfg.dqn.to_config(hierarchical),
        (cfg.q_alpha, cfg.q_gamma, cfg.q_epsilon),
        oae,
        mix_seed("agent.init", &[seed]),
    )?;

    let mut opp_rng = rng_for("train.opponent", &[seed]);
    let mut blocks = Vec::new();
    for epoch in 1..=cfg.epochs {
        let strategy = sample_opponent(&pool, PoolSide::Old, &mut opp_rng)?;
        let gcfg = GameConfig::new(
            matrix.game_name.clone(),
            cfg.turns,
            mix_seed("train.game", &[seed, epoch as u64]),
        );
        agent.begin_game(ActMode::Train);
        let rec = {
            let mut seat = LearnerSeat {
                agent: &mut agent,
                memory,
            };
            let mut opp = strategy;
            play_repeated_game(&gcfg, &matrix, &mut seat, &mut opp, strategy.id())?
        };
        agent.end_game(&rec)?;

        if epoch % cfg.eval_every == 0 {
            let rows = vec![
                evaluate_agent(cfg, &mut agent, memory, &pool, PoolSide::Old, epoch, seed)?,
                evaluate_agent(cfg, &mut agent, memory, &pool, PoolSide::New, epoch, seed)?,
            ];
            blocks.push(EvalBlock { epoch, rows });
        }
    }
    Ok(TrainRun { agent, blocks })
}

/// Prerequisites shared by every pathway of one seed's grid column.
pub struct SeedPrereqs {
    pub seed: u64,
    pub memory: PastMemory,
    /// Frozen estimator checkpoints by mode.
    pub oae: std::collections::BTreeMap<&'static str, Vec<u8>>,
}

/// Build per-seed prerequisites (memory; estimators for the modes needed).
pub fn build_prereqs(
    cfg: &ExperimentConfig,
    seed: u64,
    modes: &[SuffixMode],
) -> Result<SeedPrereqs> {
    let memory = populate_memory(cfg, seed)?;
    let mut oae = std::collections::BTreeMap::new();
    let game = cfg.matrix()?.game_name;
    for &mode in modes {
        let (frozen, _) = train_oae(cfg, &memory, mode, seed)?;
        oae.insert(mode.tag(), frozen.checkpoint_bytes(&game));
    }
    Ok(SeedPrereqs { seed, memory, oae })
}

/// Train and evaluate one grid cell; returns the final evaluation rows.
pub fn run_cell(cfg: &ExperimentConfig, pathway: Pathway, prereqs: &SeedPrereqs) -> Result<Vec<ResultRow>> {
    let mut cell_cfg = cfg.clone();
    cell_cfg.pathway = pathway.id().to_string();
    let memory = pathway.uses_memory().then_some(&prereqs.memory);
    let oae = match pathway.oae_mode() {
        Some(mode) => Some(load_frozen_oae(prereqs.oae.get(mode.tag()).ok_or_else(
            || Error::Config(format!("no pre-trained estimator for mode {}", mode.tag())),
        )?)?),
        None => None,
    };
    let run = run_training(&cell_cfg, prereqs.seed, memory, oae)?;
    Ok(run.final_rows().to_vec())
}

/// The full comparison grid: every pathway crossed with every seed, run in
/// parallel, rows returned in (pathway, seed) order.
pub fn run_table(cfg: &ExperimentConfig, pathways: &[Pathway]) -> Result<Vec<ResultRow>> {
    use rayon::prelude::*;
    let modes: Vec<SuffixMode> = {
        let mut m: Vec<SuffixMode> = pathways.iter().filter_map(|p| p.oae_mode()).collect();
        m.sort_by_key(|m| m.tag());
        m.dedup();
        m
    };
    let prereqs: Vec<SeedPrereqs> = cfg
        .seeds
        .par_iter()
        .map(|&seed| build_prereqs(cfg, seed, &modes))
        .collect::<Result<_>>()?;
    let cells: Vec<(usize, usize)> = (0..pathways.len())
        .flat_map(|p| (0..cfg.seeds.len()).map(move |s| (p, s)))
        .collect();
    let mut rows_by_cell: Vec<(usize, usize, Vec<ResultRow>)> = cells
        .par_iter()
        .map(|&(p, s)| Ok((p, s, run_cell(cfg, pathways[p], &prereqs[s])?)))
        .collect::<Result<_>>()?;
    rows_by_cell.sort_by_key(|&(p, s, _)| (p, s));
    Ok(rows_by_cell.into_iter().flat_map(|(_, _, r)| r).collect())
}

/// One cross-game cell: the same pathway/pool evaluated with a freshly
/// trained estimator and with the source game's estimator reused verbatim.
#[derive(Debug, Clone)]
pub struct TransferCell {
    pub mode: SuffixMode,
    pub pool: PoolSide,
    pub new_trained: Vec<ResultRow>,
    pub reused: Vec<ResultRow>,
}

impl TransferCell {
    pub fn mean_new(&self) -> f64 {
        self.new_trained.iter().map(|r| r.mean_delta_r).sum::<f64>() / self.new_trained.len() as f64
    }

    pub fn mean_reused(&self) -> f64 {
        self.reused.iter().map(|r| r.mean_delta_r).sum::<f64>() / self.reused.len() as f64
    }

    pub fn gap(&self) -> f64 {
        (self.mean_new() - self.mean_reused()).abs()
    }
}

pub struct TransferReport {
    pub cells: Vec<TransferCell>,
    /// The reused estimator's checkpoint bytes matched the source checkpoint
    /// for every seed and mode (reuse means no retraining).
    pub reused_checkpoints_identical: bool,
}

impl TransferReport {
    pub fn all_rows(&self) -> Vec<ResultRow> {
        let mut rows = Vec::new();
        for cell in &self.cells {
            for r in &cell.new_trained {
                let mut r = r.clone();
                r.pathway = format!("{}+new", r.pathway);
                rows.push(r);
            }
            for r in &cell.reused {
                let mut r = r.clone();
                r.pathway = format!("{}+reused", r.pathway);
                rows.push(r);
            }
        }
        rows
    }
}

/// Train estimators on the source game, then train two target-game agents per
/// mode that differ only in estimator provenance, and compare their final
/// evaluations cell by cell.
pub fn run_transfer(
    cfg_source: &ExperimentConfig,
    cfg_target: &ExperimentConfig,
) -> Result<TransferReport> {
    use rayon::prelude::*;
    let source_matrix = cfg_source.matrix()?;
    let target_matrix = cfg_target.matrix()?;
    if source_matrix.arity() != target_matrix.arity() {
        return Err(Error::Config(format!(
            "cannot reuse an estimator across arities {} and {}",
            source_matrix.arity(),
            target_matrix.arity()
        )));
    }
    if cfg_source.seeds != cfg_target.seeds {
        return Err(Error::Config(
            "source and target configs must list the same seeds".into(),
        ));
    }
    let modes = [SuffixMode::OneStep, SuffixMode::MultiStep];

    // Per seed: source-game estimator checkpoints and a target-game memory
    // plus freshly trained target estimators.
    struct SeedSetup {
        seed: u64,
        target_memory: PastMemory,
        source_ckpt: std::collections::BTreeMap<&'static str, Vec<u8>>,
        target_ckpt: std::collections::BTreeMap<&'static str, Vec<u8>>,
    }
    let setups: Vec<SeedSetup> = cfg_source
        .seeds
        .par_iter()
        .map(|&seed| -> Result<SeedSetup> {
            let source_memory = populate_memory(cfg_source, seed)?;
            let mut source_ckpt = std::collections::BTreeMap::new();
            for mode in modes {
                let (frozen, _) = train_oae(cfg_source, &source_memory, mode, seed)?;
                source_ckpt.insert(mode.tag(), frozen.checkpoint_bytes(&source_matrix.game_name));
            }
            let target_memory = populate_memory(cfg_target, seed)?;
            let mut target_ckpt = std::collections::BTreeMap::new();
            for mode in modes {
                let (frozen, _) = train_oae(cfg_target, &target_memory, mode, seed)?;
                target_ckpt.insert(mode.tag(), frozen.checkpoint_bytes(&target_matrix.game_name));
            }
            Ok(SeedSetup {
                seed,
                target_memory,
                source_ckpt,
                target_ckpt,
            })
        })
        .collect::<Result<_>>()?;

    // Reuse must not retrain: the reloaded checkpoint serializes identically.
    let reused_checkpoints_identical = setups.iter().all(|s| {
        modes.iter().all(|m| {
            let bytes = &s.source_ckpt[m.tag()];
            load_frozen_oae(bytes)
                .map(|f| &f.checkpoint_bytes(&source_matrix.game_name) == bytes)
                .unwrap_or(false)
        })
    });

    // mode x provenance x seed training runs, in parallel.
    let tasks: Vec<(usize, usize, bool)> = (0..modes.len())
        .flat_map(|m| {
            (0..setups.len()).flat_map(move |s| [(m, s, false), (m, s, true)].into_iter())
        })
        .collect();
    let runs: Vec<((usize, usize, bool), Vec<ResultRow>)> = tasks
        .par_iter()
        .map(|&(m, s, reused)| -> Result<_> {
            let mode = modes[m];
            let setup = &setups[s];
            let mut cfg = cfg_target.clone();
            cfg.pathway = Pathway::OaeAd { mode }.id().to_string();
            let ckpt = if reused {
                &setup.source_ckpt[mode.tag()]
            } else {
                &setup.target_ckpt[mode.tag()]
            };
            let oae = load_frozen_oae(ckpt)?;
            let run = run_training(&cfg, setup.seed, Some(&setup.target_memory), Some(oae))?;
            Ok(((m, s, reused), run.final_rows().to_vec()))
        })
        .collect::<Result<_>>()?;

    let mut cells = Vec::new();
    for (mi, mode) in modes.iter().enumerate() {
        for side in [PoolSide::Old, PoolSide::New] {
            let collect = |reused: bool| -> Vec<ResultRow> {
                let mut rows: Vec<ResultRow> = runs
                    .iter()
                    .filter(|((m, _, r), _)| *m == mi && *r == reused)
                    .flat_map(|(_, rows)| rows.iter().filter(|row| row.pool == side).cloned())
                    .collect();
                rows.sort_by_key(|r| r.seed);
                rows
            };
            cells.push(TransferCell {
                mode: *mode,
                pool: side,
                new_trained: collect(false),
                reused: collect(true),
            });
        }
    }
    Ok(TransferReport {
        cells,
        reused_checkpoints_identical,
    })
}
