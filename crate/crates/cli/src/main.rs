//! Command-line harness: memory warm-up, estimator pre-training, policy
//! training with periodic evaluation, standalone evaluation, the comparison
//! grid, and the cross-game reuse experiment.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use matchbook::harness::{self, ExperimentConfig};
use matchbook::memory::{PastMemory, SuffixMode};
use matchbook::policy::{DqnAgent, LearnerAgent, Pathway, PolicyAgent, QTableAgent};
use matchbook::strategies::{PoolSide, StrategyKind, StrategyPool};

#[derive(Parser)]
#[command(
    name = "matchbook",
    about = "Fast-adapting agents for finitely repeated games",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flag overrides layered on top of the config file.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// Config file (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in game name (pd, chicken).
    #[arg(long)]
    game: Option<String>,
    /// Pathway id (q-learning, dqn, dqn-he, pg, he-ad-pg, o-oae-ad,
    /// m-oae-ad, o-oae-he-ad, m-oae-he-ad).
    #[arg(long)]
    pathway: Option<String>,
    /// Seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_games: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    turns: Option<usize>,
    #[arg(long)]
    populate_games: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    policy_lr: Option<f64>,
    #[arg(long)]
    oae_epochs: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.game {
            cfg.game = v.clone();
        }
        if let Some(v) = &self.pathway {
            cfg.pathway = v.clone();
        }
        if let Some(v) = &self.seeds {
            cfg.seeds = v.clone();
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.eval_every {
            cfg.eval_every = v;
        }
        if let Some(v) = self.eval_games {
            cfg.eval_games = v;
        }
        if let Some(v) = self.hidden {
            cfg.hidden = v;
        }
        if let Some(v) = self.turns {
            cfg.turns = v;
        }
        if let Some(v) = self.populate_games {
            cfg.populate_games = v;
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = self.policy_lr {
            cfg.policy_lr = v;
        }
        if let Some(v) = self.oae_epochs {
            cfg.oae_epochs = v;
        }
        if let Some(v) = &self.out_dir {
            cfg.out_dir = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the strategy catalog and the default old/new split.
    ListStrategies,
    /// Play random-learner warm-up games and write the memory file.
    PopulateMemory {
        #[command(flatten)]
        overrides: Overrides,
        /// Seed (defaults to the first configured seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Output file (defaults to <out-dir>/memory-seed<seed>.tsv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one estimator variant on a memory file and freeze it.
    TrainOae {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        memory: PathBuf,
        /// one_step or multi_step
        #[arg(long)]
        mode: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a pathway against the old pool, evaluating on a schedule.
    Train {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        seed: Option<u64>,
        /// Memory file (estimator pathways).
        #[arg(long)]
        memory: Option<PathBuf>,
        /// Frozen estimator checkpoint (estimator pathways).
        #[arg(long)]
        oae: Option<PathBuf>,
    },
    /// Evaluate a saved agent checkpoint against both pools.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        agent: PathBuf,
        #[arg(long)]
        memory: Option<PathBuf>,
        #[arg(long)]
        oae: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a grid of pathways x seeds and emit the comparison table.
    Table {
        #[command(flatten)]
        overrides: Overrides,
        /// Pathways, comma separated (default: the full comparison set).
        #[arg(long, value_delimiter = ',')]
        pathways: Option<Vec<String>>,
    },
    /// Cross-game reuse: estimators trained on the source game are reused on
    /// the target game and compared against freshly trained ones.
    Transfer {
        /// Source-game config (defaults: pd).
        #[arg(long)]
        config_source: Option<PathBuf>,
        /// Target-game config (defaults: chicken).
        #[arg(long)]
        config_target: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))
}

fn write_resolved_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    std::fs::write(dir.join("resolved-config.toml"), cfg.to_toml())?;
    Ok(())
}

fn load_memory(cfg: &ExperimentConfig, path: &Path) -> Result<PastMemory> {
    let matrix = cfg.matrix()?;
    Ok(PastMemory::load(path, &matrix)?)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::ListStrategies => {
            let pool = StrategyPool::default_split();
            println!("strategy catalog ({} entries):", StrategyKind::ALL.len());
            for kind in StrategyKind::ALL {
                let side = if pool.old.iter().any(|id| id == kind.id()) {
                    "old"
                } else {
                    "new"
                };
                let stochastic = if kind.is_stochastic() { ", stochastic" } else { "" };
                println!("  {:<24} [{side}{stochastic}]", kind.id());
            }
        }
        Command::PopulateMemory {
            overrides,
            seed,
            out,
        } => {
            let cfg = overrides.resolve()?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let memory = harness::populate_memory(&cfg, seed)?;
            let path = out.unwrap_or_else(|| cfg.out_dir.join(format!("memory-seed{seed}.tsv")));
            if let Some(dir) = path.parent() {
                ensure_dir(dir)?;
            }
            memory.save(&path, &cfg.matrix()?.game_name)?;
            write_resolved_config(&cfg, path.parent().unwrap_or(Path::new(".")))?;
            println!(
                "populated {} games (capacity {}) -> {}",
                memory.len(),
                memory.capacity(),
                path.display()
            );
        }
        Command::TrainOae {
            overrides,
            memory,
            mode,
            seed,
            out,
        } => {
            let cfg = overrides.resolve()?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let mode = SuffixMode::from_tag(&mode)?;
            let mem = load_memory(&cfg, &memory)?;
            let (frozen, losses) = harness::train_oae(&cfg, &mem, mode, seed)?;
            let game = cfg.matrix()?.game_name;
            let path = out.unwrap_or_else(|| {
                cfg.out_dir
                    .join(format!("oae-{}-{}-seed{seed}.ckpt", game, mode.tag()))
            });
            if let Some(dir) = path.parent() {
                ensure_dir(dir)?;
            }
            std::fs::write(&path, frozen.checkpoint_bytes(&game))?;
            write_resolved_config(&cfg, path.parent().unwrap_or(Path::new(".")))?;
            let window = losses.len().min(100).max(1);
            let head = losses.iter().take(window).sum::<f64>() / window as f64;
            let tail = losses.iter().rev().take(window).sum::<f64>() / window as f64;
            println!(
                "trained {} estimator for {} steps (loss {head:.4} -> {tail:.4}) -> {}",
                mode.tag(),
                losses.len(),
                path.display()
            );
        }
        Command::Train {
            overrides,
            seed,
            memory,
            oae,
        } => {
            let cfg = overrides.resolve()?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let pathway = cfg.pathway()?;
            let game = cfg.matrix()?.game_name;

            let mem = match (&memory, pathway.uses_memory()) {
                (Some(path), _) => Some(load_memory(&cfg, path)?),
                (None, true) => {
                    eprintln!(
                        "no --memory given; populating {} warm-up games",
                        cfg.populate_games
                    );
                    Some(harness::populate_memory(&cfg, seed)?)
                }
                (None, false) => None,
            };
            let frozen = match (&oae, pathway.oae_mode()) {
                (Some(path), Some(_)) => Some(harness::load_frozen_oae(&std::fs::read(path)?)?),
                (None, Some(mode)) => {
                    let mem = mem.as_ref().expect("estimator pathway has memory");
                    eprintln!("no --oae given; pre-training a {} estimator", mode.tag());
                    Some(harness::train_oae(&cfg, mem, mode, seed)?.0)
                }
                (_, None) => None,
            };

            let dir = cfg
                .out_dir
                .join(format!("{}-{}-seed{}", pathway.id(), game, seed));
            write_resolved_config(&cfg, &dir)?;
            if let Some(m) = &mem {
                m.save(&dir.join("memory.tsv"), &game)?;
            }
            if let Some(f) = &frozen {
                std::fs::write(dir.join("oae.ckpt"), f.checkpoint_bytes(&game))?;
            }

            let run = harness::run_training(&cfg, seed, mem.as_ref(), frozen)?;
            let rows: Vec<_> = run
                .blocks
                .iter()
                .flat_map(|b| b.rows.iter().cloned())
                .collect();
            harness::write_csv(&rows, &dir.join("results.csv"))?;
            harness::write_summary_json(run.final_rows(), &dir.join("summary.json"))?;
            std::fs::write(dir.join("agent.ckpt"), run.agent.checkpoint_bytes(&game))?;
            if let Some(bytes) = run.agent.oae_checkpoint_bytes(&game) {
                std::fs::write(dir.join("oae-after-training.ckpt"), bytes)?;
            }
            for block in &run.blocks {
                for row in &block.rows {
                    println!(
                        "epoch {:>6}  {:<12} {:<4} mean dR {:+.3} (se {:.3})",
                        block.epoch,
                        row.pathway,
                        row.pool.to_string(),
                        row.mean_delta_r,
                        row.stderr
                    );
                }
            }
            println!("outputs -> {}", dir.display());
        }
        Command::Eval {
            overrides,
            agent,
            memory,
            oae,
            seed,
        } => {
            let cfg = overrides.resolve()?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let matrix = cfg.matrix()?;
            let bytes = std::fs::read(&agent)?;
            let frozen = match &oae {
                Some(path) => Some(harness::load_frozen_oae(&std::fs::read(path)?)?),
                None => None,
            };
            let mut learner = if bytes.starts_with(b"MBCK") {
                let (_, meta) = matchbook::nn::checkpoint::from_bytes(&bytes)?;
                let pathway =
                    Pathway::parse(meta.get("pathway").map(String::as_str).unwrap_or_default())?;
                match pathway {
                    Pathway::Dqn { .. } => LearnerAgent::Dqn(DqnAgent::from_checkpoint(
                        matrix.clone(),
                        cfg.dqn.to_config(false),
                        &bytes,
                    )?),
                    _ => LearnerAgent::Policy(PolicyAgent::from_checkpoint(
                        &bytes,
                        cfg.k,
                        cfg.policy_lr,
                        cfg.reinforce_baseline,
                        frozen,
                    )?),
                }
            } else {
                let mut q =
                    QTableAgent::new(matrix.clone(), cfg.q_alpha, cfg.q_gamma, cfg.q_epsilon);
                q.load_records(std::str::from_utf8(&bytes).map_err(|_| {
                    matchbook::Error::Parse(
                        "agent file is neither a checkpoint nor a q-table".into(),
                    )
                })?)?;
                LearnerAgent::QTable(q)
            };
            let mem = match &memory {
                Some(path) => Some(load_memory(&cfg, path)?),
                None => None,
            };
            if learner.pathway().uses_memory() && mem.is_none() {
                bail!("pathway '{}' needs --memory", learner.pathway().id());
            }
            let pool = cfg.pool();
            for side in [PoolSide::Old, PoolSide::New] {
                let row =
                    harness::evaluate_agent(&cfg, &mut learner, mem.as_ref(), &pool, side, 0, seed)?;
                println!(
                    "{:<12} {:<4} mean dR {:+.3} (se {:.3}, {} games, seed {})",
                    row.pathway,
                    row.pool.to_string(),
                    row.mean_delta_r,
                    row.stderr,
                    row.games,
                    row.seed
                );
            }
        }
        Command::Table {
            overrides,
            pathways,
        } => {
            let cfg = overrides.resolve()?;
            let pathway_list: Vec<Pathway> = match pathways {
                Some(ids) => ids
                    .iter()
                    .map(|s| Pathway::parse(s))
                    .collect::<matchbook::Result<_>>()?,
                None => vec![
                    Pathway::QLearning,
                    Pathway::Dqn {
                        hierarchical: false,
                    },
                    Pathway::HeAdPg,
                    Pathway::OaeAd {
                        mode: SuffixMode::OneStep,
                    },
                    Pathway::OaeAd {
                        mode: SuffixMode::MultiStep,
                    },
                    Pathway::OaeHeAd {
                        mode: SuffixMode::OneStep,
                    },
                    Pathway::OaeHeAd {
                        mode: SuffixMode::MultiStep,
                    },
                ],
            };
            let game = cfg.matrix()?.game_name;
            let dir = cfg.out_dir.join(format!("table-{game}"));
            write_resolved_config(&cfg, &dir)?;
            let rows = harness::run_table(&cfg, &pathway_list)?;
            harness::write_csv(&rows, &dir.join("results.csv"))?;
            harness::write_summary_json(&rows, &dir.join("summary.json"))?;
            print!("{}", harness::format_table(&rows));
            println!("outputs -> {}", dir.display());
        }
        Command::Transfer {
            config_source,
            config_target,
            out_dir,
        } => {
            let mut cfg_source = match &config_source {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::default(),
            };
            let mut cfg_target = match &config_target {
                Some(p) => ExperimentConfig::load(p)?,
                None => {
                    let mut c = ExperimentConfig::default();
                    c.game = "chicken".into();
                    c
                }
            };
            if let Some(dir) = out_dir {
                cfg_source.out_dir = dir.clone();
                cfg_target.out_dir = dir;
            }
            cfg_source.validate()?;
            cfg_target.validate()?;
            let report = harness::run_transfer(&cfg_source, &cfg_target)?;
            let dir = cfg_target.out_dir.join(format!(
                "transfer-{}-to-{}",
                cfg_source.matrix()?.game_name,
                cfg_target.matrix()?.game_name
            ));
            write_resolved_config(&cfg_target, &dir)?;
            std::fs::write(
                dir.join("resolved-config-source.toml"),
                cfg_source.to_toml(),
            )?;
            let rows = report.all_rows();
            harness::write_csv(&rows, &dir.join("results.csv"))?;
            harness::write_summary_json(&rows, &dir.join("summary.json"))?;
            println!(
                "reused checkpoints byte-identical to source: {}",
                report.reused_checkpoints_identical
            );
            for cell in &report.cells {
                println!(
                    "{} {:<4} new {:+.3} reused {:+.3} gap {:.3}",
                    cell.mode.tag(),
                    cell.pool.to_string(),
                    cell.mean_new(),
                    cell.mean_reused(),
                    cell.gap()
                );
            }
            println!("outputs -> {}", dir.display());
        }
    }
    Ok(())
}
