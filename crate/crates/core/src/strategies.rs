//! Catalog of scripted opponent strategies and the old/new pool split.
//!
//! Strategies operate on action indices, so the same logic serves both
//! built-in games: index 0 is the yielding move (C / S), index 1 the
//! aggressive one (D / G). Definitions follow the classic tournament
//! semantics for each named strategy.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{Action, HistoryView, Player};

const C: Action = Action(0);
const D: Action = Action(1);

/// Every strategy shipped in the catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StrategyKind {
    Cooperator,
    Defector,
    Random,
    TitForTat,
    TitForTwoTats,
    Grudger,
    WinStayLoseShift,
    Alternator,
    SuspiciousTitForTat,
    SpitefulTitForTat,
    HardTitForTwoTats,
    HardTitForTat,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 12] = [
        StrategyKind::Cooperator,
        StrategyKind::Defector,
        StrategyKind::Random,
        StrategyKind::TitForTat,
        StrategyKind::TitForTwoTats,
        StrategyKind::Grudger,
        StrategyKind::WinStayLoseShift,
        StrategyKind::Alternator,
        StrategyKind::SuspiciousTitForTat,
        StrategyKind::SpitefulTitForTat,
        StrategyKind::HardTitForTwoTats,
        StrategyKind::HardTitForTat,
    ];

    pub fn id(self) -> &'static str {
        match self {
            StrategyKind::Cooperator => "cooperator",
            StrategyKind::Defector => "defector",
            StrategyKind::Random => "random",
            StrategyKind::TitForTat => "tit-for-tat",
            StrategyKind::TitForTwoTats => "tit-for-two-tats",
            StrategyKind::Grudger => "grudger",
            StrategyKind::WinStayLoseShift => "win-stay-lose-shift",
            StrategyKind::Alternator => "alternator",
            StrategyKind::SuspiciousTitForTat => "suspicious-tit-for-tat",
            StrategyKind::SpitefulTitForTat => "spiteful-tit-for-tat",
            StrategyKind::HardTitForTwoTats => "hard-tit-for-two-tats",
            StrategyKind::HardTitForTat => "hard-tit-for-tat",
        }
    }

    pub fn by_id(id: &str) -> Result<StrategyKind> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.id() == id)
            .ok_or_else(|| Error::Config(format!("unknown strategy id '{id}'")))
    }

    /// Whether the strategy draws random moves (and so needs a seed to replay).
    pub fn is_stochastic(self) -> bool {
        matches!(self, StrategyKind::Random)
    }
}

/// A strategy instance usable as a game [`Player`]. All catalog strategies are
/// total functions of the observable history, so instances carry no hidden
/// state and can be reused across games.
#[derive(Debug, Clone, Copy)]
pub struct Strategy {
    pub kind: StrategyKind,
}

impl Strategy {
    pub fn new(kind: StrategyKind) -> Self {
        Strategy { kind }
    }

    pub fn id(&self) -> &'static str {
        self.kind.id()
    }

    /// Next move given both players' past actions.
    pub fn step(&self, own: &[Action], theirs: &[Action], rng: &mut ChaCha8Rng) -> Action {
        debug_assert_eq!(own.len(), theirs.len());
        let last = theirs.last().copied();
        match self.kind {
            StrategyKind::Cooperator => C,
            StrategyKind::Defector => D,
            StrategyKind::Random => {
                if rng.gen_bool(0.5) {
                    C
                } else {
                    D
                }
            }
            StrategyKind::TitForTat => last.unwrap_or(C),
            StrategyKind::TitForTwoTats => {
                if theirs.len() >= 2 && theirs[theirs.len() - 2..] == [D, D] {
                    D
                } else {
                    C
                }
            }
            StrategyKind::Grudger => {
                if theirs.contains(&D) {
                    D
                } else {
                    C
                }
            }
            StrategyKind::WinStayLoseShift => match (own.last(), last) {
                (Some(&mine), Some(their)) => {
                    // Opponent cooperation is a win: repeat. Defection: flip.
                    if their == C {
                        mine
                    } else {
                        mine.flipped()
                    }
                }
                _ => C,
            },
            StrategyKind::Alternator => {
                if own.len() % 2 == 0 {
                    C
                } else {
                    D
                }
            }
            StrategyKind::SuspiciousTitForTat => last.unwrap_or(D),
            StrategyKind::SpitefulTitForTat => {
                let betrayed = theirs.windows(2).any(|w| w == [D, D]);
                if betrayed {
                    D
                } else {
                    last.unwrap_or(C)
                }
            }
            StrategyKind::HardTitForTwoTats => {
                // Retaliates against two consecutive defections anywhere in
                // the opponent's last three moves.
                let tail = &theirs[theirs.len().saturating_sub(3)..];
                if tail.windows(2).any(|w| w == [D, D]) {
                    D
                } else {
                    C
                }
            }
            StrategyKind::HardTitForTat => {
                let tail = &theirs[theirs.len().saturating_sub(3)..];
                if tail.contains(&D) {
                    D
                } else {
                    C
                }
            }
        }
    }
}

impl Player for Strategy {
    fn choose(&mut self, view: HistoryView<'_>, rng: &mut ChaCha8Rng) -> Action {
        self.step(view.own, view.theirs, rng)
    }
}

/// Which half of the pool to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolSide {
    Old,
    New,
}

impl std::fmt::Display for PoolSide {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PoolSide::Old => write!(f, "old"),
            PoolSide::New => write!(f, "new"),
        }
    }
}

/// Training (old) and held-out (new) opponent sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyPool {
    pub old: Vec<String>,
    pub new: Vec<String>,
}

impl StrategyPool {
    /// Default split: the held-out side is the reactive tit-for-tat family,
    /// variants of strategies seen in training.
    pub fn default_split() -> Self {
        StrategyPool {
            old: vec![
                "cooperator".into(),
                "defector".into(),
                "random".into(),
                "tit-for-tat".into(),
                "grudger".into(),
                "win-stay-lose-shift".into(),
                "alternator".into(),
            ],
            new: vec![
                "suspicious-tit-for-tat".into(),
                "spiteful-tit-for-tat".into(),
                "hard-tit-for-two-tats".into(),
                "tit-for-two-tats".into(),
                "hard-tit-for-tat".into(),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.old.is_empty() || self.new.is_empty() {
            return Err(Error::Config("both pool sides must be nonempty".into()));
        }
        for id in self.old.iter().chain(&self.new) {
            StrategyKind::by_id(id)?;
        }
        if let Some(dup) = self.old.iter().find(|id| self.new.contains(id)) {
            return Err(Error::Config(format!(
                "strategy '{dup}' appears in both the old and new pools"
            )));
        }
        Ok(())
    }

    pub fn side(&self, which: PoolSide) -> &[String] {
        match which {
            PoolSide::Old => &self.old,
            PoolSide::New => &self.new,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let pool: StrategyPool =
            toml::from_str(text).map_err(|e| Error::Parse(format!("strategy pool: {e}")))?;
        pool.validate()?;
        Ok(pool)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("pool serializes")
    }
}

/// Uniformly sample an opponent from one side of the pool.
pub fn sample_opponent(pool: &StrategyPool, which: PoolSide, rng: &mut ChaCha8Rng) -> Result<Strategy> {
    let side = pool.side(which);
    if side.is_empty() {
        return Err(Error::Domain(format!("{which} pool is empty")));
    }
    let idx = rng.gen_range(0..side.len());
    Ok(Strategy::new(StrategyKind::by_id(&side[idx])?))
}
