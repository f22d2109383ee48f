//! Stage and repeated game execution: actions, payoff tables, scoring.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One move in a stage game, identified by its index into the game's action alphabet.
///
/// Index 0 is the cooperative move ("C" in the dilemma game, "S" in chicken);
/// index 1 is the aggressive move. Labels live on the [`PayoffMatrix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action(pub u8);

impl Action {
    pub const COOPERATE: Action = Action(0);
    pub const DEFECT: Action = Action(1);

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// The other move in a two-action game.
    pub fn flipped(self) -> Action {
        Action(1 - self.0)
    }
}

/// A complete two-player simultaneous-move payoff table.
///
/// The row player is always the learner, the column player the opponent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayoffMatrix {
    pub game_name: String,
    pub labels: Vec<String>,
    /// `entries[row][col] = (reward_row, reward_col)`.
    pub entries: Vec<Vec<(f64, f64)>>,
}

impl PayoffMatrix {
    /// The standard two-action dilemma game: mutual cooperation pays (3,3),
    /// mutual defection (1,1), and a unilateral defector takes 5 against 0.
    pub fn prisoners_dilemma() -> Self {
        PayoffMatrix {
            game_name: "pd".to_string(),
            labels: vec!["C".to_string(), "D".to_string()],
            entries: vec![
                vec![(3.0, 3.0), (0.0, 5.0)],
                vec![(5.0, 0.0), (1.0, 1.0)],
            ],
        }
    }

    /// Chicken: swerving against a swerver pays (2,2), going straight against a
    /// swerver takes 5 against 1, and a mutual crash pays (0,0).
    pub fn chicken() -> Self {
        PayoffMatrix {
            game_name: "chicken".to_string(),
            labels: vec!["S".to_string(), "G".to_string()],
            entries: vec![
                vec![(2.0, 2.0), (1.0, 5.0)],
                vec![(5.0, 1.0), (0.0, 0.0)],
            ],
        }
    }

    /// Look up a built-in game by name.
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "pd" => Ok(Self::prisoners_dilemma()),
            "chicken" => Ok(Self::chicken()),
            other => Err(Error::Config(format!("unknown game '{other}'"))),
        }
    }

    /// Number of actions per player.
    pub fn arity(&self) -> usize {
        self.labels.len()
    }

    pub fn label(&self, a: Action) -> &str {
        &self.labels[a.index()]
    }

    pub fn action_by_label(&self, label: &str) -> Result<Action> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| Action(i as u8))
            .ok_or_else(|| Error::Domain(format!("no action labelled '{label}' in {}", self.game_name)))
    }

    fn check_action(&self, a: Action) -> Result<()> {
        if a.index() < self.arity() {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "action index {} out of range for {} ({} actions)",
                a.index(),
                self.game_name,
                self.arity()
            )))
        }
    }

    /// Validate that the table is complete and square.
    pub fn validate(&self) -> Result<()> {
        let s = self.arity();
        if s == 0 {
            return Err(Error::Config("payoff matrix has no actions".into()));
        }
        if self.entries.len() != s || self.entries.iter().any(|row| row.len() != s) {
            return Err(Error::Config(format!(
                "payoff table for {} is not a complete {s}x{s} grid",
                self.game_name
            )));
        }
        Ok(())
    }

    /// Parse a game definition from a small TOML document:
    ///
    /// ```toml
    /// name = "pd"
    /// labels = ["C", "D"]
    /// payoffs = [[[3, 3], [0, 5]], [[5, 0], [1, 1]]]
    /// ```
    pub fn from_toml(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            name: String,
            labels: Vec<String>,
            payoffs: Vec<Vec<[f64; 2]>>,
        }
        let doc: Doc =
            toml::from_str(text).map_err(|e| Error::Parse(format!("game definition: {e}")))?;
        let m = PayoffMatrix {
            game_name: doc.name,
            labels: doc.labels,
            entries: doc
                .payoffs
                .into_iter()
                .map(|row| row.into_iter().map(|[a, b]| (a, b)).collect())
                .collect(),
        };
        m.validate()?;
        Ok(m)
    }
}

/// Returns the (row, col) reward pair for a joint action.
pub fn payoff_lookup(m: &PayoffMatrix, a_row: Action, a_col: Action) -> Result<(f64, f64)> {
    m.check_action(a_row)?;
    m.check_action(a_col)?;
    Ok(m.entries[a_row.index()][a_col.index()])
}

/// One completed stage of a repeated game. Turns count from 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub turn: usize,
    pub a_learner: Action,
    pub a_opponent: Action,
    pub r_learner: f64,
    pub r_opponent: f64,
}

/// Play one stage and record the rewards.
pub fn play_stage(m: &PayoffMatrix, a_l: Action, a_o: Action, turn: usize) -> Result<StageOutcome> {
    if turn < 1 {
        return Err(Error::Domain("stage turns count from 1".into()));
    }
    let (r_learner, r_opponent) = payoff_lookup(m, a_l, a_o)?;
    Ok(StageOutcome {
        turn,
        a_learner: a_l,
        a_opponent: a_o,
        r_learner,
        r_opponent,
    })
}

/// Arithmetic mean of stage rewards.
pub fn average_reward(rewards: &[f64]) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::Domain("cannot average an empty reward list".into()));
    }
    Ok(rewards.iter().sum::<f64>() / rewards.len() as f64)
}

/// A terminated repeated game with final scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameRecord {
    pub outcomes: Vec<StageOutcome>,
    pub r_learner: f64,
    pub r_opponent: f64,
    pub delta_r: f64,
    pub opponent_id: String,
}

impl GameRecord {
    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    /// Joint actions as (learner, opponent) pairs.
    pub fn pairs(&self) -> impl Iterator<Item = (Action, Action)> + '_ {
        self.outcomes.iter().map(|o| (o.a_learner, o.a_opponent))
    }

    /// Build a record from outcomes, deriving the average-reward scores.
    pub fn from_outcomes(outcomes: Vec<StageOutcome>, opponent_id: String) -> Result<Self> {
        let r_learner = average_reward(&outcomes.iter().map(|o| o.r_learner).collect::<Vec<_>>())?;
        let r_opponent =
            average_reward(&outcomes.iter().map(|o| o.r_opponent).collect::<Vec<_>>())?;
        Ok(GameRecord {
            outcomes,
            r_learner,
            r_opponent,
            delta_r: r_learner - r_opponent,
            opponent_id,
        })
    }
}

/// Final score difference, the evaluation metric for a single game.
pub fn score_difference(rec: &GameRecord) -> f64 {
    rec.r_learner - rec.r_opponent
}

/// Parameters for one repeated game.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GameConfig {
    pub game_name: String,
    /// Number of stage games. Hidden from both players during play.
    pub turns: usize,
    pub seed: u64,
}

impl GameConfig {
    pub fn new(game_name: impl Into<String>, turns: usize, seed: u64) -> Self {
        GameConfig {
            game_name: game_name.into(),
            turns,
            seed,
        }
    }
}

/// What a player is allowed to observe mid-game: both players' past moves,
/// in its own seat order. The total number of turns is deliberately absent.
#[derive(Debug, Clone, Copy)]
pub struct HistoryView<'a> {
    pub own: &'a [Action],
    pub theirs: &'a [Action],
}

impl<'a> HistoryView<'a> {
    pub fn turns_played(&self) -> usize {
        self.own.len()
    }
}

/// A player callback in a repeated game. Receives only the observable history
/// and a private RNG stream; never the turn limit.
pub trait Player {
    fn choose(&mut self, view: HistoryView<'_>, rng: &mut ChaCha8Rng) -> Action;
}

impl<F> Player for F
where
    F: FnMut(HistoryView<'_>, &mut ChaCha8Rng) -> Action,
{
    fn choose(&mut self, view: HistoryView<'_>, rng: &mut ChaCha8Rng) -> Action {
        self(view, rng)
    }
}

/// Play a full repeated game between a learner (row seat) and an opponent
/// (column seat). Each seat gets its own RNG stream derived from the config seed.
pub fn play_repeated_game(
    cfg: &GameConfig,
    matrix: &PayoffMatrix,
    learner: &mut dyn Player,
    opponent: &mut dyn Player,
    opponent_id: &str,
) -> Result<GameRecord> {
    if cfg.turns < 1 {
        return Err(Error::Domain("a repeated game needs at least one turn".into()));
    }
    let mut rng_l = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_l.set_stream(1);
    let mut rng_o = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_o.set_stream(2);

    let mut learner_past: Vec<Action> = Vec::with_capacity(cfg.turns);
    let mut opponent_past: Vec<Action> = Vec::with_capacity(cfg.turns);
    let mut outcomes = Vec::with_capacity(cfg.turns);

    for turn in 1..=cfg.turns {
        let a_l = learner.choose(
            HistoryView {
                own: &learner_past,
                theirs: &opponent_past,
            },
            &mut rng_l,
        );
        let a_o = opponent.choose(
            HistoryView {
                own: &opponent_past,
                theirs: &learner_past,
            },
            &mut rng_o,
        );
        for (seat, a) in [("learner", a_l), ("opponent", a_o)] {
            if a.index() >= matrix.arity() {
                return Err(Error::Protocol(format!(
                    "{seat} returned action index {} at turn {turn}, but {} has only {} actions",
                    a.index(),
                    matrix.game_name,
                    matrix.arity()
                )));
            }
        }
        outcomes.push(play_stage(matrix, a_l, a_o, turn)?);
        learner_past.push(a_l);
        opponent_past.push(a_o);
    }

    GameRecord::from_outcomes(outcomes, opponent_id.to_string())
}
