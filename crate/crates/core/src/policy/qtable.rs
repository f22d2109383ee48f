//! Tabular Q-learning over a second-order state: the last two joint actions,
//! with an explicit start-padding symbol.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ActMode;
use crate::error::{Error, Result};
use crate::game::{payoff_lookup, Action, GameRecord, HistoryView, PayoffMatrix};
use crate::nn::argmax_tie_low;

pub struct QTableAgent {
    matrix: PayoffMatrix,
    arity: usize,
    /// `q[state * arity + action]`; state space (s^2+1)^2.
    q: Vec<f64>,
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
    mode: ActMode,
    processed: usize,
    last_pairs: Vec<(Action, Action)>,
    pending: Option<(usize, usize)>,
    active: bool,
}

impl QTableAgent {
    pub fn new(matrix: PayoffMatrix, alpha: f64, gamma: f64, epsilon: f64) -> Self {
        let arity = matrix.arity();
        let symbols = arity * arity + 1;
        QTableAgent {
            matrix,
            arity,
            q: vec![0.0; symbols * symbols * arity],
            alpha,
            gamma,
            epsilon,
            mode: ActMode::Greedy,
            processed: 0,
            last_pairs: Vec::new(),
            pending: None,
            active: false,
        }
    }

    pub fn state_count(&self) -> usize {
        let symbols = self.arity * self.arity + 1;
        symbols * symbols
    }

    fn joint_symbol(&self, pair: Option<(Action, Action)>) -> usize {
        match pair {
            Some((l, o)) => l.index() * self.arity + o.index(),
            None => self.arity * self.arity, // start padding
        }
    }

    /// State from the last two joint actions of the history.
    pub fn state_of(&self, pairs: &[(Action, Action)]) -> usize {
        let n = pairs.len();
        let prev1 = self.joint_symbol(pairs.last().copied());
        let prev2 = self.joint_symbol(if n >= 2 { Some(pairs[n - 2]) } else { None });
        let symbols = self.arity * self.arity + 1;
        prev2 * symbols + prev1
    }

    pub fn value(&self, state: usize, action: usize) -> f64 {
        self.q[state * self.arity + action]
    }

    /// One tabular backup. `next` is `None` on the terminal stage.
    pub fn qlearning_step(&mut self, state: usize, action: usize, reward: f64, next: Option<usize>) {
        let bootstrap = next.map_or(0.0, |s| {
            (0..self.arity)
                .map(|a| self.value(s, a))
                .fold(f64::NEG_INFINITY, f64::max)
        });
        let idx = state * self.arity + action;
        self.q[idx] += self.alpha * (reward + self.gamma * bootstrap - self.q[idx]);
    }

    pub fn begin_game(&mut self, mode: ActMode) {
        self.mode = mode;
        self.processed = 0;
        self.last_pairs.clear();
        self.pending = None;
        self.active = true;
    }

    fn ingest(&mut self, own: &[Action], theirs: &[Action], terminal: bool) {
        while self.processed < own.len() {
            let i = self.processed;
            let pair = (own[i], theirs[i]);
            if self.mode == ActMode::Train {
                if let Some((s, a)) = self.pending.take() {
                    let (r, _) = payoff_lookup(&self.matrix, pair.0, pair.1)
                        .expect("engine already validated actions");
                    self.last_pairs.push(pair);
                    let is_last_known = terminal && self.processed + 1 == own.len();
                    let next = if is_last_known {
                        None
                    } else {
                        Some(self.state_of(&self.last_pairs))
                    };
                    self.qlearning_step(s, a, r, next);
                    self.processed += 1;
                    continue;
                }
            }
            self.last_pairs.push(pair);
            self.processed += 1;
        }
    }

    pub fn act(&mut self, view: HistoryView<'_>, rng: &mut ChaCha8Rng) -> Action {
        assert!(self.active, "act called outside a game");
        self.ingest(view.own, view.theirs, false);
        let state = self.state_of(&self.last_pairs);
        let greedy = argmax_tie_low(&self.q[state * self.arity..(state + 1) * self.arity]);
        let action = match self.mode {
            ActMode::Train => {
                if rng.gen_range(0.0..1.0) < self.epsilon {
                    rng.gen_range(0..self.arity)
                } else {
                    greedy
                }
            }
            ActMode::Greedy => greedy,
        };
        if self.mode == ActMode::Train {
            self.pending = Some((state, action));
        }
        Action(action as u8)
    }

    /// Flush the final transition (terminal target: the stage reward alone).
    pub fn end_game(&mut self, record: &GameRecord) {
        if self.mode == ActMode::Train {
            let own: Vec<Action> = record.outcomes.iter().map(|o| o.a_learner).collect();
            let theirs: Vec<Action> = record.outcomes.iter().map(|o| o.a_opponent).collect();
            self.ingest(&own, &theirs, true);
        }
        self.active = false;
    }

    /// One line per state/action pair: `state<TAB>action<TAB>value`.
    pub fn serialize_records(&self) -> String {
        let mut out = String::new();
        for state in 0..self.state_count() {
            for action in 0..self.arity {
                out.push_str(&format!("{state}\t{action}\t{}\n", self.value(state, action)));
            }
        }
        out
    }

    pub fn load_records(&mut self, text: &str) -> Result<()> {
        let mut loaded = vec![0.0; self.q.len()];
        let mut seen = 0usize;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Parse(format!(
                    "q-table line {}: expected 3 fields",
                    lineno + 1
                )));
            }
            let state: usize = fields[0]
                .parse()
                .map_err(|_| Error::Parse(format!("q-table line {}: bad state", lineno + 1)))?;
            let action: usize = fields[1]
                .parse()
                .map_err(|_| Error::Parse(format!("q-table line {}: bad action", lineno + 1)))?;
            let value: f64 = fields[2]
                .parse()
                .map_err(|_| Error::Parse(format!("q-table line {}: bad value", lineno + 1)))?;
            if state >= self.state_count() || action >= self.arity {
                return Err(Error::Parse(format!(
                    "q-table line {}: entry outside the fixed state-action space",
                    lineno + 1
                )));
            }
            loaded[state * self.arity + action] = value;
            seen += 1;
        }
        if seen != self.q.len() {
            return Err(Error::Parse(format!(
                "q-table holds {seen} entries, expected {}",
                self.q.len()
            )));
        }
        self.q = loaded;
        Ok(())
    }
}
