//! Recurrent deep Q-learning baseline: the current history is encoded with
//! a sequence encoder (history-level by default, hierarchical as an option),
//! a two-layer head predicts per-action values, and a lagged target network
//! stabilizes one-step temporal-difference updates from a replay buffer.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ActMode, HierEncoder, HierPlainState, PolicyArch};
use crate::encoding;
use crate::error::Result;
use crate::game::{payoff_lookup, Action, GameRecord, HistoryView, PayoffMatrix};
use crate::nn::{
    argmax_tie_low, Activation, FeedforwardSpec, LstmSpec, LstmState, NodeId, OptimizerKind,
    ParameterStore, Tape,
};

#[derive(Debug, Clone)]
pub struct DqnConfig {
    pub buffer_capacity: usize,
    pub batch: usize,
    pub gamma: f64,
    /// Target-network refresh period, in learning steps.
    pub sync_every: u64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Environment steps over which epsilon anneals linearly.
    pub eps_anneal_steps: u64,
    pub lr: f64,
    /// Encode with the full hierarchical stack instead of the history-level
    /// encoder alone.
    pub hierarchical: bool,
}

impl Default for DqnConfig {
    fn default() -> Self {
        DqnConfig {
            buffer_capacity: 10_000,
            batch: 32,
            gamma: 0.99,
            sync_every: 200,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_anneal_steps: 20_000,
            lr: 1e-3,
            hierarchical: false,
        }
    }
}

/// One stored step: the joint actions up to and including this turn, the
/// action taken, the stage reward, and whether the game ended here. The
/// state is the prefix before the final pair; the successor includes it.
#[derive(Debug, Clone)]
struct Transition {
    pairs_after: Vec<(Action, Action)>,
    action: usize,
    reward: f64,
    done: bool,
    /// Bootstrapped target cached per target-network version.
    cached_u: Option<(u64, f64)>,
}

enum Encoders {
    Hist(LstmSpec),
    Hier(HierEncoder),
}

struct DqnEpisode {
    mode: ActMode,
    processed: usize,
    pairs: Vec<(Action, Action)>,
    hist_state: Option<LstmState>,
    hier_state: Option<HierPlainState>,
    pending: Option<usize>,
    active: bool,
}

fn encode_tape(
    tape: &mut Tape,
    store: &ParameterStore,
    enc: &Encoders,
    arity: usize,
    pairs: &[(Action, Action)],
) -> NodeId {
    match enc {
        Encoders::Hist(spec) => {
            let steps: Vec<NodeId> = encoding::joint_steps(pairs, arity)
                .iter()
                .map(|s| tape.input(s))
                .collect();
            spec.encode(tape, store, &steps)
        }
        Encoders::Hier(he) => he.encode_tape(tape, store, pairs, None),
    }
}

pub struct DqnAgent {
    matrix: PayoffMatrix,
    pub arch: PolicyArch,
    pub cfg: DqnConfig,
    online: ParameterStore,
    target: ParameterStore,
    enc: Encoders,
    head: FeedforwardSpec,
    buffer: Vec<Transition>,
    write_idx: usize,
    pub env_steps: u64,
    pub learn_steps: u64,
    last_loss: Option<f64>,
    tape: Tape,
    ep: DqnEpisode,
}

impl DqnAgent {
    pub fn new(matrix: PayoffMatrix, arch: PolicyArch, cfg: DqnConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut online = ParameterStore::new();
        let enc = if cfg.hierarchical {
            Encoders::Hier(HierEncoder::register(&mut online, arch, false, &mut rng))
        } else {
            Encoders::Hist(LstmSpec::register(
                &mut online,
                "dqn.enc",
                encoding::joint_dim(arch.arity),
                arch.hidden,
                &mut rng,
            ))
        };
        let head = FeedforwardSpec::register(
            &mut online,
            "dqn.head",
            &[arch.hidden, arch.hidden, arch.arity],
            Activation::Tanh,
            Activation::Linear,
            &mut rng,
        );
        let target = online.clone();
        DqnAgent {
            matrix,
            arch,
            cfg,
            online,
            target,
            enc,
            head,
            buffer: Vec::new(),
            write_idx: 0,
            env_steps: 0,
            learn_steps: 0,
            last_loss: None,
            tape: Tape::new(),
            ep: DqnEpisode {
                mode: ActMode::Greedy,
                processed: 0,
                pairs: Vec::new(),
                hist_state: None,
                hier_state: None,
                pending: None,
                active: false,
            },
        }
    }

    pub fn hierarchical(&self) -> bool {
        self.cfg.hierarchical
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.last_loss
    }

    pub fn epsilon_now(&self) -> f64 {
        let frac = (self.env_steps as f64 / self.cfg.eps_anneal_steps as f64).min(1.0);
        self.cfg.eps_start + (self.cfg.eps_end - self.cfg.eps_start) * frac
    }

    pub fn begin_game(&mut self, mode: ActMode) {
        self.ep = DqnEpisode {
            mode,
            processed: 0,
            pairs: Vec::new(),
            hist_state: match &self.enc {
                Encoders::Hist(spec) => Some(spec.step_plain(
                    &self.online,
                    &encoding::joint_start(self.arch.arity),
                    &LstmState::zeros(spec.hidden),
                )),
                Encoders::Hier(_) => None,
            },
            hier_state: match &self.enc {
                Encoders::Hier(he) => Some(he.start_plain(&self.online)),
                Encoders::Hist(_) => None,
            },
            pending: None,
            active: true,
        };
    }

    fn push_transition(&mut self, t: Transition) {
        if self.buffer.len() < self.cfg.buffer_capacity {
            self.buffer.push(t);
        } else {
            self.buffer[self.write_idx] = t;
            self.write_idx = (self.write_idx + 1) % self.cfg.buffer_capacity;
        }
    }

    fn q_from_state(&self) -> Vec<f64> {
        let h: Vec<f64> = match &self.enc {
            Encoders::Hist(_) => self.ep.hist_state.as_ref().unwrap().h.clone(),
            Encoders::Hier(he) => {
                he.combine_plain(&self.online, self.ep.hier_state.as_ref().unwrap(), None)
            }
        };
        self.head.apply_plain(&self.online, &h)
    }

    /// Target-network value of a full prefix, without gradients.
    fn target_q(&self, pairs: &[(Action, Action)]) -> Vec<f64> {
        let h = match &self.enc {
            Encoders::Hist(spec) => {
                let steps = encoding::joint_steps(pairs, self.arch.arity);
                spec.encode_plain(&self.target, &steps)
            }
            Encoders::Hier(he) => he.encode_plain(&self.target, pairs, None),
        };
        self.head.apply_plain(&self.target, &h)
    }


    /// One uniform-minibatch temporal-difference step on the online network.
    fn learn(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        if self.buffer.is_empty() {
            return Ok(());
        }
        let picks: Vec<usize> = (0..self.cfg.batch)
            .map(|_| rng.gen_range(0..self.buffer.len()))
            .collect();
        // Bootstrap targets first; they are fixed between target syncs, so
        // cache them per target version.
        let target_version = self.learn_steps / self.cfg.sync_every;
        for &i in &picks {
            let needs = match self.buffer[i].cached_u {
                Some((v, _)) => v != target_version,
                None => true,
            };
            if needs {
                let txn = &self.buffer[i];
                let u = if txn.done {
                    txn.reward
                } else {
                    let next_q = self.target_q(&txn.pairs_after);
                    txn.reward
                        + self.cfg.gamma
                            * next_q.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                };
                self.buffer[i].cached_u = Some((target_version, u));
            }
        }
        self.tape.reset();
        let mut element_losses = Vec::with_capacity(picks.len());
        for &i in &picks {
            let (tape, online, enc, head, buffer) = (
                &mut self.tape,
                &self.online,
                &self.enc,
                &self.head,
                &self.buffer,
            );
            let txn = &buffer[i];
            let u = txn.cached_u.expect("target cached above").1;
            let prefix_len = txn.pairs_after.len() - 1;
            let h = encode_tape(tape, online, enc, self.arch.arity, &txn.pairs_after[..prefix_len]);
            let qs = head.apply(tape, online, h);
            let qa = tape.pick(qs, txn.action);
            let target = tape.input(&[u]);
            let diff = tape.sub(qa, target);
            element_losses.push(tape.square(diff));
        }
        let loss = self.tape.mean_stack(&element_losses);
        self.last_loss = Some(self.tape.scalar(loss));
        let grads = self.tape.backward(&self.online, loss);
        self.online.accumulate(&grads);
        self.online.optimizer_step(OptimizerKind::adam(), self.cfg.lr)?;
        self.learn_steps += 1;
        if self.learn_steps % self.cfg.sync_every == 0 {
            self.sync_target();
        }
        Ok(())
    }

    pub fn sync_target(&mut self) {
        for (id, e) in self.online.iter() {
            self.target.value_mut(id).copy_from_slice(&e.value);
        }
    }

    pub fn target_matches_online(&self) -> bool {
        self.online
            .iter()
            .all(|(id, e)| e.value == self.target.value(id))
    }

    fn ingest(&mut self, own: &[Action], theirs: &[Action], terminal: bool, rng: &mut ChaCha8Rng) {
        while self.ep.processed < own.len() {
            let i = self.ep.processed;
            let pair = (own[i], theirs[i]);
            self.ep.pairs.push(pair);
            match &self.enc {
                Encoders::Hist(spec) => {
                    let st = self.ep.hist_state.as_ref().unwrap();
                    let next = spec.step_plain(
                        &self.online,
                        &encoding::joint_step(pair, self.arch.arity),
                        st,
                    );
                    self.ep.hist_state = Some(next);
                }
                Encoders::Hier(he) => {
                    he.advance_plain(&self.online, self.ep.hier_state.as_mut().unwrap(), pair);
                }
            }
            self.ep.processed += 1;
            if self.ep.mode == ActMode::Train {
                if let Some(action) = self.ep.pending.take() {
                    let (r, _) = payoff_lookup(&self.matrix, pair.0, pair.1)
                        .expect("engine already validated actions");
                    let done = terminal && self.ep.processed == own.len();
                    self.push_transition(Transition {
                        pairs_after: self.ep.pairs.clone(),
                        action,
                        reward: r,
                        done,
                        cached_u: None,
                    });
                    self.learn(rng).expect("dqn learning step failed");
                }
            }
        }
    }

    pub fn act(&mut self, view: HistoryView<'_>, rng: &mut ChaCha8Rng) -> Action {
        assert!(self.ep.active, "act called outside a game");
        self.ingest(view.own, view.theirs, false, rng);
        let qs = self.q_from_state();
        let greedy = argmax_tie_low(&qs);
        let action = match self.ep.mode {
            ActMode::Train => {
                let eps = self.epsilon_now();
                self.env_steps += 1;
                if rng.gen_range(0.0..1.0) < eps {
                    rng.gen_range(0..self.arch.arity)
                } else {
                    greedy
                }
            }
            ActMode::Greedy => greedy,
        };
        if self.ep.mode == ActMode::Train {
            self.ep.pending = Some(action);
        }
        Action(action as u8)
    }

    /// Store the terminal transition and run its learning step.
    pub fn end_game(&mut self, record: &GameRecord) -> Result<()> {
        if self.ep.mode == ActMode::Train {
            let own: Vec<Action> = record.outcomes.iter().map(|o| o.a_learner).collect();
            let theirs: Vec<Action> = record.outcomes.iter().map(|o| o.a_opponent).collect();
            // Deterministic stream for replay sampling at the terminal step.
            let mut rng = ChaCha8Rng::seed_from_u64(self.env_steps ^ 0x9e37_79b9_7f4a_7c15);
            self.ingest(&own, &theirs, true, &mut rng);
        }
        self.ep.active = false;
        Ok(())
    }

    pub fn checkpoint_bytes(&self, game: &str) -> Vec<u8> {
        let mut meta = std::collections::BTreeMap::new();
        meta.insert("component".into(), "policy".into());
        meta.insert(
            "pathway".into(),
            if self.cfg.hierarchical { "dqn-he" } else { "dqn" }.into(),
        );
        meta.insert("game".into(), game.into());
        meta.insert("arity".into(), self.arch.arity.to_string());
        meta.insert("hidden".into(), self.arch.hidden.to_string());
        crate::nn::checkpoint::to_bytes(&self.online, &meta)
    }

    /// Rebuild from checkpoint bytes; the target net starts as a fresh copy.
    pub fn from_checkpoint(matrix: PayoffMatrix, cfg: DqnConfig, bytes: &[u8]) -> Result<Self> {
        use crate::error::Error;
        let (online, meta) = crate::nn::checkpoint::from_bytes(bytes)?;
        let parse_usize = |key: &str| -> Result<usize> {
            meta.get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Parse(format!("checkpoint metadata missing '{key}'")))
        };
        let arch = PolicyArch {
            arity: parse_usize("arity")?,
            hidden: parse_usize("hidden")?,
        };
        let hierarchical = meta.get("pathway").map(|p| p == "dqn-he").unwrap_or(false);
        let mut cfg = cfg;
        cfg.hierarchical = hierarchical;
        let enc = if hierarchical {
            Encoders::Hier(
                HierEncoder::lookup(&online, false)
                    .ok_or_else(|| Error::Parse("checkpoint is missing the encoder".into()))?,
            )
        } else {
            Encoders::Hist(
                LstmSpec::lookup(&online, "dqn.enc")
                    .ok_or_else(|| Error::Parse("checkpoint is missing dqn.enc".into()))?,
            )
        };
        let head =
            FeedforwardSpec::lookup(&online, "dqn.head", Activation::Tanh, Activation::Linear)
                .ok_or_else(|| Error::Parse("checkpoint is missing dqn.head".into()))?;
        let target = online.clone();
        Ok(DqnAgent {
            matrix,
            arch,
            cfg,
            online,
            target,
            enc,
            head,
            buffer: Vec::new(),
            write_idx: 0,
            env_steps: 0,
            learn_steps: 0,
            last_loss: None,
            tape: Tape::new(),
            ep: DqnEpisode {
                mode: ActMode::Greedy,
                processed: 0,
                pairs: Vec::new(),
                hist_state: None,
                hier_state: None,
                pending: None,
                active: false,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{play_repeated_game, GameConfig};
    use crate::policy::{LearnerAgent, LearnerSeat};
    use crate::strategies::{Strategy, StrategyKind};

    fn small_agent(seed: u64) -> DqnAgent {
        let cfg = DqnConfig {
            buffer_capacity: 100,
            batch: 4,
            sync_every: 10,
            eps_anneal_steps: 200,
            ..DqnConfig::default()
        };
        DqnAgent::new(
            PayoffMatrix::prisoners_dilemma(),
            PolicyArch {
                arity: 2,
                hidden: 4,
            },
            cfg,
            seed,
        )
    }

    #[test]
    fn ring_buffer_keeps_newest_at_capacity() {
        let mut a = small_agent(0);
        for i in 0..150usize {
            a.push_transition(Transition {
                pairs_after: vec![(Action(0), Action(0))],
                action: 0,
                reward: i as f64,
                done: false,
                cached_u: None,
            });
        }
        assert_eq!(a.buffer.len(), 100);
        let rewards: Vec<f64> = a.buffer.iter().map(|t| t.reward).collect();
        // 150 inserts into capacity 100: rewards 100..150 overwrote 0..50.
        for (i, r) in rewards.iter().enumerate() {
            let expect = if i < 50 { (i + 100) as f64 } else { i as f64 };
            assert_eq!(*r, expect);
        }
    }

    #[test]
    fn sync_copies_online_into_target() {
        let mut a = small_agent(1);
        // drift the online net
        let id = a.online.iter().next().map(|(id, _)| id).unwrap();
        a.online.value_mut(id)[0] += 1.0;
        assert!(!a.target_matches_online());
        a.sync_target();
        assert!(a.target_matches_online());
    }

    #[test]
    fn target_stays_constant_between_syncs() {
        let matrix = PayoffMatrix::prisoners_dilemma();
        let mut agent = LearnerAgent::Dqn(small_agent(2));
        let snapshot = |agent: &LearnerAgent| {
            let LearnerAgent::Dqn(a) = agent else {
                unreachable!()
            };
            let id = a.target.iter().next().map(|(id, _)| id).unwrap();
            a.target.value(id).to_vec()
        };
        let before = snapshot(&agent);
        // 9 learning steps < sync_every=10: the target must not move.
        agent.begin_game(ActMode::Train);
        let cfg = GameConfig::new("pd", 10, 3);
        let mut opp = Strategy::new(StrategyKind::TitForTat);
        let rec = {
            let mut seat = LearnerSeat {
                agent: &mut agent,
                memory: None,
            };
            play_repeated_game(&cfg, &matrix, &mut seat, &mut opp, "tft").unwrap()
        };
        let LearnerAgent::Dqn(a) = &agent else {
            unreachable!()
        };
        assert_eq!(a.learn_steps, 9, "one learning step per completed stage");
        assert_eq!(snapshot(&agent), before);
        let mut agent = agent;
        agent.end_game(&rec).unwrap(); // 10th step syncs
        let LearnerAgent::Dqn(a) = &agent else {
            unreachable!()
        };
        assert_eq!(a.learn_steps, 10);
        assert!(a.target_matches_online());
    }

    #[test]
    fn td_loss_matches_hand_computation_on_single_transition() {
        let mut a = small_agent(4);
        let pairs = vec![(Action(0), Action(1)), (Action(1), Action(1))];
        let txn = Transition {
            pairs_after: pairs.clone(),
            action: 1,
            reward: 5.0,
            done: false,
            cached_u: None,
        };
        a.push_transition(txn);
        a.cfg.batch = 1;

        // hand computation
        let prefix = &pairs[..1];
        let steps = encoding::joint_steps(prefix, 2);
        let Encoders::Hist(spec) = &a.enc else {
            unreachable!()
        };
        let h = spec.encode_plain(&a.online, &steps);
        let q = a.head.apply_plain(&a.online, &h);
        let next_q = a.target_q(&pairs);
        let u = 5.0 + a.cfg.gamma * next_q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let expected = (q[1] - u) * (q[1] - u);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        a.learn(&mut rng).unwrap();
        let got = a.last_loss().unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn terminal_transition_uses_raw_reward() {
        let mut a = small_agent(5);
        a.cfg.batch = 1;
        let pairs = vec![(Action(1), Action(0))];
        a.push_transition(Transition {
            pairs_after: pairs.clone(),
            action: 0,
            reward: 2.5,
            done: true,
            cached_u: None,
        });
        let steps = encoding::joint_steps(&[], 2);
        let Encoders::Hist(spec) = &a.enc else {
            unreachable!()
        };
        let h = spec.encode_plain(&a.online, &steps);
        let q = a.head.apply_plain(&a.online, &h);
        let expected = (q[0] - 2.5) * (q[0] - 2.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        a.learn(&mut rng).unwrap();
        assert!((a.last_loss().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn epsilon_anneals_linearly_to_floor() {
        let mut a = small_agent(6);
        assert_eq!(a.epsilon_now(), 1.0);
        a.env_steps = 100; // halfway over 200 steps
        assert!((a.epsilon_now() - (1.0 + (0.05 - 1.0) * 0.5)).abs() < 1e-12);
        a.env_steps = 10_000;
        assert!((a.epsilon_now() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn hierarchical_variant_plays_and_learns() {
        let cfg = DqnConfig {
            buffer_capacity: 64,
            batch: 2,
            sync_every: 5,
            hierarchical: true,
            ..DqnConfig::default()
        };
        let mut agent = LearnerAgent::Dqn(DqnAgent::new(
            PayoffMatrix::prisoners_dilemma(),
            PolicyArch {
                arity: 2,
                hidden: 4,
            },
            cfg,
            7,
        ));
        let matrix = PayoffMatrix::prisoners_dilemma();
        agent.begin_game(ActMode::Train);
        let game_cfg = GameConfig::new("pd", 8, 9);
        let mut opp = Strategy::new(StrategyKind::Alternator);
        let rec = {
            let mut seat = LearnerSeat {
                agent: &mut agent,
                memory: None,
            };
            play_repeated_game(&game_cfg, &matrix, &mut seat, &mut opp, "alternator").unwrap()
        };
        agent.end_game(&rec).unwrap();
        let LearnerAgent::Dqn(a) = &agent else {
            unreachable!()
        };
        assert_eq!(a.learn_steps, 8);
        assert!(a.last_loss().unwrap().is_finite());
    }
}
