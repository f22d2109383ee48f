//! The learner's decision stack: hierarchical history encoding, action
//! decoding, policy-gradient training, and the two value-based baselines.

mod dqn;
mod qtable;

pub use dqn::{DqnAgent, DqnConfig};
pub use qtable::QTableAgent;

use std::collections::BTreeMap;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoding;
use crate::error::{Error, Result};
use crate::game::{score_difference, Action, GameRecord, HistoryView, PayoffMatrix, Player};
use crate::memory::{CurrentHistory, PastMemory, SuffixMode};
use crate::nn::{
    argmax_tie_low, sample_categorical, softmax_plain, Activation, FeedforwardSpec, LstmSpec,
    LstmState, NodeId, OptimizerKind, ParameterStore, Tape,
};
use crate::estimator::FrozenEstimator;
use crate::retrieval::top_k_similar;

/// How an agent picks actions: stochastically while learning, by argmax
/// (lowest index on ties) when evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Train,
    Greedy,
}

/// Every pathway the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pathway {
    QLearning,
    Dqn { hierarchical: bool },
    /// History-level encoder only, policy-gradient trained.
    Pg,
    /// Full hierarchical encoder, policy-gradient trained.
    HeAdPg,
    /// Decoder directly over the frozen estimate vector.
    OaeAd { mode: SuffixMode },
    /// Hierarchical encoder fused with the estimate vector.
    OaeHeAd { mode: SuffixMode },
}

impl Pathway {
    pub fn id(&self) -> &'static str {
        match self {
            Pathway::QLearning => "q-learning",
            Pathway::Dqn { hierarchical: false } => "dqn",
            Pathway::Dqn { hierarchical: true } => "dqn-he",
            Pathway::Pg => "pg",
            Pathway::HeAdPg => "he-ad-pg",
            Pathway::OaeAd { mode: SuffixMode::OneStep } => "o-oae-ad",
            Pathway::OaeAd { mode: SuffixMode::MultiStep } => "m-oae-ad",
            Pathway::OaeHeAd { mode: SuffixMode::OneStep } => "o-oae-he-ad",
            Pathway::OaeHeAd { mode: SuffixMode::MultiStep } => "m-oae-he-ad",
        }
    }

    pub const ALL: [Pathway; 9] = [
        Pathway::QLearning,
        Pathway::Dqn { hierarchical: false },
        Pathway::Dqn { hierarchical: true },
        Pathway::Pg,
        Pathway::HeAdPg,
        Pathway::OaeAd { mode: SuffixMode::OneStep },
        Pathway::OaeAd { mode: SuffixMode::MultiStep },
        Pathway::OaeHeAd { mode: SuffixMode::OneStep },
        Pathway::OaeHeAd { mode: SuffixMode::MultiStep },
    ];

    pub fn parse(s: &str) -> Result<Pathway> {
        Pathway::ALL
            .into_iter()
            .find(|p| p.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown pathway '{s}'")))
    }

    /// The estimator variant this pathway depends on, if any.
    pub fn oae_mode(&self) -> Option<SuffixMode> {
        match self {
            Pathway::OaeAd { mode } | Pathway::OaeHeAd { mode } => Some(*mode),
            _ => None,
        }
    }

    pub fn uses_memory(&self) -> bool {
        self.oae_mode().is_some()
    }
}

/// Width settings shared by the policy networks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyArch {
    pub arity: usize,
    pub hidden: usize,
}

/// Two action-level encoders plus one history-level encoder, fused by a
/// combining layer into the decision representation (optionally together
/// with the estimate vector).
#[derive(Debug, Clone)]
pub struct HierEncoder {
    pub self_enc: LstmSpec,
    pub oppo_enc: LstmSpec,
    pub hist_enc: LstmSpec,
    pub combine: FeedforwardSpec,
    pub with_estimate: bool,
}

/// Incremental tape states for the three encoders.
pub struct HierTapeState {
    self_s: (NodeId, NodeId),
    oppo_s: (NodeId, NodeId),
    hist_s: (NodeId, NodeId),
}

/// Incremental plain states for the three encoders.
#[derive(Debug, Clone)]
pub struct HierPlainState {
    self_s: LstmState,
    oppo_s: LstmState,
    hist_s: LstmState,
}

impl HierEncoder {
    pub fn register(
        store: &mut ParameterStore,
        arch: PolicyArch,
        with_estimate: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = arch.hidden;
        let sd = encoding::single_dim(arch.arity);
        let jd = encoding::joint_dim(arch.arity);
        let self_enc = LstmSpec::register(store, "he.self", sd, d, rng);
        let oppo_enc = LstmSpec::register(store, "he.oppo", sd, d, rng);
        let hist_enc = LstmSpec::register(store, "he.hist", jd, d, rng);
        let combine_in = if with_estimate { 4 * d } else { 3 * d };
        let combine = FeedforwardSpec::register(
            store,
            "he.combine",
            &[combine_in, d],
            Activation::Tanh,
            Activation::Tanh,
            rng,
        );
        HierEncoder {
            self_enc,
            oppo_enc,
            hist_enc,
            combine,
            with_estimate,
        }
    }

    pub fn lookup(store: &ParameterStore, with_estimate: bool) -> Option<Self> {
        Some(HierEncoder {
            self_enc: LstmSpec::lookup(store, "he.self")?,
            oppo_enc: LstmSpec::lookup(store, "he.oppo")?,
            hist_enc: LstmSpec::lookup(store, "he.hist")?,
            combine: FeedforwardSpec::lookup(store, "he.combine", Activation::Tanh, Activation::Tanh)?,
            with_estimate,
        })
    }

    fn arity(&self) -> usize {
        self.self_enc.input_dim - 1
    }

    pub fn start_tape(&self, tape: &mut Tape, store: &ParameterStore) -> HierTapeState {
        let s = self.arity();
        let single = tape.input(&encoding::single_start(s));
        let joint = tape.input(&encoding::joint_start(s));
        let z_self = self.self_enc.zero_state(tape);
        let z_oppo = self.oppo_enc.zero_state(tape);
        let z_hist = self.hist_enc.zero_state(tape);
        HierTapeState {
            self_s: self.self_enc.step(tape, store, single, z_self),
            oppo_s: self.oppo_enc.step(tape, store, single, z_oppo),
            hist_s: self.hist_enc.step(tape, store, joint, z_hist),
        }
    }

    pub fn advance_tape(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        st: &mut HierTapeState,
        pair: (Action, Action),
    ) {
        let s = self.arity();
        let x_self = tape.input(&encoding::single_step(pair.0, s));
        let x_oppo = tape.input(&encoding::single_step(pair.1, s));
        let x_hist = tape.input(&encoding::joint_step(pair, s));
        st.self_s = self.self_enc.step(tape, store, x_self, st.self_s);
        st.oppo_s = self.oppo_enc.step(tape, store, x_oppo, st.oppo_s);
        st.hist_s = self.hist_enc.step(tape, store, x_hist, st.hist_s);
    }

    /// Fuse the current encoder states (plus the estimate vector when the
    /// combine layer expects one) into the decision representation.
    pub fn combine_tape(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        st: &HierTapeState,
        estimate: Option<NodeId>,
    ) -> NodeId {
        let mut parts = vec![st.self_s.0, st.oppo_s.0, st.hist_s.0];
        match (self.with_estimate, estimate) {
            (true, Some(e)) => parts.push(e),
            (false, None) => {}
            (true, None) => panic!("combine layer expects an estimate vector"),
            (false, Some(_)) => panic!("combine layer was built without an estimate input"),
        }
        let cat = tape.concat(&parts);
        self.combine.apply(tape, store, cat)
    }

    /// Whole-sequence encoding on the tape (used by batched learners).
    pub fn encode_tape(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        pairs: &[(Action, Action)],
        estimate: Option<NodeId>,
    ) -> NodeId {
        let mut st = self.start_tape(tape, store);
        for &p in pairs {
            self.advance_tape(tape, store, &mut st, p);
        }
        self.combine_tape(tape, store, &st, estimate)
    }

    pub fn start_plain(&self, store: &ParameterStore) -> HierPlainState {
        let s = self.arity();
        let d = self.self_enc.hidden;
        let single = encoding::single_start(s);
        let joint = encoding::joint_start(s);
        HierPlainState {
            self_s: self.self_enc.step_plain(store, &single, &LstmState::zeros(d)),
            oppo_s: self.oppo_enc.step_plain(store, &single, &LstmState::zeros(d)),
            hist_s: self.hist_enc.step_plain(store, &joint, &LstmState::zeros(d)),
        }
    }

    pub fn advance_plain(
        &self,
        store: &ParameterStore,
        st: &mut HierPlainState,
        pair: (Action, Action),
    ) {
        let s = self.arity();
        st.self_s = self
            .self_enc
            .step_plain(store, &encoding::single_step(pair.0, s), &st.self_s);
        st.oppo_s = self
            .oppo_enc
            .step_plain(store, &encoding::single_step(pair.1, s), &st.oppo_s);
        st.hist_s = self
            .hist_enc
            .step_plain(store, &encoding::joint_step(pair, s), &st.hist_s);
    }

    pub fn combine_plain(
        &self,
        store: &ParameterStore,
        st: &HierPlainState,
        estimate: Option<&[f64]>,
    ) -> Vec<f64> {
        let mut cat = Vec::with_capacity(self.combine.input_dim());
        cat.extend_from_slice(&st.self_s.h);
        cat.extend_from_slice(&st.oppo_s.h);
        cat.extend_from_slice(&st.hist_s.h);
        if let Some(e) = estimate {
            assert!(self.with_estimate, "unexpected estimate input");
            cat.extend_from_slice(e);
        } else {
            assert!(!self.with_estimate, "missing estimate input");
        }
        self.combine.apply_plain(store, &cat)
    }

    pub fn encode_plain(
        &self,
        store: &ParameterStore,
        pairs: &[(Action, Action)],
        estimate: Option<&[f64]>,
    ) -> Vec<f64> {
        let mut st = self.start_plain(store);
        for &p in pairs {
            self.advance_plain(store, &mut st, p);
        }
        self.combine_plain(store, &st, estimate)
    }
}

/// Per-game trace: one sampled action and one log-probability node per turn,
/// scaled by the final score difference at the end of the game.
struct Episode {
    mode: ActMode,
    processed: usize,
    pairs: Vec<(Action, Action)>,
    he_tape: Option<HierTapeState>,
    hist_tape: Option<(NodeId, NodeId)>,
    he_plain: Option<HierPlainState>,
    hist_plain: Option<LstmState>,
    query: Option<LstmState>,
    logps: Vec<NodeId>,
    actions: Vec<Action>,
    active: bool,
}

impl Episode {
    fn inactive() -> Self {
        Episode {
            mode: ActMode::Greedy,
            processed: 0,
            pairs: Vec::new(),
            he_tape: None,
            hist_tape: None,
            he_plain: None,
            hist_plain: None,
            query: None,
            logps: Vec::new(),
            actions: Vec::new(),
            active: false,
        }
    }
}

/// A policy-gradient learner for the `pg`, `he-ad-pg`, `*-oae-ad` and
/// `*-oae-he-ad` pathways. Owns its weights; the estimator, when present, is
/// frozen and queried without gradients.
pub struct PolicyAgent {
    pub pathway: Pathway,
    pub arch: PolicyArch,
    pub store: ParameterStore,
    he: Option<HierEncoder>,
    hist: Option<LstmSpec>,
    decoder: FeedforwardSpec,
    pub oae: Option<FrozenEstimator>,
    pub k: usize,
    pub lr: f64,
    /// Optional moving-average return baseline (off by default).
    pub use_baseline: bool,
    baseline: f64,
    baseline_count: u64,
    tape: Tape,
    ep: Episode,
}

impl PolicyAgent {
    pub fn new(
        pathway: Pathway,
        arch: PolicyArch,
        k: usize,
        lr: f64,
        use_baseline: bool,
        oae: Option<FrozenEstimator>,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let d = arch.hidden;
        let (he, hist) = match pathway {
            Pathway::Pg => (
                None,
                Some(LstmSpec::register(
                    &mut store,
                    "hist",
                    encoding::joint_dim(arch.arity),
                    d,
                    &mut rng,
                )),
            ),
            Pathway::HeAdPg => (
                Some(HierEncoder::register(&mut store, arch, false, &mut rng)),
                None,
            ),
            Pathway::OaeAd { .. } => (None, None),
            Pathway::OaeHeAd { .. } => (
                Some(HierEncoder::register(&mut store, arch, true, &mut rng)),
                None,
            ),
            other => {
                return Err(Error::Config(format!(
                    "pathway '{}' is not policy-gradient trained",
                    other.id()
                )))
            }
        };
        let decoder = FeedforwardSpec::register(
            &mut store,
            "decoder",
            &[d, arch.arity],
            Activation::Tanh,
            Activation::Linear,
            &mut rng,
        );
        if let Some(mode) = pathway.oae_mode() {
            let est = oae
                .as_ref()
                .ok_or_else(|| Error::Config(format!("pathway '{}' needs a trained estimator", pathway.id())))?;
            if est.mode() != mode {
                return Err(Error::Config(format!(
                    "pathway '{}' needs a {} estimator, got {}",
                    pathway.id(),
                    mode.tag(),
                    est.mode().tag()
                )));
            }
            if est.hidden() != d || est.est.arch.arity != arch.arity {
                return Err(Error::Config(
                    "estimator checkpoint shape does not match the policy architecture".into(),
                ));
            }
        } else if oae.is_some() {
            return Err(Error::Config(format!(
                "pathway '{}' does not take an estimator",
                pathway.id()
            )));
        }
        Ok(PolicyAgent {
            pathway,
            arch,
            store,
            he,
            hist,
            decoder,
            oae,
            k,
            lr,
            use_baseline,
            baseline: 0.0,
            baseline_count: 0,
            tape: Tape::new(),
            ep: Episode::inactive(),
        })
    }

    pub fn begin_game(&mut self, mode: ActMode) {
        self.tape.reset();
        let mut ep = Episode::inactive();
        ep.mode = mode;
        ep.active = true;
        match mode {
            ActMode::Train => {
                if let Some(he) = &self.he {
                    ep.he_tape = Some(he.start_tape(&mut self.tape, &self.store));
                }
                if let Some(hist) = &self.hist {
                    let x = self.tape.input(&encoding::joint_start(self.arch.arity));
                    let z = hist.zero_state(&mut self.tape);
                    ep.hist_tape = Some(hist.step(&mut self.tape, &self.store, x, z));
                }
            }
            ActMode::Greedy => {
                if let Some(he) = &self.he {
                    ep.he_plain = Some(he.start_plain(&self.store));
                }
                if let Some(hist) = &self.hist {
                    let d = hist.hidden;
                    ep.hist_plain = Some(hist.step_plain(
                        &self.store,
                        &encoding::joint_start(self.arch.arity),
                        &LstmState::zeros(d),
                    ));
                }
            }
        }
        if let Some(oae) = &self.oae {
            ep.query = Some(oae.query_start());
        }
        self.ep = ep;
    }

    fn ingest(&mut self, view: HistoryView<'_>) {
        let total = view.own.len();
        while self.ep.processed < total {
            let i = self.ep.processed;
            let pair = (view.own[i], view.theirs[i]);
            match self.ep.mode {
                ActMode::Train => {
                    if let (Some(he), Some(st)) = (&self.he, self.ep.he_tape.as_mut()) {
                        he.advance_tape(&mut self.tape, &self.store, st, pair);
                    }
                    if let (Some(hist), Some(st)) = (&self.hist, self.ep.hist_tape.as_mut()) {
                        let x = self
                            .tape
                            .input(&encoding::joint_step(pair, self.arch.arity));
                        *st = hist.step(&mut self.tape, &self.store, x, *st);
                    }
                }
                ActMode::Greedy => {
                    if let (Some(he), Some(st)) = (&self.he, self.ep.he_plain.as_mut()) {
                        he.advance_plain(&self.store, st, pair);
                    }
                    if let (Some(hist), Some(st)) = (&self.hist, self.ep.hist_plain.as_mut()) {
                        *st = hist.step_plain(
                            &self.store,
                            &encoding::joint_step(pair, self.arch.arity),
                            st,
                        );
                    }
                }
            }
            if let (Some(oae), Some(q)) = (&self.oae, self.ep.query.as_ref()) {
                self.ep.query = Some(oae.query_advance(q, pair));
            }
            self.ep.pairs.push(pair);
            self.ep.processed += 1;
        }
    }

    fn estimate_now(&self, memory: Option<&PastMemory>) -> Option<Vec<f64>> {
        let oae = self.oae.as_ref()?;
        let q = self.ep.query.as_ref().expect("query state initialized");
        let m = self.ep.pairs.len();
        let sim = match memory {
            Some(mem) if m >= 1 && !mem.is_empty() => {
                let current = CurrentHistory::from_pairs(self.ep.pairs.clone());
                top_k_similar(&current, mem, self.k).unwrap_or_default()
            }
            _ => Vec::new(),
        };
        let mem = memory;
        Some(match mem {
            Some(mem) => oae.estimate_plain(mem, &sim, q, m),
            // No memory attached: fall back to the pure query pathway.
            None => oae.estimate_plain(&EMPTY_MEMORY, &[], q, m),
        })
    }

    /// Choose the next action. `memory` is the frozen past-game snapshot for
    /// estimator pathways (ignored by the purely current-history pathways).
    pub fn act(
        &mut self,
        view: HistoryView<'_>,
        memory: Option<&PastMemory>,
        rng: &mut ChaCha8Rng,
    ) -> Action {
        assert!(self.ep.active, "act called outside a game");
        self.ingest(view);
        let estimate = self.estimate_now(memory);
        match self.ep.mode {
            ActMode::Train => {
                let logits = self.logits_tape(estimate.as_deref());
                let probs = softmax_plain(self.tape.val(logits));
                let a = sample_categorical(&probs, rng);
                let lp = self.tape.log_prob(logits, a);
                self.ep.logps.push(lp);
                let action = Action(a as u8);
                self.ep.actions.push(action);
                action
            }
            ActMode::Greedy => {
                let logits = self.logits_plain(estimate.as_deref());
                let action = Action(argmax_tie_low(&logits) as u8);
                self.ep.actions.push(action);
                action
            }
        }
    }

    fn logits_tape(&mut self, estimate: Option<&[f64]>) -> NodeId {
        match self.pathway {
            Pathway::Pg => {
                let h = self.ep.hist_tape.expect("history state").0;
                self.decoder.apply(&mut self.tape, &self.store, h)
            }
            Pathway::HeAdPg => {
                let he = self.he.as_ref().expect("hierarchical encoder");
                let st = self.ep.he_tape.as_ref().expect("encoder state");
                let hc = he.combine_tape(&mut self.tape, &self.store, st, None);
                self.decoder.apply(&mut self.tape, &self.store, hc)
            }
            Pathway::OaeAd { .. } => {
                let e = self.tape.input(estimate.expect("estimate vector"));
                self.decoder.apply(&mut self.tape, &self.store, e)
            }
            Pathway::OaeHeAd { .. } => {
                let he = self.he.as_ref().expect("hierarchical encoder");
                let st = self.ep.he_tape.as_ref().expect("encoder state");
                let e = self.tape.input(estimate.expect("estimate vector"));
                let hc = he.combine_tape(&mut self.tape, &self.store, st, Some(e));
                self.decoder.apply(&mut self.tape, &self.store, hc)
            }
            _ => unreachable!("non policy-gradient pathway"),
        }
    }

    fn logits_plain(&self, estimate: Option<&[f64]>) -> Vec<f64> {
        match self.pathway {
            Pathway::Pg => {
                let h = &self.ep.hist_plain.as_ref().expect("history state").h;
                self.decoder.apply_plain(&self.store, h)
            }
            Pathway::HeAdPg => {
                let he = self.he.as_ref().expect("hierarchical encoder");
                let st = self.ep.he_plain.as_ref().expect("encoder state");
                let hc = he.combine_plain(&self.store, st, None);
                self.decoder.apply_plain(&self.store, &hc)
            }
            Pathway::OaeAd { .. } => self
                .decoder
                .apply_plain(&self.store, estimate.expect("estimate vector")),
            Pathway::OaeHeAd { .. } => {
                let he = self.he.as_ref().expect("hierarchical encoder");
                let st = self.ep.he_plain.as_ref().expect("encoder state");
                let hc = he.combine_plain(&self.store, st, estimate);
                self.decoder.apply_plain(&self.store, &hc)
            }
            _ => unreachable!("non policy-gradient pathway"),
        }
    }

    /// Episode-return update: one optimizer step on the accumulated
    /// `-return * sum(log pi)` gradient. The frozen estimator is untouched.
    pub fn end_game(&mut self, record: &GameRecord) -> Result<()> {
        let ep = std::mem::replace(&mut self.ep, Episode::inactive());
        if !ep.active {
            return Err(Error::Sequencing("end_game without begin_game".into()));
        }
        if ep.mode != ActMode::Train {
            return Ok(());
        }
        if ep.actions.len() != record.len() {
            return Err(Error::Sequencing(format!(
                "incomplete trace: {} actions for a {}-turn game",
                ep.actions.len(),
                record.len()
            )));
        }
        let delta = score_difference(record);
        let ret = if self.use_baseline {
            let r = delta - self.baseline;
            self.baseline_count += 1;
            // moving average over observed returns
            self.baseline += (delta - self.baseline) / self.baseline_count as f64;
            r
        } else {
            delta
        };
        if ret != 0.0 && !ep.logps.is_empty() {
            let total = self.tape.sum_stack(&ep.logps);
            let loss = self.tape.scale(total, -ret);
            let grads = self.tape.backward(&self.store, loss);
            self.store.accumulate(&grads);
            self.store.optimizer_step(OptimizerKind::adam(), self.lr)?;
        }
        self.tape.reset();
        Ok(())
    }

    pub fn checkpoint_meta(&self, game: &str) -> BTreeMap<String, String> {
        let mut meta = BTreeMap::new();
        meta.insert("component".into(), "policy".into());
        meta.insert("pathway".into(), self.pathway.id().into());
        meta.insert("game".into(), game.into());
        meta.insert("arity".into(), self.arch.arity.to_string());
        meta.insert("hidden".into(), self.arch.hidden.to_string());
        meta
    }

    pub fn checkpoint_bytes(&self, game: &str) -> Vec<u8> {
        crate::nn::checkpoint::to_bytes(&self.store, &self.checkpoint_meta(game))
    }

    /// Rebuild an agent from checkpoint bytes (pathway and shapes come from
    /// the embedded metadata).
    pub fn from_checkpoint(
        bytes: &[u8],
        k: usize,
        lr: f64,
        use_baseline: bool,
        oae: Option<FrozenEstimator>,
    ) -> Result<Self> {
        let (store, meta) = crate::nn::checkpoint::from_bytes(bytes)?;
        let pathway = Pathway::parse(
            meta.get("pathway")
                .ok_or_else(|| Error::Parse("checkpoint metadata missing 'pathway'".into()))?,
        )?;
        let parse_usize = |key: &str| -> Result<usize> {
            meta.get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Parse(format!("checkpoint metadata missing '{key}'")))
        };
        let arch = PolicyArch {
            arity: parse_usize("arity")?,
            hidden: parse_usize("hidden")?,
        };
        let missing = |what: &str| Error::Parse(format!("checkpoint is missing {what}"));
        let (he, hist) = match pathway {
            Pathway::Pg => (
                None,
                Some(LstmSpec::lookup(&store, "hist").ok_or_else(|| missing("hist"))?),
            ),
            Pathway::HeAdPg => (
                Some(HierEncoder::lookup(&store, false).ok_or_else(|| missing("encoder"))?),
                None,
            ),
            Pathway::OaeAd { .. } => (None, None),
            Pathway::OaeHeAd { .. } => (
                Some(HierEncoder::lookup(&store, true).ok_or_else(|| missing("encoder"))?),
                None,
            ),
            other => {
                return Err(Error::Config(format!(
                    "checkpoint pathway '{}' is not a policy agent",
                    other.id()
                )))
            }
        };
        let decoder = FeedforwardSpec::lookup(&store, "decoder", Activation::Tanh, Activation::Linear)
            .ok_or_else(|| missing("decoder"))?;
        if let Some(mode) = pathway.oae_mode() {
            let est = oae.as_ref().ok_or_else(|| {
                Error::Config(format!("pathway '{}' needs a trained estimator", pathway.id()))
            })?;
            if est.mode() != mode || est.hidden() != arch.hidden {
                return Err(Error::Config("estimator does not match the checkpoint".into()));
            }
        }
        Ok(PolicyAgent {
            pathway,
            arch,
            store,
            he,
            hist,
            decoder,
            oae,
            k,
            lr,
            use_baseline,
            baseline: 0.0,
            baseline_count: 0,
            tape: Tape::new(),
            ep: Episode::inactive(),
        })
    }
}

// Shared empty memory for the no-memory fallback.
static EMPTY_MEMORY: std::sync::LazyLock<PastMemory> =
    std::sync::LazyLock::new(|| PastMemory::new(1));

/// Any trainable learner, behind one interface for the harness.
pub enum LearnerAgent {
    Policy(PolicyAgent),
    QTable(QTableAgent),
    Dqn(DqnAgent),
}

impl LearnerAgent {
    pub fn pathway(&self) -> Pathway {
        match self {
            LearnerAgent::Policy(a) => a.pathway,
            LearnerAgent::QTable(_) => Pathway::QLearning,
            LearnerAgent::Dqn(a) => Pathway::Dqn {
                hierarchical: a.hierarchical(),
            },
        }
    }

    pub fn begin_game(&mut self, mode: ActMode) {
        match self {
            LearnerAgent::Policy(a) => a.begin_game(mode),
            LearnerAgent::QTable(a) => a.begin_game(mode),
            LearnerAgent::Dqn(a) => a.begin_game(mode),
        }
    }

    pub fn act(
        &mut self,
        view: HistoryView<'_>,
        memory: Option<&PastMemory>,
        rng: &mut ChaCha8Rng,
    ) -> Action {
        match self {
            LearnerAgent::Policy(a) => a.act(view, memory, rng),
            LearnerAgent::QTable(a) => a.act(view, rng),
            LearnerAgent::Dqn(a) => a.act(view, rng),
        }
    }

    pub fn end_game(&mut self, record: &GameRecord) -> Result<()> {
        match self {
            LearnerAgent::Policy(a) => a.end_game(record),
            LearnerAgent::QTable(a) => {
                a.end_game(record);
                Ok(())
            }
            LearnerAgent::Dqn(a) => a.end_game(record),
        }
    }

    /// Serialized weights (plus pathway descriptor) for freeze checks and
    /// run outputs. Table agents use their record format.
    pub fn checkpoint_bytes(&self, game: &str) -> Vec<u8> {
        match self {
            LearnerAgent::Policy(a) => a.checkpoint_bytes(game),
            LearnerAgent::QTable(a) => a.serialize_records().into_bytes(),
            LearnerAgent::Dqn(a) => a.checkpoint_bytes(game),
        }
    }

    /// The frozen estimator checkpoint, for freeze-contract verification.
    pub fn oae_checkpoint_bytes(&self, game: &str) -> Option<Vec<u8>> {
        match self {
            LearnerAgent::Policy(a) => a.oae.as_ref().map(|o| o.checkpoint_bytes(game)),
            _ => None,
        }
    }
}

/// Adapter seating a learner (plus its memory snapshot) as a game player.
pub struct LearnerSeat<'a> {
    pub agent: &'a mut LearnerAgent,
    pub memory: Option<&'a PastMemory>,
}

impl Player for LearnerSeat<'_> {
    fn choose(&mut self, view: HistoryView<'_>, rng: &mut ChaCha8Rng) -> Action {
        self.agent.act(view, self.memory, rng)
    }
}

/// A learner that plays uniformly random actions (memory warm-up).
pub struct RandomLearner {
    pub arity: usize,
}

impl Player for RandomLearner {
    fn choose(&mut self, _view: HistoryView<'_>, rng: &mut ChaCha8Rng) -> Action {
        use rand::Rng;
        Action(rng.gen_range(0..self.arity) as u8)
    }
}

/// Build the payoff matrix's learner agent for a pathway.
pub fn build_agent(
    pathway: Pathway,
    matrix: &PayoffMatrix,
    arch: PolicyArch,
    k: usize,
    lr: f64,
    use_baseline: bool,
    dqn_cfg: &DqnConfig,
    q_params: (f64, f64, f64),
    oae: Option<FrozenEstimator>,
    seed: u64,
) -> Result<LearnerAgent> {
    Ok(match pathway {
        Pathway::QLearning => {
            let (alpha, gamma, epsilon) = q_params;
            LearnerAgent::QTable(QTableAgent::new(matrix.clone(), alpha, gamma, epsilon))
        }
        Pathway::Dqn { hierarchical } => {
            let mut cfg = dqn_cfg.clone();
            cfg.hierarchical = hierarchical;
            LearnerAgent::Dqn(DqnAgent::new(matrix.clone(), arch, cfg, seed))
        }
        _ => LearnerAgent::Policy(PolicyAgent::new(
            pathway,
            arch,
            k,
            lr,
            use_baseline,
            oae,
            seed,
        )?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_all_params;
    use crate::nn::Init;
    use rand::Rng;

    fn toy_arch() -> PolicyArch {
        PolicyArch {
            arity: 2,
            hidden: 4,
        }
    }

    fn pairs_of(l: &str, o: &str) -> Vec<(Action, Action)> {
        l.chars()
            .zip(o.chars())
            .map(|(a, b)| {
                (
                    Action(if a == 'C' { 0 } else { 1 }),
                    Action(if b == 'C' { 0 } else { 1 }),
                )
            })
            .collect()
    }

    #[test]
    fn hier_encoder_output_dim_is_hidden() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParameterStore::new();
        let he = HierEncoder::register(&mut store, toy_arch(), false, &mut rng);
        for n in [0usize, 1, 3, 50] {
            let seq: Vec<(Action, Action)> = (0..n)
                .map(|i| (Action((i % 2) as u8), Action(((i / 2) % 2) as u8)))
                .collect();
            let out = he.encode_plain(&store, &seq, None);
            assert_eq!(out.len(), 4);
            assert!(out.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn hier_encoder_tape_and_plain_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParameterStore::new();
        let he = HierEncoder::register(&mut store, toy_arch(), true, &mut rng);
        let seq = pairs_of("CDC", "DCC");
        let ex = [0.1, -0.2, 0.3, 0.05];
        let mut tape = Tape::new();
        let e = tape.input(&ex);
        let hc = he.encode_tape(&mut tape, &store, &seq, Some(e));
        let plain = he.encode_plain(&store, &seq, Some(&ex));
        for (a, b) in tape.val(hc).iter().zip(&plain) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn he_forward_gradient_matches_finite_differences() {
        // Three encoders + combine + decoder on a 3-turn toy.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParameterStore::new();
        let he = HierEncoder::register(&mut store, toy_arch(), false, &mut rng);
        let dec = FeedforwardSpec::register(
            &mut store,
            "dec",
            &[4, 2],
            Activation::Tanh,
            Activation::Linear,
            &mut rng,
        );
        let seq = pairs_of("CDC", "DDC");
        let forward = |store: &ParameterStore| {
            let mut tape = Tape::new();
            let hc = he.encode_tape(&mut tape, store, &seq, None);
            let logits = dec.apply(&mut tape, store, hc);
            let lp = tape.log_prob(logits, 1);
            (tape, lp)
        };
        let (mut tape, lp) = forward(&store);
        let grads = tape.backward(&store, lp);
        let report = check_all_params(&mut store, &grads, 1e-4, 1e-6, |s| {
            let (tape, lp) = forward(s);
            tape.scalar(lp)
        });
        assert!(report.max_rel_err < 1e-3, "{:?}", report.worst);
    }

    #[test]
    fn reinforce_surrogate_gradient_matches_finite_differences() {
        // Multi-turn surrogate -ret * sum_t log pi(a_t) through the shared
        // encoders, mirroring the full update path.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParameterStore::new();
        let he = HierEncoder::register(&mut store, toy_arch(), false, &mut rng);
        let dec = FeedforwardSpec::register(
            &mut store,
            "dec",
            &[4, 2],
            Activation::Tanh,
            Activation::Linear,
            &mut rng,
        );
        let seq = pairs_of("CDCD", "DDCC");
        let taken = [1usize, 0, 0, 1];
        let ret = 1.7;
        let forward = |store: &ParameterStore| {
            let mut tape = Tape::new();
            let mut st = he.start_tape(&mut tape, store);
            let mut lps = Vec::new();
            for t in 0..seq.len() {
                let hc = he.combine_tape(&mut tape, store, &st, None);
                let logits = dec.apply(&mut tape, store, hc);
                lps.push(tape.log_prob(logits, taken[t]));
                he.advance_tape(&mut tape, store, &mut st, seq[t]);
            }
            let total = tape.sum_stack(&lps);
            let loss = tape.scale(total, -ret);
            (tape, loss)
        };
        let (mut tape, loss) = forward(&store);
        let grads = tape.backward(&store, loss);
        let report = check_all_params(&mut store, &grads, 1e-4, 1e-6, |s| {
            let (tape, loss) = forward(s);
            tape.scalar(loss)
        });
        assert!(report.max_rel_err < 1e-3, "{:?}", report.worst);
    }

    #[test]
    fn reinforce_single_step_gradient_is_analytic() {
        // Softmax policy over raw logit parameters: the surrogate's gradient
        // on the taken logit must be -ret * (1 - pi(a)).
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParameterStore::new();
        let logits_p = store.register("logits", 1, 3, Init::Uniform(0.8), &mut rng);
        let ret = -2.3;
        let taken = 2;
        let mut tape = Tape::new();
        let logits = tape.param(&store, logits_p);
        let lp = tape.log_prob(logits, taken);
        let loss = tape.scale(lp, -ret);
        let grads = tape.backward(&store, loss);
        let probs = softmax_plain(store.value(logits_p));
        let g = grads.get(logits_p).unwrap();
        assert!((g[taken] - (-ret) * (1.0 - probs[taken])).abs() < 1e-6);
        for j in 0..3 {
            if j != taken {
                assert!((g[j] - ret * probs[j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_return_leaves_parameters_and_optimizer_untouched() {
        let mut agent =
            PolicyAgent::new(Pathway::HeAdPg, toy_arch(), 5, 1e-2, false, None, 7).unwrap();
        let before = agent.checkpoint_bytes("pd");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let matrix = PayoffMatrix::prisoners_dilemma();
        // The opponent mirrors the learner's move each turn, so the record is
        // symmetric and the score difference is exactly zero.
        agent.begin_game(ActMode::Train);
        let mut outcomes: Vec<crate::game::StageOutcome> = Vec::new();
        for t in 1..=4 {
            let own: Vec<Action> = outcomes.iter().map(|o| o.a_learner).collect();
            let theirs: Vec<Action> = outcomes.iter().map(|o| o.a_opponent).collect();
            let a = agent.act(
                HistoryView {
                    own: &own,
                    theirs: &theirs,
                },
                None,
                &mut rng,
            );
            outcomes.push(crate::game::play_stage(&matrix, a, a, t).unwrap());
        }
        let rec = GameRecord::from_outcomes(outcomes, "mirror".into()).unwrap();
        assert_eq!(score_difference(&rec), 0.0);
        agent.end_game(&rec).unwrap();
        assert_eq!(agent.checkpoint_bytes("pd"), before);
        assert_eq!(agent.store.step_count(), 0);
    }

    #[test]
    fn pathways_produce_valid_actions_for_full_games() {
        use crate::game::{play_repeated_game, GameConfig};
        use crate::strategies::{Strategy, StrategyKind};
        let matrix = PayoffMatrix::prisoners_dilemma();
        let arch = toy_arch();
        let (oae_store, oae_est) = crate::estimator::build_estimator(
            crate::estimator::EstimatorArch {
                arity: 2,
                hidden: 4,
                hops: 2,
                mode: SuffixMode::OneStep,
            },
            11,
        );
        let mut memory = PastMemory::new(16);
        for s in 0..4u64 {
            let cfg = GameConfig::new("pd", 8, 900 + s);
            let mut a = RandomLearner { arity: 2 };
            let mut b = Strategy::new(StrategyKind::TitForTat);
            memory.insert_with_eviction(
                play_repeated_game(&cfg, &matrix, &mut a, &mut b, "tit-for-tat").unwrap(),
            );
        }

        for pathway in [
            Pathway::Pg,
            Pathway::HeAdPg,
            Pathway::OaeAd { mode: SuffixMode::OneStep },
            Pathway::OaeHeAd { mode: SuffixMode::OneStep },
        ] {
            let oae = pathway.oae_mode().map(|_| {
                FrozenEstimator::new(oae_store.clone(), oae_est.clone())
            });
            let mut agent = LearnerAgent::Policy(
                PolicyAgent::new(pathway, arch, 3, 1e-3, false, oae, 21).unwrap(),
            );
            for mode in [ActMode::Train, ActMode::Greedy] {
                agent.begin_game(mode);
                let cfg = GameConfig::new("pd", 12, 77);
                let mut opp = Strategy::new(StrategyKind::Alternator);
                let rec = {
                    let mut seat = LearnerSeat {
                        agent: &mut agent,
                        memory: Some(&memory),
                    };
                    play_repeated_game(&cfg, &matrix, &mut seat, &mut opp, "alternator").unwrap()
                };
                assert_eq!(rec.len(), 12);
                for o in &rec.outcomes {
                    assert!(o.a_learner.index() < 2);
                }
                agent.end_game(&rec).unwrap();
            }
        }
    }

    #[test]
    fn he_ad_ignores_memory_contents() {
        use crate::game::{play_repeated_game, GameConfig};
        use crate::strategies::{Strategy, StrategyKind};
        let matrix = PayoffMatrix::prisoners_dilemma();
        let run = |memory: Option<&PastMemory>| {
            let mut agent = LearnerAgent::Policy(
                PolicyAgent::new(Pathway::HeAdPg, toy_arch(), 5, 1e-3, false, None, 5).unwrap(),
            );
            agent.begin_game(ActMode::Greedy);
            let cfg = GameConfig::new("pd", 10, 3);
            let mut opp = Strategy::new(StrategyKind::TitForTat);
            let mut seat = LearnerSeat { agent: &mut agent, memory };
            play_repeated_game(&cfg, &matrix, &mut seat, &mut opp, "tft").unwrap()
        };
        let mut memory = PastMemory::new(8);
        let cfg = GameConfig::new("pd", 10, 9);
        let mut a = RandomLearner { arity: 2 };
        let mut b = Strategy::new(StrategyKind::Defector);
        memory.insert_with_eviction(
            play_repeated_game(&cfg, &matrix, &mut a, &mut b, "defector").unwrap(),
        );
        let with = run(Some(&memory));
        let without = run(None);
        assert_eq!(
            with.pairs().collect::<Vec<_>>(),
            without.pairs().collect::<Vec<_>>()
        );
    }

    #[test]
    fn oae_ad_equals_direct_decode_of_estimate() {
        // The oae-ad pathway's greedy action must equal argmax of the decoder
        // applied to the frozen estimate vector.
        let arch = toy_arch();
        let (oae_store, oae_est) = crate::estimator::build_estimator(
            crate::estimator::EstimatorArch {
                arity: 2,
                hidden: 4,
                hops: 1,
                mode: SuffixMode::OneStep,
            },
            31,
        );
        let oae = FrozenEstimator::new(oae_store.clone(), oae_est.clone());
        let mut agent =
            PolicyAgent::new(Pathway::OaeAd { mode: SuffixMode::OneStep }, arch, 2, 1e-3, false, Some(oae), 3)
                .unwrap();
        let matrix = PayoffMatrix::prisoners_dilemma();
        let mut memory = PastMemory::new(8);
        memory.insert_with_eviction({
            use crate::game::{play_repeated_game, GameConfig};
            let cfg = GameConfig::new("pd", 6, 13);
            let mut a = RandomLearner { arity: 2 };
            let mut b = crate::strategies::Strategy::new(crate::strategies::StrategyKind::Grudger);
            play_repeated_game(&cfg, &matrix, &mut a, &mut b, "grudger").unwrap()
        });

        agent.begin_game(ActMode::Greedy);
        let own = [Action(0)];
        let theirs = [Action(1)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let got = agent.act(
            HistoryView {
                own: &own,
                theirs: &theirs,
            },
            Some(&memory),
            &mut rng,
        );

        // independent recomputation
        let frozen = FrozenEstimator::new(oae_store, oae_est);
        let mut q = frozen.query_start();
        q = frozen.query_advance(&q, (own[0], theirs[0]));
        let current = CurrentHistory::from_pairs(vec![(own[0], theirs[0])]);
        let sim = top_k_similar(&current, &memory, 2).unwrap();
        let ex = frozen.estimate_plain(&memory, &sim, &q, 1);
        let logits = agent.decoder.apply_plain(&agent.store, &ex);
        assert_eq!(got.index(), argmax_tie_low(&logits));
    }

    #[test]
    fn sampling_frequencies_match_softmax_three_sigma() {
        let mut agent =
            PolicyAgent::new(Pathway::Pg, toy_arch(), 5, 1e-3, false, None, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        // Expected first-move distribution, from the greedy-path logits.
        agent.begin_game(ActMode::Greedy);
        let p = softmax_plain(&agent.logits_plain(None));
        // fixed one-turn state; sample many first actions independently
        let mut counts = [0usize; 2];
        let n = 10_000;
        for _ in 0..n {
            agent.begin_game(ActMode::Train);
            let a = agent.act(HistoryView { own: &[], theirs: &[] }, None, &mut rng);
            counts[a.index()] += 1;
            // abandon the episode without updating
            agent.ep = Episode::inactive();
        }
        for i in 0..2 {
            let expected = n as f64 * p[i];
            let sigma = (n as f64 * p[i] * (1.0 - p[i])).sqrt();
            assert!(
                (counts[i] as f64 - expected).abs() < 3.0 * sigma,
                "action {i}: {} vs {expected}",
                counts[i]
            );
        }
    }

    #[test]
    fn incomplete_trace_is_a_sequencing_error() {
        let mut agent =
            PolicyAgent::new(Pathway::HeAdPg, toy_arch(), 5, 1e-3, false, None, 12).unwrap();
        agent.begin_game(ActMode::Train);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let _ = agent.act(HistoryView { own: &[], theirs: &[] }, None, &mut rng);
        // record claims 3 turns but only one action was traced
        let matrix = PayoffMatrix::prisoners_dilemma();
        let outcomes = (1..=3)
            .map(|t| crate::game::play_stage(&matrix, Action(0), Action(0), t).unwrap())
            .collect();
        let rec = GameRecord::from_outcomes(outcomes, "x".into()).unwrap();
        assert!(matches!(
            agent.end_game(&rec),
            Err(Error::Sequencing(_))
        ));
    }

    #[test]
    fn pathway_ids_round_trip() {
        for p in Pathway::ALL {
            assert_eq!(Pathway::parse(p.id()).unwrap(), p);
        }
        assert!(Pathway::parse("nope").is_err());
    }

    #[test]
    fn missing_estimator_is_a_configuration_error() {
        let err = PolicyAgent::new(
            Pathway::OaeHeAd { mode: SuffixMode::OneStep },
            toy_arch(),
            5,
            1e-3,
            false,
            None,
            0,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn random_learner_is_seat_reproducible() {
        use crate::game::{play_repeated_game, GameConfig};
        let matrix = PayoffMatrix::prisoners_dilemma();
        let cfg = GameConfig::new("pd", 20, 5);
        let play = || {
            let mut a = RandomLearner { arity: 2 };
            let mut b = crate::strategies::Strategy::new(crate::strategies::StrategyKind::Random);
            play_repeated_game(&cfg, &matrix, &mut a, &mut b, "random").unwrap()
        };
        let r1 = play();
        let r2 = play();
        assert_eq!(r1, r2);
    }

    #[test]
    fn greedy_logits_affine_scale_keeps_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let c: f64 = rng.gen_range(0.1..5.0);
            let scaled: Vec<f64> = logits.iter().map(|x| c * x).collect();
            assert_eq!(argmax_tie_low(&logits), argmax_tie_low(&scaled));
        }
        assert_eq!(argmax_tie_low(&[0.7, 0.7]), 0);
    }
}
