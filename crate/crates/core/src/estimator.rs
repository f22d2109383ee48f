//! Opponent action estimator.
//!
//! Given the current game's joint-action prefix, retrieve the most similar
//! stored games, then read them with a multi-hop attention network: the query
//! encoding is refined layer by layer against per-record key/value encodings
//! (adjacent tying: a layer's value encoder is the next layer's key encoder)
//! and projected to the estimate vector. A separate fusion network encodes
//! the retrieved games' opponent-action suffixes; training pulls the two
//! vectors together under an L1 loss, after which both networks are frozen.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoding;
use crate::error::{Error, Result};
use crate::game::Action;
use crate::memory::{split_at, suffix_opponent_actions, CurrentHistory, PastMemory, SuffixMode};
use crate::nn::{
    attention_weights, attention_weights_plain, Activation, FeedforwardSpec, LstmSpec, LstmState,
    NodeId, OptimizerKind, ParameterStore, Tape,
};

/// Architecture knobs, stored alongside checkpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorArch {
    /// Actions per player.
    pub arity: usize,
    /// Embedding width shared by every encoder and both output vectors.
    pub hidden: usize,
    /// Attention hops.
    pub hops: usize,
    pub mode: SuffixMode,
}

/// Parameter handles for both halves of the estimator: the multi-hop reader
/// (query encoder, tied prefix encoders, output projection) and the fusion
/// target network (suffix encoder plus head).
#[derive(Debug, Clone)]
pub struct Estimator {
    pub arch: EstimatorArch,
    pub query: LstmSpec,
    /// Prefix encoders; hop `l` reads keys from `embeds[l]` and values from
    /// `embeds[l+1]`, so adjacent hops share one parameter set structurally.
    pub embeds: Vec<LstmSpec>,
    pub proj: FeedforwardSpec,
    pub fusion: LstmSpec,
    pub fusion_head: FeedforwardSpec,
}

impl Estimator {
    pub fn register(store: &mut ParameterStore, arch: EstimatorArch, rng: &mut ChaCha8Rng) -> Self {
        let d = arch.hidden;
        let jd = encoding::joint_dim(arch.arity);
        let query = LstmSpec::register(store, "oae.query", jd, d, rng);
        let n_embeds = if arch.hops > 0 { arch.hops + 1 } else { 0 };
        let embeds = (0..n_embeds)
            .map(|i| LstmSpec::register(store, &format!("oae.embed{i}"), jd, d, rng))
            .collect();
        let proj = FeedforwardSpec::register(
            store,
            "oae.proj",
            &[d, d],
            Activation::Tanh,
            Activation::Linear,
            rng,
        );
        let fusion = LstmSpec::register(store, "oae.fusion", arch.arity, d, rng);
        let fusion_head = FeedforwardSpec::register(
            store,
            "oae.fusion_head",
            &[d, d],
            Activation::Tanh,
            Activation::Linear,
            rng,
        );
        Estimator {
            arch,
            query,
            embeds,
            proj,
            fusion,
            fusion_head,
        }
    }

    /// Rebind handles against a checkpoint-loaded store.
    pub fn lookup(store: &ParameterStore, arch: EstimatorArch) -> Result<Self> {
        let missing = |what: &str| Error::Config(format!("checkpoint is missing {what}"));
        let query = LstmSpec::lookup(store, "oae.query").ok_or_else(|| missing("oae.query"))?;
        let n_embeds = if arch.hops > 0 { arch.hops + 1 } else { 0 };
        let embeds: Vec<LstmSpec> = (0..n_embeds)
            .map(|i| {
                LstmSpec::lookup(store, &format!("oae.embed{i}"))
                    .ok_or_else(|| missing(&format!("oae.embed{i}")))
            })
            .collect::<Result<_>>()?;
        let proj = FeedforwardSpec::lookup(store, "oae.proj", Activation::Tanh, Activation::Linear)
            .ok_or_else(|| missing("oae.proj"))?;
        let fusion = LstmSpec::lookup(store, "oae.fusion").ok_or_else(|| missing("oae.fusion"))?;
        let fusion_head = FeedforwardSpec::lookup(
            store,
            "oae.fusion_head",
            Activation::Tanh,
            Activation::Linear,
        )
        .ok_or_else(|| missing("oae.fusion_head"))?;
        if query.hidden != arch.hidden || query.input_dim != encoding::joint_dim(arch.arity) {
            return Err(Error::Config(
                "checkpoint shapes do not match the requested architecture".into(),
            ));
        }
        Ok(Estimator {
            arch,
            query,
            embeds,
            proj,
            fusion,
            fusion_head,
        })
    }

    fn encode_joint(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        enc: &LstmSpec,
        pairs: &[(Action, Action)],
    ) -> NodeId {
        let steps: Vec<NodeId> = encoding::joint_steps(pairs, self.arch.arity)
            .iter()
            .map(|s| tape.input(s))
            .collect();
        enc.encode(tape, store, &steps)
    }

    /// Estimate vector for the current prefix given retrieved record prefixes
    /// (already truncated to the query length by the caller). An empty
    /// retrieval falls back to projecting the raw query encoding.
    pub fn estimate(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        current: &[(Action, Action)],
        sim_prefixes: &[&[(Action, Action)]],
    ) -> NodeId {
        let mut u = self.encode_joint(tape, store, &self.query, current);
        if !sim_prefixes.is_empty() {
            for hop in 0..self.arch.hops {
                let keys: Vec<NodeId> = sim_prefixes
                    .iter()
                    .map(|p| self.encode_joint(tape, store, &self.embeds[hop], p))
                    .collect();
                let values: Vec<NodeId> = sim_prefixes
                    .iter()
                    .map(|p| self.encode_joint(tape, store, &self.embeds[hop + 1], p))
                    .collect();
                let w = attention_weights(tape, u, &keys);
                let read = tape.weighted_sum(w, &values);
                u = tape.add(u, read);
            }
        }
        self.proj.apply(tape, store, u)
    }

    /// Fusion target from the retrieved records' opponent suffixes: encode
    /// each, average, then apply the head.
    pub fn fuse_targets(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        suffix_sets: &[Vec<Action>],
    ) -> Result<NodeId> {
        if suffix_sets.is_empty() || suffix_sets.iter().any(|s| s.is_empty()) {
            return Err(Error::Domain(
                "fusion needs at least one nonempty opponent suffix".into(),
            ));
        }
        let encoded: Vec<NodeId> = suffix_sets
            .iter()
            .map(|set| {
                let steps: Vec<NodeId> = encoding::suffix_steps(set, self.arch.arity)
                    .iter()
                    .map(|s| tape.input(s))
                    .collect();
                self.fusion.encode(tape, store, &steps)
            })
            .collect();
        let mean = tape.mean_stack(&encoded);
        Ok(self.fusion_head.apply(tape, store, mean))
    }

    pub fn checkpoint_meta(&self, game: &str) -> BTreeMap<String, String> {
        let mut meta = BTreeMap::new();
        meta.insert("component".into(), "oae".into());
        meta.insert("mode".into(), self.arch.mode.tag().into());
        meta.insert("game".into(), game.into());
        meta.insert("arity".into(), self.arch.arity.to_string());
        meta.insert("hidden".into(), self.arch.hidden.to_string());
        meta.insert("hops".into(), self.arch.hops.to_string());
        meta
    }

    pub fn arch_from_meta(meta: &BTreeMap<String, String>) -> Result<EstimatorArch> {
        let get = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Parse(format!("checkpoint metadata missing '{k}'")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Parse(format!("checkpoint metadata '{k}' is not a number")))
        };
        Ok(EstimatorArch {
            arity: parse_usize("arity")?,
            hidden: parse_usize("hidden")?,
            hops: parse_usize("hops")?,
            mode: SuffixMode::from_tag(get("mode")?)?,
        })
    }
}

/// Training options for [`train_estimator`].
#[derive(Debug, Clone)]
pub struct OaeTrainConfig {
    pub epochs: usize,
    pub k: usize,
    pub lr: f64,
    /// Regress toward the sampled record's own future instead of the
    /// retrieved suffixes (extension; off by default).
    pub target_true_future: bool,
}

/// Joint training of both halves by sampled prefix reconstruction: draw a
/// stored game and a split point, retrieve neighbours of its prefix (leaving
/// the sample itself out), and minimize the L1 gap between the estimate and
/// fusion vectors. Returns the per-step losses.
pub fn train_estimator(
    store: &mut ParameterStore,
    est: &Estimator,
    memory: &PastMemory,
    cfg: &OaeTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if memory.len() < 2 {
        return Err(Error::Training(format!(
            "estimator training needs at least 2 stored games, memory holds {}",
            memory.len()
        )));
    }
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut tape = Tape::new();
    for _ in 0..cfg.epochs {
        let rec_idx = rng.gen_range(0..memory.len());
        let rec = memory.get(rec_idx);
        let n = rec.len();
        if n < 2 {
            return Err(Error::Training("stored game too short to split".into()));
        }
        let m = rng.gen_range(1..n);
        let sample = split_at(rec, m)?;
        let current = CurrentHistory::from_pairs(sample.prefix.clone());

        let sim =
            crate::retrieval::top_k_similar_excluding(&current, memory, cfg.k, Some(rec_idx))?;
        if sim.is_empty() {
            continue;
        }

        let prefixes: Vec<Vec<(Action, Action)>> = sim
            .iter()
            .map(|&i| Ok(split_at(memory.get(i), m)?.prefix))
            .collect::<Result<_>>()?;
        let suffixes: Vec<Vec<Action>> = if cfg.target_true_future {
            vec![suffix_opponent_actions(&sample, est.arch.mode)?]
        } else {
            sim.iter()
                .map(|&i| suffix_opponent_actions(&split_at(memory.get(i), m)?, est.arch.mode))
                .collect::<Result<_>>()?
        };

        tape.reset();
        let prefix_refs: Vec<&[(Action, Action)]> = prefixes.iter().map(|p| p.as_slice()).collect();
        let ex = est.estimate(&mut tape, store, current.pairs(), &prefix_refs);
        let ey = est.fuse_targets(&mut tape, store, &suffixes)?;
        let loss = tape.l1_loss(ex, ey);
        losses.push(tape.scalar(loss));
        let grads = tape.backward(store, loss);
        store.accumulate(&grads);
        store.optimizer_step(OptimizerKind::adam(), cfg.lr)?;
    }
    Ok(losses)
}

/// A trained estimator with immutable weights, plus the incremental machinery
/// used when acting: a per-record encoding cache keyed to one memory snapshot
/// and a running query state advanced turn by turn.
#[derive(Debug)]
pub struct FrozenEstimator {
    store: ParameterStore,
    pub est: Estimator,
    cache: std::cell::RefCell<RecordCache>,
}

#[derive(Debug, Default)]
struct RecordCache {
    generation: Option<u64>,
    memory_len: usize,
    /// `[record][encoder]` -> states after the start token and each prefix step.
    traces: Vec<Vec<Vec<LstmState>>>,
}

impl FrozenEstimator {
    pub fn new(store: ParameterStore, est: Estimator) -> Self {
        FrozenEstimator {
            store,
            est,
            cache: std::cell::RefCell::new(RecordCache::default()),
        }
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn mode(&self) -> SuffixMode {
        self.est.arch.mode
    }

    pub fn hidden(&self) -> usize {
        self.est.arch.hidden
    }

    pub fn checkpoint_bytes(&self, game: &str) -> Vec<u8> {
        crate::nn::checkpoint::to_bytes(&self.store, &self.est.checkpoint_meta(game))
    }

    /// Query state covering only the start token (turn one).
    pub fn query_start(&self) -> LstmState {
        let start = encoding::joint_start(self.est.arch.arity);
        self.est
            .query
            .step_plain(&self.store, &start, &LstmState::zeros(self.est.arch.hidden))
    }

    /// Advance the running query state by one completed stage.
    pub fn query_advance(&self, state: &LstmState, pair: (Action, Action)) -> LstmState {
        let step = encoding::joint_step(pair, self.est.arch.arity);
        self.est.query.step_plain(&self.store, &step, state)
    }

    fn cached_embed(
        &self,
        cache: &mut RecordCache,
        memory: &PastMemory,
        rec_idx: usize,
        encoder: usize,
        m: usize,
    ) -> Vec<f64> {
        let trace = &mut cache.traces[rec_idx][encoder];
        if trace.is_empty() {
            let start = encoding::joint_start(self.est.arch.arity);
            trace.push(self.est.embeds[encoder].step_plain(
                &self.store,
                &start,
                &LstmState::zeros(self.est.arch.hidden),
            ));
        }
        if trace.len() <= m {
            let pairs: Vec<(Action, Action)> = memory.get(rec_idx).pairs().collect();
            while trace.len() <= m {
                let i = trace.len() - 1; // next pair to consume
                let step = encoding::joint_step(pairs[i], self.est.arch.arity);
                let next = self.est.embeds[encoder].step_plain(&self.store, &step, &trace[i]);
                trace.push(next);
            }
        }
        trace[m].h.clone()
    }

    /// Estimate vector for the current turn, without gradients. `query_state`
    /// must cover exactly `m` completed stages; `sim` indexes into `memory`.
    pub fn estimate_plain(
        &self,
        memory: &PastMemory,
        sim: &[usize],
        query_state: &LstmState,
        m: usize,
    ) -> Vec<f64> {
        let mut cache = self.cache.borrow_mut();
        if cache.generation != Some(memory.generation()) || cache.memory_len != memory.len() {
            cache.generation = Some(memory.generation());
            cache.memory_len = memory.len();
            let n_enc = self.est.embeds.len();
            cache.traces = (0..memory.len()).map(|_| vec![Vec::new(); n_enc]).collect();
        }
        let mut u = query_state.h.clone();
        if !sim.is_empty() {
            for hop in 0..self.est.arch.hops {
                let keys: Vec<Vec<f64>> = sim
                    .iter()
                    .map(|&i| self.cached_embed(&mut cache, memory, i, hop, m))
                    .collect();
                let values: Vec<Vec<f64>> = sim
                    .iter()
                    .map(|&i| self.cached_embed(&mut cache, memory, i, hop + 1, m))
                    .collect();
                let key_refs: Vec<&[f64]> = keys.iter().map(|k| k.as_slice()).collect();
                let w = attention_weights_plain(&u, &key_refs);
                for (wi, v) in w.iter().zip(&values) {
                    for (uj, vj) in u.iter_mut().zip(v) {
                        *uj += wi * vj;
                    }
                }
            }
        }
        self.est.proj.apply_plain(&self.store, &u)
    }
}

/// Build a fresh estimator store and handles for the given architecture.
pub fn build_estimator(arch: EstimatorArch, seed: u64) -> (ParameterStore, Estimator) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let est = Estimator::register(&mut store, arch, &mut rng);
    (store, est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{play_stage, PayoffMatrix};
    use crate::nn::gradcheck::check_all_params;

    fn toy_arch(hops: usize, mode: SuffixMode) -> EstimatorArch {
        EstimatorArch {
            arity: 2,
            hidden: 4,
            hops,
            mode,
        }
    }

    fn pd_record(learner: &str, opponent: &str) -> crate::game::GameRecord {
        let m = PayoffMatrix::prisoners_dilemma();
        let outcomes = learner
            .chars()
            .zip(opponent.chars())
            .enumerate()
            .map(|(i, (l, o))| {
                play_stage(
                    &m,
                    Action(if l == 'C' { 0 } else { 1 }),
                    Action(if o == 'C' { 0 } else { 1 }),
                    i + 1,
                )
                .unwrap()
            })
            .collect();
        crate::game::GameRecord::from_outcomes(outcomes, "scripted".into()).unwrap()
    }

    fn pairs(l: &str, o: &str) -> Vec<(Action, Action)> {
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
    fn adjacent_tying_shares_parameter_objects() {
        let (mut store, est) = build_estimator(toy_arch(3, SuffixMode::OneStep), 0);
        // Tied layout: hops+1 prefix encoders instead of the 2*hops an untied
        // network would need.
        assert_eq!(est.embeds.len(), 4);

        // Mutating the shared middle encoder changes hop-0 values and hop-1
        // keys identically: both roles read the same storage.
        let input = pairs("CDC", "DDC");
        let encode = |store: &ParameterStore, spec: &LstmSpec| {
            let mut tape = Tape::new();
            let h = est.encode_joint(&mut tape, store, spec, &input);
            tape.val(h).to_vec()
        };
        let before_value_role = encode(&store, &est.embeds[1]);
        store.value_mut(est.embeds[1].wx)[0] += 0.5;
        let after_value_role = encode(&store, &est.embeds[1]);
        let after_key_role = encode(&store, &est.embeds[1]);
        assert_ne!(before_value_role, after_value_role);
        assert_eq!(after_value_role, after_key_role);
    }

    #[test]
    fn empty_retrieval_uses_query_only() {
        let (store, est) = build_estimator(toy_arch(3, SuffixMode::OneStep), 1);
        let cur = pairs("CD", "DC");
        let mut tape = Tape::new();
        let ex_empty = est.estimate(&mut tape, &store, &cur, &[]);
        let v_empty = tape.val(ex_empty).to_vec();
        // Must equal projecting the bare query encoding.
        let mut tape2 = Tape::new();
        let q = est.encode_joint(&mut tape2, &store, &est.query, &cur);
        let proj = est.proj.apply(&mut tape2, &store, q);
        assert_eq!(v_empty, tape2.val(proj));
    }

    #[test]
    fn zero_hops_projects_query_encoding() {
        let (store, est) = build_estimator(toy_arch(0, SuffixMode::OneStep), 2);
        let cur = pairs("CC", "DD");
        let other = pairs("CC", "DC");
        let mut tape = Tape::new();
        let with_sim = est.estimate(&mut tape, &store, &cur, &[&other]);
        let v1 = tape.val(with_sim).to_vec();
        let mut tape2 = Tape::new();
        let without = est.estimate(&mut tape2, &store, &cur, &[]);
        assert_eq!(v1, tape2.val(without));
    }

    #[test]
    fn identical_retrieved_records_collapse_to_k1() {
        let (store, est) = build_estimator(toy_arch(3, SuffixMode::OneStep), 3);
        let cur = pairs("CDC", "DCC");
        let rec = pairs("CDC", "DCD");
        let mut tape = Tape::new();
        let many = est.estimate(&mut tape, &store, &cur, &[&rec, &rec, &rec, &rec]);
        let v_many = tape.val(many).to_vec();
        let mut tape2 = Tape::new();
        let one = est.estimate(&mut tape2, &store, &cur, &[&rec]);
        for (a, b) in v_many.iter().zip(tape2.val(one)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn retrieval_order_does_not_change_outputs() {
        let (store, est) = build_estimator(toy_arch(2, SuffixMode::MultiStep), 4);
        let cur = pairs("CD", "DD");
        let a = pairs("CD", "DC");
        let b = pairs("CC", "DD");
        let c = pairs("DD", "CC");
        let mut t1 = Tape::new();
        let e1 = est.estimate(&mut t1, &store, &cur, &[&a, &b, &c]);
        let mut t2 = Tape::new();
        let e2 = est.estimate(&mut t2, &store, &cur, &[&c, &a, &b]);
        for (x, y) in t1.val(e1).iter().zip(t2.val(e2)) {
            assert!((x - y).abs() < 1e-9, "estimate changed under permutation");
        }
        // Fusion target likewise (mean over suffix encodings).
        let s1 = vec![vec![Action(0)], vec![Action(1)], vec![Action(0)]];
        let s2 = vec![vec![Action(1)], vec![Action(0)], vec![Action(0)]];
        let mut t3 = Tape::new();
        let y1 = est.fuse_targets(&mut t3, &store, &s1).unwrap();
        let mut t4 = Tape::new();
        let y2 = est.fuse_targets(&mut t4, &store, &s2).unwrap();
        for (x, y) in t3.val(y1).iter().zip(t4.val(y2)) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn estimate_and_fusion_dims_match() {
        for mode in [SuffixMode::OneStep, SuffixMode::MultiStep] {
            let (store, est) = build_estimator(toy_arch(2, mode), 5);
            let cur = pairs("CD", "CC");
            let rec = pairs("CD", "CD");
            let mut tape = Tape::new();
            let ex = est.estimate(&mut tape, &store, &cur, &[&rec]);
            let suffix = match mode {
                SuffixMode::OneStep => vec![vec![Action(1)]],
                SuffixMode::MultiStep => vec![vec![Action(1), Action(0), Action(1)]],
            };
            let ey = est.fuse_targets(&mut tape, &store, &suffix).unwrap();
            assert_eq!(tape.val(ex).len(), tape.val(ey).len());
        }
    }

    #[test]
    fn one_step_suffixes_have_length_one() {
        let rec = pd_record("CCCC", "CDCD");
        let split = split_at(&rec, 2).unwrap();
        let o = suffix_opponent_actions(&split, SuffixMode::OneStep).unwrap();
        assert_eq!(o, vec![Action(0)]);
    }

    #[test]
    fn fusion_k1_equals_identical_k() {
        let (store, est) = build_estimator(toy_arch(1, SuffixMode::MultiStep), 6);
        let suffix = vec![Action(1), Action(1), Action(0)];
        let mut t1 = Tape::new();
        let one = est.fuse_targets(&mut t1, &store, &[suffix.clone()]).unwrap();
        let mut t2 = Tape::new();
        let many = est
            .fuse_targets(&mut t2, &store, &[suffix.clone(), suffix.clone(), suffix])
            .unwrap();
        for (a, b) in t1.val(one).iter().zip(t2.val(many)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn end_to_end_loss_gradient_matches_finite_differences() {
        // Toy instance (hidden 4, two retrieved records, two hops) through
        // both networks under the L1 objective.
        let (mut store, est) = build_estimator(toy_arch(2, SuffixMode::MultiStep), 7);
        let cur = pairs("CDC", "DCC");
        let ra = pairs("CDC", "DCD");
        let rb = pairs("CCC", "DDC");
        let sa = vec![Action(1), Action(0)];
        let sb = vec![Action(0), Action(0)];
        let forward = |store: &ParameterStore| {
            let mut tape = Tape::new();
            let ex = est.estimate(&mut tape, store, &cur, &[&ra, &rb]);
            let ey = est
                .fuse_targets(&mut tape, store, &[sa.clone(), sb.clone()])
                .unwrap();
            let loss = tape.l1_loss(ex, ey);
            (tape, loss)
        };
        let (mut tape, loss) = forward(&store);
        assert!(tape.scalar(loss) >= 0.0);
        let grads = tape.backward(&store, loss);
        let report = check_all_params(&mut store, &grads, 1e-4, 1e-6, |s| {
            let (tape, loss) = forward(s);
            tape.scalar(loss)
        });
        assert!(report.max_rel_err < 1e-3, "{:?}", report.worst);
    }

    #[test]
    fn training_needs_two_records() {
        let mut memory = PastMemory::new(10);
        memory.insert_with_eviction(pd_record("CC", "DD"));
        let (mut store, est) = build_estimator(toy_arch(1, SuffixMode::OneStep), 8);
        let cfg = OaeTrainConfig {
            epochs: 1,
            k: 2,
            lr: 1e-3,
            target_true_future: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            train_estimator(&mut store, &est, &memory, &cfg, &mut rng),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn frozen_plain_estimate_matches_tape_path() {
        let (store, est) = build_estimator(toy_arch(3, SuffixMode::OneStep), 9);
        let mut memory = PastMemory::new(10);
        memory.insert_with_eviction(pd_record("CDCD", "DCDC"));
        memory.insert_with_eviction(pd_record("CCDD", "DDCC"));
        memory.insert_with_eviction(pd_record("CCCC", "DDDD"));
        let cur = pairs("CC", "DD");

        let current = CurrentHistory::from_pairs(cur.clone());
        let sim = crate::retrieval::top_k_similar(&current, &memory, 2).unwrap();

        let mut tape = Tape::new();
        let m = cur.len();
        let prefixes: Vec<Vec<(Action, Action)>> = sim
            .iter()
            .map(|&i| split_at(memory.get(i), m).unwrap().prefix)
            .collect();
        let refs: Vec<&[(Action, Action)]> = prefixes.iter().map(|p| p.as_slice()).collect();
        let ex_tape = est.estimate(&mut tape, &store, &cur, &refs);
        let expected = tape.val(ex_tape).to_vec();

        let frozen = FrozenEstimator::new(store, est);
        let mut qs = frozen.query_start();
        for &p in &cur {
            qs = frozen.query_advance(&qs, p);
        }
        let got = frozen.estimate_plain(&memory, &sim, &qs, m);
        for (a, b) in expected.iter().zip(&got) {
            assert!((a - b).abs() < 1e-12, "{expected:?} vs {got:?}");
        }
        // Second call reuses the cache and must agree exactly.
        let again = frozen.estimate_plain(&memory, &sim, &qs, m);
        assert_eq!(got, again);
    }

    #[test]
    fn checkpoint_meta_round_trips_arch() {
        let arch = toy_arch(3, SuffixMode::MultiStep);
        let (store, est) = build_estimator(arch, 10);
        let meta = est.checkpoint_meta("pd");
        let back = Estimator::arch_from_meta(&meta).unwrap();
        assert_eq!(arch, back);
        let bytes = crate::nn::checkpoint::to_bytes(&store, &meta);
        let (loaded, meta2) = crate::nn::checkpoint::from_bytes(&bytes).unwrap();
        let rebound = Estimator::lookup(&loaded, Estimator::arch_from_meta(&meta2).unwrap()).unwrap();
        assert_eq!(rebound.arch, arch);
    }
}
