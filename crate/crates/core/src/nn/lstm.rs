//! Sequence encoder: a single-layer gated recurrent cell applied over a step
//! sequence, exposing both a differentiable (tape) path and a plain path for
//! frozen networks.

use rand_chacha::ChaCha8Rng;

use super::params::{Init, ParamId, ParameterStore, DEFAULT_INIT};
use super::tape::{NodeId, Tape};

/// Parameter handles for one recurrent cell mapping `input_dim` step vectors
/// to a `hidden`-dimensional final state.
#[derive(Debug, Clone, Copy)]
pub struct LstmSpec {
    pub input_dim: usize,
    pub hidden: usize,
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
}

/// Running cell state for the plain (no-gradient) path.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LstmSpec {
    pub fn register(
        store: &mut ParameterStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::register_with(store, prefix, input_dim, hidden, DEFAULT_INIT, rng)
    }

    pub fn register_with(
        store: &mut ParameterStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let wx = store.register(format!("{prefix}.wx"), 4 * hidden, input_dim, init, rng);
        let wh = store.register(format!("{prefix}.wh"), 4 * hidden, hidden, init, rng);
        let b = store.register(format!("{prefix}.b"), 1, 4 * hidden, Init::Zeros, rng);
        LstmSpec {
            input_dim,
            hidden,
            wx,
            wh,
            b,
        }
    }

    /// Rebind to a store loaded from a checkpoint, by name.
    pub fn lookup(store: &ParameterStore, prefix: &str) -> Option<Self> {
        let wx = store.id_by_name(&format!("{prefix}.wx"))?;
        let wh = store.id_by_name(&format!("{prefix}.wh"))?;
        let b = store.id_by_name(&format!("{prefix}.b"))?;
        let (rows, input_dim) = store.shape(wx);
        Some(LstmSpec {
            input_dim,
            hidden: rows / 4,
            wx,
            wh,
            b,
        })
    }

    pub fn zero_state(&self, tape: &mut Tape) -> (NodeId, NodeId) {
        (tape.zeros(self.hidden), tape.zeros(self.hidden))
    }

    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: NodeId,
        state: (NodeId, NodeId),
    ) -> (NodeId, NodeId) {
        tape.lstm_step(store, self.wx, self.wh, self.b, x, state)
    }

    /// Encode a nonempty step sequence; returns the final hidden state node.
    pub fn encode(&self, tape: &mut Tape, store: &ParameterStore, steps: &[NodeId]) -> NodeId {
        assert!(!steps.is_empty(), "cannot encode an empty sequence");
        let mut state = self.zero_state(tape);
        for &x in steps {
            state = self.step(tape, store, x, state);
        }
        state.0
    }

    /// One step without gradients.
    pub fn step_plain(&self, store: &ParameterStore, x: &[f64], state: &LstmState) -> LstmState {
        debug_assert_eq!(x.len(), self.input_dim);
        let d = self.hidden;
        let mut pre = store.value(self.b).to_vec();
        let wx = store.value(self.wx);
        let wh = store.value(self.wh);
        for r in 0..4 * d {
            let mut acc = pre[r];
            let row = &wx[r * self.input_dim..(r + 1) * self.input_dim];
            for (c, &xv) in x.iter().enumerate() {
                acc += row[c] * xv;
            }
            let row = &wh[r * d..(r + 1) * d];
            for (c, &hv) in state.h.iter().enumerate() {
                acc += row[c] * hv;
            }
            pre[r] = acc;
        }
        let mut next = LstmState::zeros(d);
        for j in 0..d {
            let i_g = sigmoid(pre[j]);
            let f_g = sigmoid(pre[d + j]);
            let g_g = pre[2 * d + j].tanh();
            let o_g = sigmoid(pre[3 * d + j]);
            let c_new = f_g * state.c[j] + i_g * g_g;
            next.c[j] = c_new;
            next.h[j] = o_g * c_new.tanh();
        }
        next
    }

    /// Final hidden state of a nonempty sequence, without gradients.
    pub fn encode_plain(&self, store: &ParameterStore, steps: &[Vec<f64>]) -> Vec<f64> {
        assert!(!steps.is_empty(), "cannot encode an empty sequence");
        let mut state = LstmState::zeros(self.hidden);
        for x in steps {
            state = self.step_plain(store, x, &state);
        }
        state.h
    }
}
