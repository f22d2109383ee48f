//! Affine layer stacks with a fixed nonlinearity between layers.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{Init, ParamId, ParameterStore, DEFAULT_INIT};
use super::tape::{NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
    Linear,
}

impl Activation {
    fn apply_tape(self, tape: &mut Tape, x: NodeId) -> NodeId {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Relu => tape.relu(x),
            Activation::Linear => x,
        }
    }

    fn apply_plain(self, x: &mut [f64]) {
        match self {
            Activation::Tanh => x.iter_mut().for_each(|v| *v = v.tanh()),
            Activation::Sigmoid => x.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp())),
            Activation::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Linear => {}
        }
    }
}

/// A stack of affine maps `dims[0] -> dims[1] -> ... -> dims.last()`, with
/// `hidden` applied after every layer but the last and `output` after the last.
#[derive(Debug, Clone)]
pub struct FeedforwardSpec {
    pub dims: Vec<usize>,
    pub weights: Vec<ParamId>,
    pub biases: Vec<ParamId>,
    pub hidden: Activation,
    pub output: Activation,
}

impl FeedforwardSpec {
    pub fn register(
        store: &mut ParameterStore,
        prefix: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::register_with(store, prefix, dims, hidden, output, DEFAULT_INIT, rng)
    }

    pub fn register_with(
        store: &mut ParameterStore,
        prefix: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "a feedforward stack needs input and output dims");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            weights.push(store.register(
                format!("{prefix}.w{l}"),
                dims[l + 1],
                dims[l],
                init,
                rng,
            ));
            biases.push(store.register(format!("{prefix}.b{l}"), 1, dims[l + 1], Init::Zeros, rng));
        }
        FeedforwardSpec {
            dims: dims.to_vec(),
            weights,
            biases,
            hidden,
            output,
        }
    }

    pub fn lookup(
        store: &ParameterStore,
        prefix: &str,
        hidden: Activation,
        output: Activation,
    ) -> Option<Self> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut dims = Vec::new();
        for l in 0.. {
            match (
                store.id_by_name(&format!("{prefix}.w{l}")),
                store.id_by_name(&format!("{prefix}.b{l}")),
            ) {
                (Some(w), Some(b)) => {
                    let (rows, cols) = store.shape(w);
                    if dims.is_empty() {
                        dims.push(cols);
                    }
                    dims.push(rows);
                    weights.push(w);
                    biases.push(b);
                }
                _ => break,
            }
        }
        if weights.is_empty() {
            return None;
        }
        Some(FeedforwardSpec {
            dims,
            weights,
            biases,
            hidden,
            output,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParameterStore, x: NodeId) -> NodeId {
        assert_eq!(
            tape.val(x).len(),
            self.input_dim(),
            "feedforward input dim mismatch"
        );
        let mut cur = x;
        let last = self.weights.len() - 1;
        for l in 0..self.weights.len() {
            let lin = tape.matvec(store, self.weights[l], cur);
            let b = tape.param(store, self.biases[l]);
            let lin = tape.add(lin, b);
            let act = if l == last { self.output } else { self.hidden };
            cur = act.apply_tape(tape, lin);
        }
        cur
    }

    pub fn apply_plain(&self, store: &ParameterStore, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input_dim());
        let mut cur = x.to_vec();
        let last = self.weights.len() - 1;
        for l in 0..self.weights.len() {
            let (rows, cols) = store.shape(self.weights[l]);
            let w = store.value(self.weights[l]);
            let mut next = store.value(self.biases[l]).to_vec();
            for r in 0..rows {
                let row = &w[r * cols..(r + 1) * cols];
                let mut acc = next[r];
                for c in 0..cols {
                    acc += row[c] * cur[c];
                }
                next[r] = acc;
            }
            let act = if l == last { self.output } else { self.hidden };
            act.apply_plain(&mut next);
            cur = next;
        }
        cur
    }
}
