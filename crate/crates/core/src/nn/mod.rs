//! Minimal differentiable-computation substrate: parameter store, recurrent
//! sequence encoder, feedforward stacks, softmax attention, losses, the
//! optimizer, and finite-difference gradient verification.

pub mod checkpoint;
pub mod feedforward;
pub mod gradcheck;
pub mod lstm;
pub mod params;
pub mod tape;

pub use feedforward::{Activation, FeedforwardSpec};
pub use lstm::{LstmSpec, LstmState};
pub use params::{Gradients, Init, OptimizerKind, ParamId, ParameterStore, DEFAULT_INIT};
pub use tape::{attention_weights, NodeId, Tape};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Softmax of a raw score vector (no gradients).
pub fn softmax_plain(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax attention weights over query-key inner products (no gradients).
pub fn attention_weights_plain(query: &[f64], keys: &[&[f64]]) -> Vec<f64> {
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| query.iter().zip(*k).map(|(a, b)| a * b).sum())
        .collect();
    softmax_plain(&scores)
}

/// Sum of absolute component differences.
pub fn l1_plain(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Index of the maximum; the lowest index wins ties.
pub fn argmax_tie_low(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Draw an index from a probability vector.
pub fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
