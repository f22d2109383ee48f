//! Featurization of game histories for the sequence encoders.
//!
//! A joint step is `[one-hot learner (s) | one-hot opponent (s) | start flag]`;
//! a single-player step is `[one-hot (s) | start flag]`. Every encoded history
//! is prefixed with a start token (all-zero one-hot blocks, flag = 1), which
//! also gives the empty history a well-defined encoding. Opponent-action
//! suffixes use plain `s`-dimensional one-hots with no flag.

use crate::game::Action;

pub fn joint_dim(arity: usize) -> usize {
    2 * arity + 1
}

pub fn single_dim(arity: usize) -> usize {
    arity + 1
}

pub fn joint_start(arity: usize) -> Vec<f64> {
    let mut v = vec![0.0; joint_dim(arity)];
    v[2 * arity] = 1.0;
    v
}

pub fn joint_step(pair: (Action, Action), arity: usize) -> Vec<f64> {
    let mut v = vec![0.0; joint_dim(arity)];
    v[pair.0.index()] = 1.0;
    v[arity + pair.1.index()] = 1.0;
    v
}

pub fn single_start(arity: usize) -> Vec<f64> {
    let mut v = vec![0.0; single_dim(arity)];
    v[arity] = 1.0;
    v
}

pub fn single_step(a: Action, arity: usize) -> Vec<f64> {
    let mut v = vec![0.0; single_dim(arity)];
    v[a.index()] = 1.0;
    v
}

/// Start token followed by one step per joint action.
pub fn joint_steps(pairs: &[(Action, Action)], arity: usize) -> Vec<Vec<f64>> {
    std::iter::once(joint_start(arity))
        .chain(pairs.iter().map(|&p| joint_step(p, arity)))
        .collect()
}

/// Start token followed by one step per own/opponent action.
pub fn single_steps(actions: &[Action], arity: usize) -> Vec<Vec<f64>> {
    std::iter::once(single_start(arity))
        .chain(actions.iter().map(|&a| single_step(a, arity)))
        .collect()
}

/// One plain one-hot per opponent action (suffixes are never empty).
pub fn suffix_steps(actions: &[Action], arity: usize) -> Vec<Vec<f64>> {
    actions
        .iter()
        .map(|&a| {
            let mut v = vec![0.0; arity];
            v[a.index()] = 1.0;
            v
        })
        .collect()
}
