//! Named dense parameters with paired gradient buffers and the update rules.


use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Handle to one named array inside a [`ParameterStore`]. Only meaningful for
/// the store that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in [-a, a].
    Uniform(f64),
    Zeros,
    /// Square identity matrix.
    Identity,
    Const(f64),
}

/// Default init half-width for all trained weights.
pub const DEFAULT_INIT: Init = Init::Uniform(0.08);

/// Update rule applied by [`ParameterStore::optimizer_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// All weights of one trainable component, each with a same-shape gradient
/// buffer, plus the global step counter.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: Vec<ParamEntry>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        let n = rows * cols;
        let value = match init {
            Init::Uniform(a) => (0..n).map(|_| rng.gen_range(-a..=a)).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Identity => {
                assert_eq!(rows, cols, "identity init needs a square shape");
                let mut v = vec![0.0; n];
                for i in 0..rows {
                    v[i * cols + i] = 1.0;
                }
                v
            }
        };
        self.entries.push(ParamEntry {
            name,
            rows,
            cols,
            value,
            grad: vec![0.0; n],
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn shape(&self, id: ParamId) -> (usize, usize) {
        let e = &self.entries[id.0];
        (e.rows, e.cols)
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Add externally computed gradients into the buffers.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (i, g) in grads.by_param.iter().enumerate() {
            if let Some(g) = g {
                let buf = &mut self.entries[i].grad;
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Apply one update from the accumulated gradients, then clear them and
    /// advance the step counter. Rejects non-finite gradients.
    pub fn optimizer_step(&mut self, kind: OptimizerKind, lr: f64) -> Result<()> {
        for e in &self.entries {
            if let Some(pos) = e.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient in '{}' at flat index {pos} (step {})",
                    e.name, self.step
                )));
            }
        }
        let t = (self.step + 1) as f64;
        for e in &mut self.entries {
            match kind {
                OptimizerKind::Sgd => {
                    for (w, g) in e.value.iter_mut().zip(&e.grad) {
                        *w -= lr * g;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let bc1 = 1.0 - beta1.powf(t);
                    let bc2 = 1.0 - beta2.powf(t);
                    for i in 0..e.value.len() {
                        let g = e.grad[i];
                        e.adam_m[i] = beta1 * e.adam_m[i] + (1.0 - beta1) * g;
                        e.adam_v[i] = beta2 * e.adam_v[i] + (1.0 - beta2) * g * g;
                        let m_hat = e.adam_m[i] / bc1;
                        let v_hat = e.adam_v[i] / bc2;
                        e.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.step += 1;
        Ok(())
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub(crate) by_param: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn new(n_params: usize) -> Self {
        Gradients {
            by_param: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param[id.0].as_deref()
    }

    pub(crate) fn slot(&mut self, id: ParamId, len: usize) -> &mut [f64] {
        self.by_param[id.0].get_or_insert_with(|| vec![0.0; len])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn sgd_single_step_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParameterStore::new();
        let w = store.register("w", 1, 1, Init::Const(1.0), &mut rng);
        let mut grads = Gradients::new(1);
        grads.slot(w, 1)[0] = 0.5;
        store.accumulate(&grads);
        store.optimizer_step(OptimizerKind::Sgd, 0.1).unwrap();
        assert!((store.value(w)[0] - 0.95).abs() < 1e-12);
        assert_eq!(store.step_count(), 1);
        assert_eq!(store.grad(w)[0], 0.0);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParameterStore::new();
        let w = store.register("w", 2, 3, Init::Uniform(0.08), &mut rng);
        let before = store.value(w).to_vec();
        store.optimizer_step(OptimizerKind::adam(), 1e-3).unwrap();
        store.optimizer_step(OptimizerKind::Sgd, 1e-3).unwrap();
        assert_eq!(store.value(w), &before[..]);
    }

    #[test]
    fn non_finite_gradient_is_a_training_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParameterStore::new();
        let w = store.register("w", 1, 2, Init::Zeros, &mut rng);
        let mut grads = Gradients::new(1);
        grads.slot(w, 2)[1] = f64::NAN;
        store.accumulate(&grads);
        let err = store.optimizer_step(OptimizerKind::Sgd, 0.1);
        assert!(matches!(err, Err(Error::Training(msg)) if msg.contains("'w'")));
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // Minimize (w - 3)^2 by feeding its gradient 2(w - 3).
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParameterStore::new();
        let w = store.register("w", 1, 1, Init::Const(0.0), &mut rng);
        for _ in 0..20_000 {
            let x = store.value(w)[0];
            let mut grads = Gradients::new(1);
            grads.slot(w, 1)[0] = 2.0 * (x - 3.0);
            store.accumulate(&grads);
            store.optimizer_step(OptimizerKind::adam(), 1e-2).unwrap();
        }
        assert!((store.value(w)[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParameterStore::new();
        let w = store.register("w", 1, 1, Init::Const(10.0), &mut rng);
        for _ in 0..2_000 {
            let x = store.value(w)[0];
            let mut grads = Gradients::new(1);
            grads.slot(w, 1)[0] = 2.0 * (x - 3.0);
            store.accumulate(&grads);
            store.optimizer_step(OptimizerKind::Sgd, 0.1).unwrap();
        }
        assert!((store.value(w)[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn identical_seeds_give_identical_parameters() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut store = ParameterStore::new();
            store.register("a", 4, 4, Init::Uniform(0.08), &mut rng);
            store.register("b", 1, 4, Init::Uniform(0.08), &mut rng);
            store
        };
        let (s1, s2) = (build(), build());
        for (id, e) in s1.iter() {
            assert_eq!(e.value, s2.value(id));
        }
    }
}
