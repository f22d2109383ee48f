//! Central finite-difference verification of analytic gradients.

use super::params::{Gradients, ParamId, ParameterStore};

/// Outcome of one check: the worst component and how many were compared.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<WorstComponent>,
}

#[derive(Debug, Clone)]
pub struct WorstComponent {
    pub param: String,
    pub flat_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error with an absolute fallback near zero: differences below
/// `abs_tol` count as zero error.
fn component_error(analytic: f64, numeric: f64, abs_tol: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= abs_tol {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Compare `analytic` against central differences of `loss` for every
/// component of the listed parameters. `loss` must be a pure function of the
/// store's current values.
pub fn central_difference_check(
    store: &mut ParameterStore,
    params: &[ParamId],
    analytic: &Gradients,
    eps: f64,
    abs_tol: f64,
    mut loss: impl FnMut(&ParameterStore) -> f64,
) -> CheckReport {
    let mut report = CheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    for &p in params {
        let len = store.entry(p).len();
        for i in 0..len {
            let orig = store.value(p)[i];
            store.value_mut(p)[i] = orig + eps;
            let up = loss(store);
            store.value_mut(p)[i] = orig - eps;
            let down = loss(store);
            store.value_mut(p)[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(p).map_or(0.0, |g| g[i]);
            let err = component_error(a, numeric, abs_tol);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(WorstComponent {
                    param: store.entry(p).name.clone(),
                    flat_index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    report
}

/// Convenience: check every parameter in the store.
pub fn check_all_params(
    store: &mut ParameterStore,
    analytic: &Gradients,
    eps: f64,
    abs_tol: f64,
    loss: impl FnMut(&ParameterStore) -> f64,
) -> CheckReport {
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    central_difference_check(store, &ids, analytic, eps, abs_tol, loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::feedforward::{Activation, FeedforwardSpec};
    use crate::nn::lstm::LstmSpec;
    use crate::nn::params::Init;
    use crate::nn::tape::{attention_weights, Tape};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-4;
    const ABS_TOL: f64 = 1e-6;
    const REL_TOL: f64 = 1e-3;

    #[test]
    fn sequence_encoder_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParameterStore::new();
            let enc = LstmSpec::register(&mut store, "enc", 3, 4, &mut rng);
            let steps: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let probe: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let forward = |store: &ParameterStore| {
                let mut tape = Tape::new();
                let nodes: Vec<_> = steps.iter().map(|s| tape.input(s)).collect();
                let h = enc.encode(&mut tape, store, &nodes);
                let p = tape.input(&probe);
                let loss = tape.dot(h, p);
                (tape, loss)
            };
            let (mut tape, loss) = forward(&store);
            let grads = tape.backward(&store, loss);
            let report = check_all_params(&mut store, &grads, EPS, ABS_TOL, |s| {
                let (tape, loss) = forward(s);
                tape.scalar(loss)
            });
            assert!(
                report.max_rel_err < REL_TOL,
                "seed {seed}: {:?}",
                report.worst
            );
        }
    }

    #[test]
    fn feedforward_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut store = ParameterStore::new();
            let ff = FeedforwardSpec::register(
                &mut store,
                "ff",
                &[3, 5, 2],
                Activation::Tanh,
                Activation::Linear,
                &mut rng,
            );
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let probe: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let forward = |store: &ParameterStore| {
                let mut tape = Tape::new();
                let xn = tape.input(&x);
                let y = ff.apply(&mut tape, store, xn);
                let p = tape.input(&probe);
                let loss = tape.dot(y, p);
                (tape, loss)
            };
            let (mut tape, loss) = forward(&store);
            let grads = tape.backward(&store, loss);
            let report = check_all_params(&mut store, &grads, EPS, ABS_TOL, |s| {
                let (tape, loss) = forward(s);
                tape.scalar(loss)
            });
            assert!(
                report.max_rel_err < REL_TOL,
                "seed {seed}: {:?}",
                report.worst
            );
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        // Differentiates through both a projected query and projected keys.
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let mut store = ParameterStore::new();
            let wq = store.register("wq", 4, 4, Init::Uniform(0.3), &mut rng);
            let wk = store.register("wk", 4, 4, Init::Uniform(0.3), &mut rng);
            let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let keys: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let probe: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let forward = |store: &ParameterStore| {
                let mut tape = Tape::new();
                let qn = tape.input(&q);
                let qn = tape.matvec(store, wq, qn);
                let kn: Vec<_> = keys
                    .iter()
                    .map(|k| {
                        let k = tape.input(k);
                        tape.matvec(store, wk, k)
                    })
                    .collect();
                let w = attention_weights(&mut tape, qn, &kn);
                let p = tape.input(&probe);
                let loss = tape.dot(w, p);
                (tape, loss)
            };
            let (mut tape, loss) = forward(&store);
            let grads = tape.backward(&store, loss);
            let report = check_all_params(&mut store, &grads, EPS, ABS_TOL, |s| {
                let (tape, loss) = forward(s);
                tape.scalar(loss)
            });
            assert!(
                report.max_rel_err < REL_TOL,
                "seed {seed}: {:?}",
                report.worst
            );
        }
    }

    #[test]
    fn l1_gradients_match_finite_differences_away_from_ties() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let mut store = ParameterStore::new();
            let w = store.register("w", 4, 3, Init::Uniform(0.5), &mut rng);
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let target: Vec<f64> = (0..4).map(|_| rng.gen_range(2.0..3.0)).collect();
            let forward = |store: &ParameterStore| {
                let mut tape = Tape::new();
                let xn = tape.input(&x);
                let y = tape.matvec(store, w, xn);
                let t = tape.input(&target);
                let loss = tape.l1_loss(y, t);
                (tape, loss)
            };
            let (mut tape, loss) = forward(&store);
            let grads = tape.backward(&store, loss);
            let report = check_all_params(&mut store, &grads, EPS, ABS_TOL, |s| {
                let (tape, loss) = forward(s);
                tape.scalar(loss)
            });
            assert!(
                report.max_rel_err < REL_TOL,
                "seed {seed}: {:?}",
                report.worst
            );
        }
    }
}
