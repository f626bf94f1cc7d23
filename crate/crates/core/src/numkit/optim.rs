use serde::{Deserialize, Serialize};

use super::{GradBuffer, NumError, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update over every parameter. Untouched parameters
/// are treated as having zero gradient, so their moments still decay.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &GradBuffer,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), NumError> {
    if cfg.lr <= 0.0 {
        return Err(NumError::Config("learning rate must be positive".into()));
    }
    if state.m.len() != params.len() {
        return Err(NumError::Dimension(format!(
            "optimizer state for {} params, store has {}",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let g = grads.dense(id);
        let p = params.get_mut(id).data_mut();
        if g.len() != p.len() || state.m[id.index()].len() != p.len() {
            return Err(NumError::Dimension(format!("gradient shape for parameter {}", id.index())));
        }
        let (m, v) = (&mut state.m[id.index()], &mut state.v[id.index()]);
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{Tape, Tensor};

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(0.7));
        let mut state = AdamState::new(&store);
        state.m[0][0] = 0.5;
        state.v[0][0] = 0.25;
        let grads = GradBuffer::new(&store);
        adam_step(&mut store, &grads, &mut state, &AdamConfig::default()).unwrap();
        let expected = 0.7 - 0.01 * (0.45 / 0.1) / ((0.24975f64 / 0.001).sqrt() + 1e-8);
        assert!((store.get(w).data()[0] - expected).abs() < 1e-12);
        assert!((state.m[0][0] - 0.45).abs() < 1e-15);
        assert!((state.v[0][0] - 0.24975).abs() < 1e-15);

        // from a fresh state a zero gradient moves nothing
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(0.7));
        let mut state = AdamState::new(&store);
        let zero = GradBuffer::new(&store);
        adam_step(&mut store, &zero, &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(store.get(w).data()[0], 0.7);
    }

    #[test]
    fn first_step_matches_closed_form() {
        let g = -0.3;
        let cfg = AdamConfig::default();
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(2.0));
        let mut grads = GradBuffer::new(&store);
        grads.add_dense(w, &[g]);
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &grads, &mut state, &cfg).unwrap();
        // m̂ = g, v̂ = g², so Δ = −lr·g/(|g|+eps)
        let expected = 2.0 - cfg.lr * g / (g.abs() + cfg.eps);
        assert!((store.get(w).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn converges_on_quadratic() {
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(1.0));
        let mut state = AdamState::new(&store);
        for _ in 0..100 {
            let grads = {
                let mut tape = Tape::new(&store);
                let x = tape.param(w);
                let sq = tape.square(x).unwrap();
                let loss = tape.sum_all(sq).unwrap();
                tape.backward(loss).unwrap().params
            };
            adam_step(&mut store, &grads, &mut state, &cfg).unwrap();
        }
        assert!(store.get(w).data()[0].abs() < 0.2);
    }

    #[test]
    fn rejects_bad_lr_and_mismatched_state() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(1.0));
        let mut state = AdamState::new(&store);
        let grads = GradBuffer::new(&store);
        let bad = AdamConfig { lr: 0.0, ..AdamConfig::default() };
        assert!(adam_step(&mut store, &grads, &mut state, &bad).is_err());
        store.add("extra", Tensor::scalar(1.0));
        let grads = GradBuffer::new(&store);
        assert!(matches!(
            adam_step(&mut store, &grads, &mut state, &AdamConfig::default()),
            Err(NumError::Dimension(_))
        ));
    }
}
