use serde::{Deserialize, Serialize};

use super::{Gradients, NumericsError, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clip applied before each step; `None` disables it.
    pub max_grad_norm: Option<f64>,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: Some(0.5),
        }
    }
}

/// Moment buffers for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.rows(), t.cols());
        Self {
            config,
            step: 0,
            m: store.tensors().iter().map(zeros).collect(),
            v: store.tensors().iter().map(zeros).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam step over every parameter of `store`.
///
/// Parameters that received no gradient are treated as having a zero
/// gradient. A non-finite gradient aborts the step before anything is
/// written.
pub fn adam_update(
    store: &mut ParamStore,
    grads: &mut Gradients,
    state: &mut AdamState,
) -> Result<(), NumericsError> {
    if state.m.len() != store.len() {
        return Err(NumericsError::Shape("optimizer state does not match store".into()));
    }
    for (id, g) in grads.params() {
        if !store.owns(id) {
            return Err(NumericsError::ForeignParam);
        }
        if !g.is_finite() {
            return Err(NumericsError::NanGradient(store.name(id).to_string()));
        }
        if !g.same_shape(store.get(id)) {
            return Err(NumericsError::Shape(format!("gradient for {}", store.name(id))));
        }
    }
    if let Some(max) = state.config.max_grad_norm {
        grads.clip_global_norm(max);
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let g = grads.param(id);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = store.get_mut(id);
        for k in 0..p.len() {
            let gk = g.map_or(0.0, |g| g.data()[k]);
            let mk = c.beta1 * m.data()[k] + (1.0 - c.beta1) * gk;
            let vk = c.beta2 * v.data()[k] + (1.0 - c.beta2) * gk * gk;
            m.data_mut()[k] = mk;
            v.data_mut()[k] = vk;
            let m_hat = mk / bc1;
            let v_hat = vk / bc2;
            p.data_mut()[k] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Graph;

    fn one_param(value: f64) -> (ParamStore, crate::numerics::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(value));
        (s, id)
    }

    fn grads_for(store: &ParamStore, id: crate::numerics::ParamId, k: f64) -> Gradients {
        // loss = k * p  =>  dloss/dp = k
        let mut g = Graph::new();
        let p = g.param(store, id);
        let l = g.scale(p, k);
        let s = g.sum(l);
        g.backward(s).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut s, id) = one_param(1.5);
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), &s);
        let mut g = grads_for(&s, id, 0.0);
        adam_update(&mut s, &mut g, &mut st).unwrap();
        assert_eq!(s.get(id).item(), 1.5);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let (mut s, id) = one_param(1.0);
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), &s);
        let mut g = grads_for(&s, id, 1.0);
        g.param_mut(id).unwrap().data_mut()[0] = f64::NAN;
        assert!(matches!(
            adam_update(&mut s, &mut g, &mut st),
            Err(NumericsError::NanGradient(_))
        ));
        assert_eq!(s.get(id).item(), 1.0);
        assert_eq!(st.step_count(), 0);
    }
}
