use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for every parameter of one store.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.tensor.rows(), p.tensor.cols()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Parameters without a gradient or
    /// marked non-trainable are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.param(id).trainable {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for (((pj, mj), vj), gj) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
                *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *pj -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> (ParamStore, super::super::params::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::scalar(v)).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let (mut s, id) = one_param(1.25);
        let mut st = AdamState::new(&s);
        let mut g = Gradients::empty(1);
        g.accumulate_param(id, &Tensor::scalar(0.0));
        for _ in 0..10 {
            st.step(&mut s, &g, &AdamConfig::with_lr(1e-3));
        }
        assert_eq!(s.get(id).item(), 1.25);
    }

    #[test]
    fn first_step_matches_hand_formula() {
        let (mut s, id) = one_param(0.5);
        let mut st = AdamState::new(&s);
        let mut g = Gradients::empty(1);
        let grad = 0.3;
        g.accumulate_param(id, &Tensor::scalar(grad));
        let cfg = AdamConfig::with_lr(1e-3);
        st.step(&mut s, &g, &cfg);
        // m̂ = g, v̂ = g², update = lr * g / (|g| + eps)
        let m = (1.0 - cfg.beta1) * grad / (1.0 - cfg.beta1);
        let v = (1.0 - cfg.beta2) * grad * grad / (1.0 - cfg.beta2);
        let expected = 0.5 - cfg.lr * m / (v.sqrt() + cfg.eps);
        assert!((s.get(id).item() - expected).abs() < 1e-15);
        assert!((s.get(id).item() - (0.5 - 1e-3)).abs() < 1e-10);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let (mut s, id) = one_param(2.0);
        s.set_trainable(id, false);
        let mut st = AdamState::new(&s);
        let mut g = Gradients::empty(1);
        g.accumulate_param(id, &Tensor::scalar(1.0));
        st.step(&mut s, &g, &AdamConfig::with_lr(0.1));
        assert_eq!(s.get(id).item(), 2.0);
    }
}
