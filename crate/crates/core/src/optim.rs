//! AdamW with decoupled weight decay, and an exponential moving average of
//! the weights for evaluation.

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::tensor::Matrix;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Matrix> = store.values().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self { lr, beta1, beta2, eps: 1e-8, weight_decay, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter from `grads` (store order).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Matrix]) {
        assert_eq!(grads.len(), store.len(), "AdamW: {} grads for {} params", grads.len(), store.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let g = &grads[i];
            p.value.assert_same_shape(g, "AdamW grad");
            let (m, v) = (self.m[i].as_mut_slice(), self.v[i].as_mut_slice());
            for (j, w) in p.value.as_mut_slice().iter_mut().enumerate() {
                let gj = g.as_slice()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= self.lr * self.weight_decay * *w;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// `shadow ← rate·shadow + (1−rate)·params`, elementwise.
pub fn ema_update(shadow: &mut [f64], params: &[f64], rate: f64) {
    assert!(rate > 0.0 && rate < 1.0, "EMA rate must lie in (0,1), got {rate}");
    assert_eq!(shadow.len(), params.len());
    for (s, p) in shadow.iter_mut().zip(params) {
        *s = rate * *s + (1.0 - rate) * p;
    }
}

/// Shadow copy of a [`ParamStore`] tracked with [`ema_update`].
#[derive(Clone, Debug)]
pub struct Ema {
    pub rate: f64,
    shadow: ParamStore,
}

impl Ema {
    pub fn new(store: &ParamStore, rate: f64) -> Self {
        assert!(rate > 0.0 && rate < 1.0, "EMA rate must lie in (0,1), got {rate}");
        Self { rate, shadow: store.clone() }
    }

    pub fn update(&mut self, store: &ParamStore) {
        for (s, p) in self.shadow.params_mut().iter_mut().zip(store.params()) {
            ema_update(s.value.as_mut_slice(), p.value.as_slice(), self.rate);
        }
    }

    pub fn shadow(&self) -> &ParamStore {
        &self.shadow
    }

    pub fn into_shadow(self) -> ParamStore {
        self.shadow
    }
}
