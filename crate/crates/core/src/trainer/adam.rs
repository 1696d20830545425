//! Adam with bias correction; moments are kept per parameter so they can be
//! checkpointed alongside the weights.

use serde::{Deserialize, Serialize};

use promptseg_autograd::{Float, Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    /// First and second moments, indexed by parameter id; `None` until the
    /// parameter first receives a gradient.
    pub moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Self { config, step: 0, moments: vec![None; num_params] }
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (ob1, ob2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let step_size = T::of(lr / c1);
        let (rc2, eps) = (T::of(1.0 / c2), T::of(eps));
        for (id, g) in grads.iter() {
            if !store.is_trainable(id) {
                continue;
            }
            let n = g.len();
            let slot = &mut self.moments[id.index()];
            let (m, v) = slot.get_or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let w = store.get_mut(id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + ob1 * gi;
                v[i] = b2 * v[i] + ob2 * gi * gi;
                w[i] -= step_size * m[i] / ((v[i] * rc2).sqrt() + eps);
            }
        }
    }
}
