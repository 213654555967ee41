//! Decoupled-weight-decay Adam and gradient plumbing.

use super::TrainError;
use crate::numeric::{Gradients, ParamBinding, ParamStore, Tensor};
use indexmap::IndexMap;

/// First/second moment estimates and the per-parameter step count.
struct MomentState {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW: Adam moment updates plus weight decay applied directly to the
/// parameter (not through the gradient).
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    moments: IndexMap<String, MomentState>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, moments: IndexMap::new() }
    }

    /// Apply one update. Parameters without a gradient entry (not reached by
    /// this step's loss) are left untouched. Any non-finite gradient aborts.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &IndexMap<String, Tensor>,
        global_step: u64,
    ) -> Result<(), TrainError> {
        for (name, grad) in grads {
            if !grad.data.iter().all(|g| g.is_finite()) {
                return Err(TrainError::NonFinite {
                    what: format!("gradient of {name}"),
                    step: global_step,
                });
            }
        }
        for (name, tensor) in store.iter_mut() {
            let Some(grad) = grads.get(name) else { continue };
            let state = self.moments.entry(name.clone()).or_insert_with(|| MomentState {
                step: 0,
                m: vec![0.0; tensor.data.len()],
                v: vec![0.0; tensor.data.len()],
            });
            state.step += 1;
            let bias1 = 1.0 - self.beta1.powi(state.step as i32);
            let bias2 = 1.0 - self.beta2.powi(state.step as i32);
            for ((p, &g), (m, v)) in tensor
                .data
                .iter_mut()
                .zip(&grad.data)
                .zip(state.m.iter_mut().zip(state.v.iter_mut()))
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= self.lr * (m_hat / (v_hat.sqrt() + self.eps)) + self.lr * self.weight_decay * *p;
            }
        }
        Ok(())
    }
}

/// Pull per-parameter gradients out of a finished backward pass.
pub fn collect_gradients(
    mut grads: Gradients,
    binding: &ParamBinding,
) -> IndexMap<String, Tensor> {
    let mut out = IndexMap::with_capacity(binding.len());
    for (name, id) in binding.iter() {
        if let Some(g) = grads.take(id) {
            out.insert(name.clone(), g);
        }
    }
    out
}

/// Scale all gradients down so their joint Euclidean norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut IndexMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for v in &mut g.data {
                *v *= scale;
            }
        }
    }
    norm
}
