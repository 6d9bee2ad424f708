//! Adaptive-moment optimizer over a [`ParamStore`].

use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamStore};
use crate::tensor::{Precision, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam state. Moments and updated parameters are rounded to the storage
/// precision so a checkpointed state resumes bit-exactly.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub precision: Precision,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig, precision: Precision) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Adam { config, precision, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update. `grads` is indexed like the store; parameters with
    /// no gradient or in the frozen group are left alone. Returns `Ok(false)`
    /// without touching anything when some gradient is non-finite.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Tensor>],
        lr: impl Fn(ParamGroup) -> f64,
    ) -> Result<bool> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::contract("optimizer state does not match the parameter store"));
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Ok(false);
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let p = self.precision;
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let Some(g) = &grads[id.0] else { continue };
            let group = store.get(id).group;
            if group == ParamGroup::Frozen {
                continue;
            }
            let rate = lr(group);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let param = &mut store.get_mut(id).value;
            for (((w, mi), vi), &gi) in param.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mi = p.round(beta1 * *mi + (1.0 - beta1) * gi);
                *vi = p.round(beta2 * *vi + (1.0 - beta2) * gi * gi);
                let step = rate * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                *w = p.round(*w - step);
            }
        }
        Ok(true)
    }
}
