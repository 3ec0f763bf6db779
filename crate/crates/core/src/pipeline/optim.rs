//! Adam over a chosen subset of the parameter store.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot {
    pub id: ParamId,
    pub m: Tensor,
    pub v: Tensor,
}

/// Bias-corrected Adam. Moments are kept per parameter in the order the ids
/// were given.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub steps: u64,
    pub slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(store: &ParamStore, ids: impl IntoIterator<Item = ParamId>) -> Self {
        let slots = ids
            .into_iter()
            .map(|id| {
                let shape = store.value(id).shape();
                AdamSlot {
                    id,
                    m: Tensor::zeros(shape),
                    v: Tensor::zeros(shape),
                }
            })
            .collect();
        Self { steps: 0, slots }
    }

    /// One update from the gradients held in `store`. Every tracked
    /// parameter must have a gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if let Some(s) = self.slots.iter().find(|s| store.grad(s.id).is_none()) {
            return Err(Error::contract(format!(
                "adam step without a gradient for `{}`",
                store.name(s.id)
            )));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for s in &mut self.slots {
            let p = store.get_mut(s.id);
            let g = p.grad.as_ref().expect("checked above");
            let (m, v, w) = (s.m.data_mut(), s.v.data_mut(), p.value.data_mut());
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}
