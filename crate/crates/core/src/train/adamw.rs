use std::collections::BTreeMap;

use crate::autodiff::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Adam with decoupled weight decay:
/// `p ← p − lr·(m̂/(√v̂ + eps) + wd·p)` with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        self.moments.get(&id).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Updates every parameter of `stores` that has a gradient in `grads`.
    /// Nothing is modified if any gradient is non-finite or belongs to none
    /// of the stores.
    pub fn step(&mut self, stores: &mut [&mut ParamStore], grads: &Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                let name = stores
                    .iter()
                    .find(|s| s.owns(id))
                    .map_or("<unknown>".to_string(), |s| s.name(id).to_string());
                return Err(Error::Numerical(format!(
                    "non-finite gradient {} at element {i} of {name}; step aborted",
                    g[i]
                )));
            }
            match stores.iter().find(|s| s.owns(id)) {
                Some(s) if s.get(id).numel() == g.len() => {}
                Some(s) => {
                    return Err(Error::Shape {
                        op: "adamw_step",
                        left: s.get(id).shape().to_vec(),
                        right: vec![g.len()],
                    })
                }
                None => {
                    return Err(Error::Contract(
                        "gradient for a parameter outside the optimized stores".into(),
                    ))
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (id, g) in grads.iter() {
            let store = stores.iter_mut().find(|s| s.owns(id)).expect("checked above");
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let p = store.get_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps) + self.weight_decay * p[i];
                p[i] -= self.lr * update;
            }
        }
        Ok(())
    }
}
