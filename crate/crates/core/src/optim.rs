//! Adam with bias correction over the trainable entries of a [`ParamStore`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{FurnError, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(FurnError::InvalidConfig(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moment estimates, one pair per store entry (empty for
/// non-trainable entries).
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros = |_| -> Vec<Tensor> {
            store
                .iter()
                .map(|(_, t, trainable)| if trainable { Tensor::zeros(t.shape()) } else { Tensor::zeros(&[0]) })
                .collect()
        };
        Adam {
            cfg,
            m: zeros(()),
            v: zeros(()),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update. `grads[i]` is the gradient of store entry `i`;
    /// a missing gradient counts as zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        self.t += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.cfg;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..store.len() {
            if !store.is_trainable(i) {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(i).data_mut();
            match grads.get(i).and_then(Option::as_ref) {
                Some(g) => {
                    for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
                None => {
                    for ((p, m), v) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m *= b1;
                        *v *= b2;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
    }

    /// Moments keyed `m/<param>` and `v/<param>`, plus the step count `t`.
    pub fn to_map(&self, store: &ParamStore) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (i, (name, _, trainable)) in store.iter().enumerate() {
            if trainable {
                out.insert(format!("m/{name}"), self.m[i].clone());
                out.insert(format!("v/{name}"), self.v[i].clone());
            }
        }
        out.insert("t".into(), Tensor::scalar(self.t as f64));
        out
    }

    pub fn load(&mut self, store: &ParamStore, map: &BTreeMap<String, Tensor>) -> Result<()> {
        let fetch = |key: String, shape: &[usize]| -> Result<Tensor> {
            let t = map.get(&key).ok_or_else(|| FurnError::Io(format!("missing tensor `{key}`")))?;
            if t.shape() != shape {
                return Err(FurnError::ShapeMismatch(format!("tensor `{key}` has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t.clone())
        };
        for (i, (name, param, trainable)) in store.iter().enumerate() {
            if trainable {
                self.m[i] = fetch(format!("m/{name}"), param.shape())?;
                self.v[i] = fetch(format!("v/{name}"), param.shape())?;
            }
        }
        self.t = fetch("t".into(), &[1])?.data()[0] as u64;
        Ok(())
    }
}
