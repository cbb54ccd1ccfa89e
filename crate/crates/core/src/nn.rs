//! Named parameter storage and the few layer types the networks are built
//! from. Layers hold indices into a [`ParamStore`]; a forward pass binds the
//! whole store into a [`Graph`] once and hands the layers the resulting vars.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{FurnError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> usize {
        let name = name.into();
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry {
            name,
            tensor,
            trainable,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.entries[idx].tensor
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].tensor
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].name
    }

    pub fn is_trainable(&self, idx: usize) -> bool {
        self.entries[idx].trainable
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor, e.trainable))
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.len()).sum()
    }

    /// Binds every tensor into `g`. Trainable entries become gradient-tracking
    /// leaves only when `train` is set; buffers are always constants.
    pub fn bind(&self, g: &mut Graph, train: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| g.leaf(e.tensor.clone(), train && e.trainable))
            .collect()
    }

    /// Hex SHA-256 over names, shapes and values, in insertion order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            e.tensor.digest_into(&mut h);
        }
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.all_finite())
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        self.entries.iter().map(|e| (e.name.clone(), e.tensor.clone())).collect()
    }

    /// Replaces every tensor with the same-named entry of `source`, after
    /// validating that all names exist and all shapes agree.
    pub fn load(&mut self, source: &BTreeMap<String, Tensor>) -> Result<()> {
        for e in &self.entries {
            let t = source
                .get(&e.name)
                .ok_or_else(|| FurnError::Io(format!("missing tensor `{}`", e.name)))?;
            if t.shape() != e.tensor.shape() {
                return Err(FurnError::ShapeMismatch(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    e.name,
                    t.shape(),
                    e.tensor.shape()
                )));
            }
        }
        for e in &mut self.entries {
            e.tensor = source[&e.name].clone();
        }
        Ok(())
    }

    /// Marks every entry as a constant.
    pub fn freeze(&mut self) {
        for e in &mut self.entries {
            e.trainable = false;
        }
    }

    pub fn zero_weights(&mut self) {
        for e in self.entries.iter_mut().filter(|e| e.trainable) {
            e.tensor.data_mut().fill(0.0);
        }
    }
}

/// Seeded weight initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// He-normal with the leaky-rectifier gain, multiplied by `scale`.
    pub fn he_normal(&mut self, shape: &[usize], slope: f64, scale: f64) -> Tensor {
        let fan_in: usize = shape[1..].iter().product();
        let std = (2.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt() * scale;
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.sample::<f64, _>(StandardNormal) * std)
            .collect();
        Tensor::new_unchecked(shape.to_vec(), data)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: usize,
    pub bias: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    /// "Same"-padded square convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        scale: f64,
    ) -> Self {
        let w = init.he_normal(&[out_ch, in_ch, kernel, kernel], LEAKY_SLOPE, scale);
        let weight = store.add(format!("{name}.weight"), w, true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]), true);
        Conv {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        g.conv2d(x, p[self.weight], Some(p[self.bias]), self.stride, self.kernel / 2)
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + self.out_ch
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: usize,
    pub bias: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = init.he_normal(&[out_dim, in_dim], LEAKY_SLOPE, 1.0);
        let weight = store.add(format!("{name}.weight"), w, true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), true);
        Dense {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        g.linear(x, p[self.weight], p[self.bias])
    }
}

/// Running-statistics update produced by a training-mode [`Norm`].
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean_idx: usize,
    pub var_idx: usize,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub count: usize,
}

impl StatUpdate {
    pub fn apply(&self, store: &mut ParamStore) {
        let unbias = if self.count > 1 {
            self.count as f64 / (self.count - 1) as f64
        } else {
            1.0
        };
        for (r, b) in store.get_mut(self.mean_idx).data_mut().iter_mut().zip(&self.batch_mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in store.get_mut(self.var_idx).data_mut().iter_mut().zip(&self.batch_var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * unbias;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Norm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[channels], 1.0), false),
        }
    }

    /// Batch statistics when `stats` is given (training), running estimates
    /// otherwise.
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var, stats: Option<&mut Vec<StatUpdate>>) -> Var {
        match stats {
            Some(updates) => {
                let s = g.shape(x);
                let count = s[0] * s[2] * s[3];
                let out = g.batch_norm(x, p[self.gamma], p[self.beta], None, BN_EPS);
                updates.push(StatUpdate {
                    mean_idx: self.running_mean,
                    var_idx: self.running_var,
                    batch_mean: out.mean,
                    batch_var: out.var,
                    count,
                });
                out.out
            }
            None => {
                let mean = g.value(p[self.running_mean]).data().to_vec();
                let var = g.value(p[self.running_var]).data().to_vec();
                g.batch_norm(x, p[self.gamma], p[self.beta], Some((&mean, &var)), BN_EPS).out
            }
        }
    }
}
