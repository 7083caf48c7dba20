//! Parameters, layers and the optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }
}

/// Scoped parameter builder: prefixes names and draws initial values.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Init { store, rng, prefix: String::new() }
    }

    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Init<'_>) -> R) -> R {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        let mut sub = Init { store: &mut *self.store, rng: &mut *self.rng, prefix };
        f(&mut sub)
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut *self.rng);
                z * std
            })
            .collect();
        let n = self.full_name(name);
        self.store.add(n, Tensor::from_vec(rows, cols, data))
    }

    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, lo: f64, hi: f64) -> ParamId {
        let data = (0..rows * cols).map(|_| self.rng.gen_range(lo..hi)).collect();
        let n = self.full_name(name);
        self.store.add(n, Tensor::from_vec(rows, cols, data))
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, Tensor::full(rows, cols, v))
    }
}

/// Affine map `x·W + b`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// He-style initialization for ReLU stacks.
    pub fn new(init: &mut Init<'_>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        Self::with_std(init, name, fan_in, fan_out, std)
    }

    pub fn with_std(init: &mut Init<'_>, name: &str, fan_in: usize, fan_out: usize, std: f64) -> Self {
        let w = init.normal(&format!("{name}.w"), fan_in, fan_out, std);
        let b = Some(init.constant(&format!("{name}.b"), 1, fan_out, 0.0));
        Linear { w, b, fan_in, fan_out }
    }

    pub fn zeros(init: &mut Init<'_>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self::with_std(init, name, fan_in, fan_out, 0.0)
    }

    pub fn no_bias(init: &mut Init<'_>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let std = (1.0 / fan_in.max(1) as f64).sqrt();
        let w = init.normal(&format!("{name}.w"), fan_in, fan_out, std);
        Linear { w, b: None, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(init: &mut Init<'_>, name: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(init, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Mlp { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Var {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, store, x);
            if i + 1 < n {
                x = g.relu(x);
            }
        }
        x
    }

    /// Same as [`Mlp::forward`] but with a ReLU after the last layer too.
    pub fn forward_act(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let y = self.forward(g, store, x);
        g.relu(y)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 1.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: BTreeMap<ParamId, Tensor>,
    v: BTreeMap<ParamId, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters outside `trainable` (when given) are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr_scale: f64) {
        self.step += 1;
        let t = self.step as i32;
        let mut scale = 1.0;
        if self.cfg.clip_norm > 0.0 {
            let norm: f64 = grads.iter().map(|(_, g)| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
            if norm > self.cfg.clip_norm {
                scale = self.cfg.clip_norm / norm;
            }
        }
        let lr = self.cfg.lr * lr_scale;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (id, g) in grads {
            let p = store.get_mut(*id);
            let m = self.m.entry(*id).or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let v = self.v.entry(*id).or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            for i in 0..g.len() {
                let gi = g.data()[i] * scale;
                let mi = &mut m.data_mut()[i];
                *mi = self.cfg.beta1 * *mi + (1.0 - self.cfg.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = self.cfg.beta2 * *vi + (1.0 - self.cfg.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                p.data_mut()[i] -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }
}

/// Exponential moving average of a subset of parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Ema {
    pub decay: f64,
    updates: u64,
    shadow: BTreeMap<ParamId, Tensor>,
    /// True while the averaged weights sit in the store and `shadow` holds the raw ones.
    swapped: bool,
}

impl Ema {
    pub fn new(decay: f64) -> Self {
        Ema { decay, updates: 0, shadow: BTreeMap::new(), swapped: false }
    }

    pub fn is_swapped(&self) -> bool {
        self.swapped
    }

    /// Folds the current values of `ids` into the average. Early updates use
    /// a smaller decay so the average is not dominated by the initial weights.
    pub fn update(&mut self, store: &ParamStore, ids: impl IntoIterator<Item = ParamId>) {
        assert!(!self.swapped, "EMA update while averaged weights are installed");
        self.updates += 1;
        let n = self.updates as f64;
        let d = self.decay.min((1.0 + n) / (10.0 + n));
        for id in ids {
            let p = store.get(id);
            match self.shadow.get_mut(&id) {
                Some(s) => {
                    for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
                        *a = d * *a + (1.0 - d) * b;
                    }
                }
                None => {
                    self.shadow.insert(id, p.clone());
                }
            }
        }
    }

    /// Exchanges the averaged and the raw weights.
    pub fn swap(&mut self, store: &mut ParamStore) {
        for (id, s) in self.shadow.iter_mut() {
            std::mem::swap(store.get_mut(*id), s);
        }
        self.swapped = !self.swapped;
    }
}

/// Accumulates parameter gradients over a mini-batch.
#[derive(Default)]
pub struct GradAccumulator {
    sums: BTreeMap<ParamId, Tensor>,
    count: usize,
}

impl GradAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, grads: Vec<(ParamId, Tensor)>) {
        for (id, g) in grads {
            match self.sums.get_mut(&id) {
                Some(s) => s.add_assign(&g),
                None => {
                    self.sums.insert(id, g);
                }
            }
        }
        self.count += 1;
    }

    /// Mean gradient, restricted to `keep` when provided.
    pub fn mean(self, keep: Option<&dyn Fn(ParamId) -> bool>) -> Vec<(ParamId, Tensor)> {
        let n = self.count.max(1) as f64;
        self.sums
            .into_iter()
            .filter(|(id, _)| keep.is_none_or(|k| k(*id)))
            .map(|(id, mut g)| {
                g.scale_in_place(1.0 / n);
                (id, g)
            })
            .collect()
    }
}
