use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a freshly registered parameter is filled.
#[derive(Clone, Debug)]
pub enum Init {
    /// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), fan_in = rows.
    FanIn,
    Uniform(f64),
    Zeros,
    Ones,
    Value(Tensor),
}

/// Parameter values, addressable by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl Params {
    #[inline]
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn count_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Gradient buffers, one per parameter and of the same shape.
#[derive(Clone, Debug, Default)]
pub struct Grads {
    buffers: Vec<Tensor>,
}

impl Grads {
    #[inline]
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.buffers[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.buffers[id.0]
    }

    pub fn zero(&mut self) {
        for b in &mut self.buffers {
            b.fill(0.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in &mut self.buffers {
            b.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.buffers
            .iter()
            .flat_map(|b| b.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// Named parameters with paired gradient buffers and Adam moments.
///
/// `params` and `grads` are separate fields so a [`super::Graph`] can borrow
/// the values while backward accumulates into the gradients.
#[derive(Clone, Debug)]
pub struct ParamStore {
    pub params: Params,
    pub grads: Grads,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: Params::default(),
            grads: Grads::default(),
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> ParamId {
        let name = name.into();
        assert!(
            self.params.find(&name).is_none(),
            "duplicate parameter name `{name}`"
        );
        let value = match init {
            Init::FanIn => {
                let bound = 1.0 / (rows.max(1) as f64).sqrt();
                self.uniform(rows, cols, bound)
            }
            Init::Uniform(bound) => self.uniform(rows, cols, bound),
            Init::Zeros => Tensor::zeros(rows, cols),
            Init::Ones => Tensor::from_vec(rows, cols, vec![1.0; rows * cols]),
            Init::Value(t) => {
                assert_eq!(t.shape(), (rows, cols), "init value shape for `{name}`");
                t
            }
        };
        let id = ParamId(self.params.values.len());
        self.params.names.push(name);
        self.params.values.push(value);
        self.grads.buffers.push(Tensor::zeros(rows, cols));
        self.first_moment.push(Tensor::zeros(rows, cols));
        self.second_moment.push(Tensor::zeros(rows, cols));
        id
    }

    fn uniform(&mut self, rows: usize, cols: usize, bound: f64) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| self.rng.gen_range(-bound..=bound))
            .collect();
        Tensor::from_vec(rows, cols, data)
    }

    pub fn zero_grads(&mut self) {
        self.grads.zero();
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        self.params.get(id)
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        self.params.get_mut(id)
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        self.grads.get(id)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.names.iter().map(String::as_str)
    }

    /// Resets the Adam moment estimates (used when a new training run starts).
    pub fn reset_optimizer(&mut self) {
        for m in self.first_moment.iter_mut().chain(self.second_moment.iter_mut()) {
            m.fill(0.0);
        }
    }
}

/// Adam with linear learning-rate decay to zero over `total_steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr0: f64,
    pub total_steps: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn new(lr0: f64, total_steps: usize) -> Self {
        AdamConfig {
            lr0,
            total_steps,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return 0.0;
        }
        self.lr0 * (1.0 - step as f64 / self.total_steps as f64).max(0.0)
    }
}

/// One Adam update at (0-based) step `step` using the store's gradient buffers.
///
/// Gradients are checked for finiteness before any parameter is touched.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig, step: usize) -> Result<()> {
    for id in store.params.ids() {
        if !store.grads.get(id).is_finite() {
            return Err(Error::NonFiniteGradient(store.params.name(id).to_string()));
        }
    }
    let lr = cfg.lr_at(step);
    let t = (step + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..store.params.values.len() {
        let g = store.grads.buffers[i].data();
        let m = store.first_moment[i].data_mut();
        let v = store.second_moment[i].data_mut();
        let w = store.params.values[i].data_mut();
        for k in 0..g.len() {
            let gk = g[k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            if lr == 0.0 {
                continue;
            }
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            w[k] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Plain gradient descent on the store's gradient buffers.
pub fn sgd_step(store: &mut ParamStore, lr: f64) -> Result<()> {
    for id in store.params.ids() {
        if !store.grads.get(id).is_finite() {
            return Err(Error::NonFiniteGradient(store.params.name(id).to_string()));
        }
    }
    for i in 0..store.params.values.len() {
        let g = store.grads.buffers[i].data();
        let w = store.params.values[i].data_mut();
        for (wk, gk) in w.iter_mut().zip(g) {
            *wk -= lr * gk;
        }
    }
    Ok(())
}
