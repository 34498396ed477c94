//! Small differentiable numeric core: tape-based reverse mode over dense
//! matrices, a parameter store, Adam with linear decay and a
//! finite-difference gradient checker.

mod checkpoint;
mod gradcheck;
mod graph;
pub mod ops;
mod params;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, rel_err, GradCheckReport, REL_ERR_FLOOR};
pub use graph::{log_sum_exp, softmax_in_place, Graph, Var};
pub use params::{adam_step, sgd_step, AdamConfig, Grads, Init, ParamId, ParamStore, Params};
pub use tensor::{dot, Tensor};

use serde::{Deserialize, Serialize};

/// Optimisation schedule for a supervised training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
}

impl TrainConfig {
    /// Adam schedule decaying to zero over all steps for `n` samples.
    pub fn adam(&self, n: usize) -> AdamConfig {
        let per_epoch = n.div_ceil(self.batch.max(1));
        AdamConfig::new(self.lr, per_epoch * self.epochs)
    }
}

/// Fully connected layer `x · W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool) -> Self {
        let weight = store.add(format!("{name}.w"), input, output, Init::FanIn);
        let bias = bias.then(|| store.add(format!("{name}.b"), 1, output, Init::Zeros));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), 1, dim, Init::Ones),
            beta: store.add(format!("{name}.beta"), 1, dim, Init::Zeros),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[cfg(test)]
mod graph_tests;
