use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Tensor;

/// Plain gradient descent: `values ← values − lr · grad`, then zero the gradients.
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut Tensor>, learning_rate: f32) -> Result<()> {
    if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
        return Err(Error::contract(format!("learning rate {learning_rate} must be finite and non-negative")));
    }
    let params: Vec<&mut Tensor> = params.into_iter().collect();
    if params.iter().any(|p| p.grad().is_none()) {
        return Err(Error::contract("sgd_step on a parameter without a gradient"));
    }
    for p in params {
        let g = p.grad().expect("checked above").to_vec();
        for (v, d) in p.values_mut().iter_mut().zip(&g) {
            *v -= learning_rate * d;
        }
        p.zero_grad();
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: i32,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, learning_rate: f32) -> Result<()> {
        if params.tensors_mut().any(|p| p.grad().is_none()) {
            return Err(Error::contract("adam step on a parameter without a gradient"));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for ((p, m), s) in params.tensors_mut().zip(&mut self.first).zip(&mut self.second) {
            let g = p.grad().expect("checked above").to_vec();
            for (j, v) in p.values_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                s[j] = self.beta2 * s[j] + (1.0 - self.beta2) * g[j] * g[j];
                *v -= learning_rate * (m[j] / c1) / ((s[j] / c2).sqrt() + self.eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// Either optimizer behind one interface.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd,
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParamStore) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(params)),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, learning_rate: f32) -> Result<()> {
        match self {
            Optimizer::Sgd => sgd_step(params.tensors_mut(), learning_rate),
            Optimizer::Adam(adam) => adam.step(params, learning_rate),
        }
    }
}
