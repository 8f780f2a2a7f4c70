//! Heavy-ball SGD with L2 weight decay folded into the gradient:
//! `v <- momentum * v + lr * (grad + weight_decay * w)`, `w <- w - v`.

use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0001,
            batch_size: 6,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One velocity buffer per parameter, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState<T: Scalar> {
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        SgdState {
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn from_velocity(velocity: Vec<Tensor<T>>) -> Self {
        SgdState { velocity }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    fn check(&self, params: &ParamSet<T>) -> Result<()> {
        if self.velocity.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} buffers for {} parameters",
                self.velocity.len(),
                params.len()
            )));
        }
        for (v, p) in self.velocity.iter().zip(params.iter()) {
            if v.shape() != p.shape() {
                return Err(Error::Contract(format!(
                    "velocity {} does not match parameter {} {}",
                    v.shape(),
                    p.name(),
                    p.shape()
                )));
            }
        }
        Ok(())
    }
}

pub fn sgd_step<T: Scalar>(params: &mut ParamSet<T>, state: &mut SgdState<T>, cfg: &SgdConfig) -> Result<()> {
    cfg.validate()?;
    state.check(params)?;
    let lr = T::from_f64_lossy(cfg.learning_rate);
    let mu = T::from_f64_lossy(cfg.momentum);
    let wd = T::from_f64_lossy(cfg.weight_decay);
    for (p, v) in params.iter_mut().zip(state.velocity.iter_mut()) {
        if !p.trainable {
            continue;
        }
        let (w, g) = p.value_and_grad_mut();
        for ((wi, &gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = mu * *vi + lr * (gi + wd * *wi);
            *wi -= *vi;
        }
    }
    Ok(())
}

pub fn zero_grads<T: Scalar>(params: &mut ParamSet<T>) {
    for p in params.iter_mut() {
        p.grad_mut().fill(T::zero());
    }
}
