use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NdArray, Real, Tensor};

/// SGD with momentum, coupled weight decay and linear learning-rate decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub learning_rate_initial: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_epochs: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate_initial: 0.01,
            momentum: 0.937,
            weight_decay: 5e-4,
            total_epochs: 100,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.learning_rate_initial <= 0.0 {
            return Err(Error::Config("learning_rate_initial must be > 0".into()));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate for `epoch`, falling linearly to zero at `total_epochs`.
pub fn lr_schedule(cfg: &SgdConfig, epoch: usize) -> Result<f64> {
    if epoch > cfg.total_epochs {
        return Err(Error::Parameter(format!(
            "epoch {epoch} outside schedule of {} epochs",
            cfg.total_epochs
        )));
    }
    Ok(cfg.learning_rate_initial * (1.0 - epoch as f64 / cfg.total_epochs as f64))
}

/// Per-parameter velocity buffers, aligned with the parameter list.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<NdArray>,
}

impl SgdState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            velocity: params.iter().map(|p| NdArray::zeros(p.shape())).collect(),
        }
    }
}

/// One optimizer step at `lr_schedule(cfg, epoch)`:
/// `v <- momentum * v + (grad + weight_decay * param)`, `param <- param - lr * v`.
/// Consumes (clears) every parameter's gradient.
pub fn sgd_step(params: &[Tensor], state: &mut SgdState, cfg: &SgdConfig, epoch: usize) -> Result<()> {
    let lr = lr_schedule(cfg, epoch)?;
    sgd_step_with_lr(params, state, cfg, lr)
}

pub fn sgd_step_with_lr(params: &[Tensor], state: &mut SgdState, cfg: &SgdConfig, lr: f64) -> Result<()> {
    if state.velocity.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer state holds {} buffers for {} parameters",
            state.velocity.len(),
            params.len()
        )));
    }
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(Error::Contract(format!("parameter {i} has no gradient")));
    }
    let (m, wd, lr) = (cfg.momentum as Real, cfg.weight_decay as Real, lr as Real);
    for (param, vel) in params.iter().zip(state.velocity.iter_mut()) {
        let grad = param.take_grad().expect("checked above");
        let mut value = param.value_mut()?;
        value.expect_same_shape(&grad)?;
        vel.expect_same_shape(&grad)?;
        for ((p, v), g) in value
            .data_mut()
            .iter_mut()
            .zip(vel.data_mut().iter_mut())
            .zip(grad.data())
        {
            *v = m * *v + (*g + wd * *p);
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// Kaiming-uniform initialization for a conv kernel `[C_out, C_in, kh, kw]`:
/// `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> NdArray {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt() as Real;
    NdArray::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..bound))
}
