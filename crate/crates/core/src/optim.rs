//! SGD with momentum, LARS trust-ratio scaling and the cosine schedule.

use crate::config::OptimizerMode;
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const LARS_EPS: f64 = 1e-9;

/// `base_lr · ½(1 + cos(π · step / total_steps))`
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::Contract(format!(
            "schedule step {step} outside [0, {total_steps}]"
        )));
    }
    let progress = step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

fn check_shapes(param: &[f64], grad: &[f64], buf: &[f64]) -> Result<()> {
    if param.len() != grad.len() || param.len() != buf.len() {
        return Err(Error::Contract(format!(
            "update shapes disagree: param {}, grad {}, buffer {}",
            param.len(),
            grad.len(),
            buf.len()
        )));
    }
    Ok(())
}

/// `g' = grad + wd·param; buf = momentum·buf + g'; param -= lr·buf`
pub fn sgd_step(
    param: &mut [f64],
    grad: &[f64],
    buf: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    check_shapes(param, grad, buf)?;
    if lr < 0.0 {
        return Err(Error::Contract(format!("negative learning rate {lr}")));
    }
    for ((p, &g), b) in param.iter_mut().zip(grad).zip(buf.iter_mut()) {
        let gd = g + weight_decay * *p;
        *b = momentum * *b + gd;
        *p -= lr * *b;
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖p‖ / (‖g‖ + wd·‖p‖ + eps)`, or 1 for a zero parameter.
pub fn lars_trust(param: &[f64], grad: &[f64], weight_decay: f64, eps: f64) -> f64 {
    let pn = norm(param);
    if pn > 0.0 {
        pn / (norm(grad) + weight_decay * pn + eps)
    } else {
        1.0
    }
}

/// SGD step at the layer-local rate `lr · trust`.
pub fn lars_step(
    param: &mut [f64],
    grad: &[f64],
    buf: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    eps: f64,
) -> Result<f64> {
    check_shapes(param, grad, buf)?;
    if eps <= 0.0 {
        return Err(Error::Contract(format!("LARS eps must be > 0, got {eps}")));
    }
    let trust = lars_trust(param, grad, weight_decay, eps);
    sgd_step(param, grad, buf, lr * trust, momentum, weight_decay)?;
    Ok(trust)
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub mode: OptimizerMode,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, mode: OptimizerMode, base_lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr must be > 0, got {base_lr}")));
        }
        Ok(OptimizerState {
            mode,
            base_lr,
            momentum,
            weight_decay,
            buffers: params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
        })
    }

    /// Applies one update to every parameter. Rank-1 tensors (biases) skip
    /// LARS trust scaling.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.buffers.len() != params.len() {
            return Err(Error::Contract("gradient list does not match parameters".into()));
        }
        for ((t, g), buf) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.buffers) {
            let rank1 = t.shape().len() == 1;
            match self.mode {
                OptimizerMode::Lars if !rank1 => {
                    lars_step(t.data_mut(), g, buf, lr, self.momentum, self.weight_decay, LARS_EPS)?;
                }
                _ => sgd_step(t.data_mut(), g, buf, lr, self.momentum, self.weight_decay)?,
            }
        }
        Ok(())
    }
}
