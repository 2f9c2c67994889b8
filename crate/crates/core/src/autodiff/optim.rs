use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A named parameter tensor with its momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub velocity: Vec<f64>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let velocity = vec![0.0; value.numel()];
        Self {
            name: name.into(),
            value: value.with_requires_grad(true),
            velocity,
        }
    }
}

/// Parameters that are optimized and gradient-masked together
/// (`encoder-k`, `fusion`, `classifier`).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<Parameter>,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            params: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.params.push(Parameter::new(name, value));
        self.params.len() - 1
    }

    pub(crate) fn accumulate(&mut self, index: usize, delta: &[f64]) -> Result<()> {
        let p = self.params.get_mut(index).ok_or_else(|| {
            Error::usage(format!("group {} has no parameter {index}", self.name))
        })?;
        p.value.accumulate_grad(delta);
        Ok(())
    }

    /// Squared L2 norm of every gradient in the group.
    pub fn grad_sq_norm(&self) -> f64 {
        self.params.iter().map(|p| p.value.grad_sq_norm()).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad_sq_norm().sqrt()
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.clear_grad());
    }
}

/// Sets every gradient buffer of `group` to exactly zero. Values and momentum
/// buffers are untouched.
pub fn zero_grad_group(group: &mut ParamGroup) {
    group.params.iter_mut().for_each(|p| p.value.zero_grad());
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Heavy-ball SGD with coupled weight decay:
/// `v <- momentum * v + (grad + wd * param)`, `param <- param - lr * v`.
///
/// Tensors that received no gradient since the last step (no buffer) are
/// skipped entirely, weight decay included. All gradients are cleared afterwards.
pub fn sgd_step(groups: &mut [ParamGroup], opt: &Sgd) -> Result<()> {
    opt.validate()?;
    for group in groups.iter_mut() {
        for p in &mut group.params {
            let Some(grad) = p.value.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let data = p.value.data_mut();
            for ((w, v), g) in data.iter_mut().zip(&mut p.velocity).zip(&grad) {
                let d = g + opt.weight_decay * *w;
                *v = opt.momentum * *v + d;
                *w -= opt.lr * *v;
            }
            p.value.clear_grad();
        }
    }
    Ok(())
}
