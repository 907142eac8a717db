//! SGD with momentum and weight decay, plus the cosine learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::graph::{Gradients, ParamStore};
use super::tensor::{Scalar, Tensor};

/// Per-parameter velocity buffers and a step counter.
#[derive(Clone, Debug, Default)]
pub struct OptimState<T: Scalar> {
    velocity: BTreeMap<String, Tensor<T>>,
    step: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new() -> Self {
        OptimState {
            velocity: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor<T>> {
        self.velocity.get(name)
    }

    pub fn velocity_entries(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.velocity.iter()
    }

    pub fn restore(velocity: BTreeMap<String, Tensor<T>>, step: u64) -> Self {
        OptimState { velocity, step }
    }
}

/// One SGD step over the parameters that received gradients:
/// `v <- momentum*v + grad + weight_decay*theta; theta <- theta - lr*v`.
pub fn sgd_update<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut OptimState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    sgd_update_grouped(params, grads, state, |_| lr, momentum, weight_decay)
}

/// Same update with a per-parameter learning rate (used by fine-tuning where
/// the backbone and the classification head run at different rates).
pub fn sgd_update_grouped<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut OptimState<T>,
    lr_for: impl Fn(&str) -> f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let m = T::from_f64(momentum);
    let wd = T::from_f64(weight_decay);

    for (name, grad) in grads.iter() {
        let lr = lr_for(name);
        if lr < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "negative learning rate {lr} for `{name}`"
            )));
        }
        if !grad.all_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
        let theta = params.get_mut(name)?;
        if theta.shape() != grad.shape() {
            return Err(Error::shape(
                format!("sgd_update `{name}`"),
                format!("param {:?} vs grad {:?}", theta.shape(), grad.shape()),
            ));
        }
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        if v.shape() != grad.shape() {
            return Err(Error::shape(
                format!("sgd_update `{name}`"),
                format!("velocity {:?} vs grad {:?}", v.shape(), grad.shape()),
            ));
        }
        let lr_t = T::from_f64(lr);
        for ((vi, &gi), ti) in v
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(theta.data_mut().iter_mut())
        {
            *vi = m * *vi + gi + wd * *ti;
            *ti -= lr_t * *vi;
        }
    }
    state.step += 1;
    Ok(())
}

/// Half-cosine decay: `base_lr * 0.5 * (1 + cos(pi * step / total))`,
/// reaching exactly zero at `step == total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidArgument("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} exceeds total_steps {total_steps}"
        )));
    }
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos()))
}
