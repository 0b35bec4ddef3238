//! SGD with classical (heavy-ball) momentum and a step learning-rate schedule.
//!
//! Update per parameter: `v ← μ·v + g`, then `θ ← θ − η·v`. Optional weight
//! decay is decoupled: `θ ← θ − η·v − η·wd·θ`.

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub base_lr: T,
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    /// `(epoch, multiplier)`: from `epoch` on, the rate is scaled by `multiplier`.
    pub schedule: Vec<(u32, T)>,
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(store: &ParamStore<T>, lr: T, momentum: T) -> Result<Self> {
        if !(lr > T::zero()) || !lr.is_finite() {
            return Err(Error::Config {
                key: "lr".into(),
                msg: format!("must be > 0, got {lr}"),
            });
        }
        if !(momentum >= T::zero() && momentum < T::one()) {
            return Err(Error::Config {
                key: "momentum".into(),
                msg: format!("must lie in [0, 1), got {momentum}"),
            });
        }
        Ok(OptimState {
            base_lr: lr,
            lr,
            momentum,
            weight_decay: T::zero(),
            schedule: Vec::new(),
            velocity: store.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        })
    }

    pub fn with_weight_decay(mut self, weight_decay: T) -> Result<Self> {
        if !(weight_decay >= T::zero()) {
            return Err(Error::Config {
                key: "weight_decay".into(),
                msg: format!("must be >= 0, got {weight_decay}"),
            });
        }
        self.weight_decay = weight_decay;
        Ok(self)
    }

    pub fn with_schedule(mut self, schedule: Vec<(u32, T)>) -> Result<Self> {
        if let Some(&(e, m)) = schedule.iter().find(|(_, m)| !(*m > T::zero())) {
            return Err(Error::Config {
                key: "lr_step_factor".into(),
                msg: format!("multiplier at epoch {e} must be > 0, got {m}"),
            });
        }
        self.schedule = schedule;
        Ok(self)
    }
}

/// `lr = base_lr × Π{multiplier : step_epoch ≤ epoch}`.
pub fn apply_schedule<T: Scalar>(state: &mut OptimState<T>, epoch: u32) {
    state.lr = state
        .schedule
        .iter()
        .filter(|(e, _)| *e <= epoch)
        .fold(state.base_lr, |lr, &(_, m)| lr * m);
}

/// One momentum step over every trainable parameter, then zeroes all grads.
pub fn sgd_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut OptimState<T>) -> Result<()> {
    if state.velocity.len() != store.len() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} velocities for {} parameters",
            state.velocity.len(),
            store.len()
        )));
    }
    let (lr, mu, wd) = (state.lr, state.momentum, state.weight_decay);
    for (p, v) in store.iter_mut().zip(state.velocity.iter_mut()) {
        if v.shape() != p.value.shape() {
            return Err(Error::Contract(format!(
                "velocity shape {:?} does not match parameter `{}` {:?}",
                v.shape(),
                p.name,
                p.value.shape()
            )));
        }
        if p.trainable {
            for ((vel, theta), &g) in v
                .data_mut()
                .iter_mut()
                .zip(p.value.data_mut().iter_mut())
                .zip(p.grad.data())
            {
                *vel = mu * *vel + g;
                let decay = if wd > T::zero() { lr * wd * *theta } else { T::zero() };
                *theta = *theta - lr * *vel - decay;
            }
        }
        p.grad.fill(T::zero());
    }
    Ok(())
}
