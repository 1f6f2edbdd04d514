//! Adam with bias correction.

use crate::error::{arg_err, shape_err, Result};
use crate::params::Params;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    config: AdamConfig,
    step: u64,
    m: Params<T>,
    v: Params<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, params: &Params<T>) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn from_parts(config: AdamConfig, step: u64, m: Params<T>, v: Params<T>) -> Self {
        Self { config, step, m, v }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &Params<T> {
        &self.m
    }

    pub fn second_moment(&self) -> &Params<T> {
        &self.v
    }

    /// One update. `grads` may cover a subset of `params` (frozen entries
    /// are simply absent); every gradient must name an existing parameter of
    /// the same shape.
    pub fn step_params(&mut self, params: &mut Params<T>, grads: &Params<T>) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params
                .get(name)
                .ok_or_else(|| arg_err("adam_step", format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(shape_err(
                    "adam_step",
                    format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            if !self.m.contains(name) {
                self.m.insert(name, p.map(|_| T::zero()));
                self.v.insert(name, p.map(|_| T::zero()));
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let bc1 = T::c(1.0 - c.beta1.powi(t));
        let bc2 = T::c(1.0 - c.beta2.powi(t));
        let (lr, eps) = (T::c(c.lr), T::c(c.eps));
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).expect("checked above");
            let m = self.m.get_mut(name).expect("moment");
            let v = self.v.get_mut(name).expect("moment");
            for (((pe, &ge), me), ve) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *me = b1 * *me + (T::one() - b1) * ge;
                *ve = b2 * *ve + (T::one() - b2) * ge * ge;
                let mhat = *me / bc1;
                let vhat = *ve / bc2;
                *pe -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
