//! Adam with per-tensor moment state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{GradientSet, Group, GroupMask};
use crate::model::SplitModel;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Moment state lives per parameter tensor, each with its own step
/// count, so stepping a subset of groups leaves the others untouched.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    state: [Vec<Moments>; 3],
}

impl Adam {
    pub fn new<T: Scalar>(model: &SplitModel<T>, config: AdamConfig) -> Self {
        let state = Group::ALL.map(|g| {
            model
                .params(g)
                .iter()
                .map(|p| Moments {
                    step: 0,
                    m: vec![0.0; p.tensor.len()],
                    v: vec![0.0; p.tensor.len()],
                })
                .collect()
        });
        Self { config, state }
    }

    /// Forgets moments and step counts for the masked groups.
    pub fn reset(&mut self, groups: GroupMask) {
        for g in Group::ALL.into_iter().filter(|&g| groups.contains(g)) {
            for s in &mut self.state[g.index()] {
                s.step = 0;
                s.m.iter_mut().for_each(|x| *x = 0.0);
                s.v.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    pub fn step_count(&self, group: Group, index: usize) -> u64 {
        self.state[group.index()][index].step
    }

    /// One descent step along `grads` for the masked groups.
    pub fn step<T: Scalar>(
        &mut self,
        model: &mut SplitModel<T>,
        grads: &GradientSet,
        lr: f64,
        groups: GroupMask,
    ) -> Result<()> {
        if !same_layout(model, grads) {
            return Err(Error::contract("gradient layout does not match the model"));
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        for g in Group::ALL.into_iter().filter(|&g| groups.contains(g)) {
            let flat = grads.group(g);
            let mut offset = 0;
            for (param, s) in model.params_mut(g).iter_mut().zip(&mut self.state[g.index()]) {
                let len = param.tensor.len();
                let grad = &flat[offset..offset + len];
                offset += len;
                s.step += 1;
                let bc1 = 1.0 - beta1.powi(s.step as i32);
                let bc2 = 1.0 - beta2.powi(s.step as i32);
                for (((p, &gv), m), v) in param
                    .tensor
                    .values_mut()
                    .iter_mut()
                    .zip(grad)
                    .zip(&mut s.m)
                    .zip(&mut s.v)
                {
                    *m = beta1 * *m + (1.0 - beta1) * gv;
                    *v = beta2 * *v + (1.0 - beta2) * gv * gv;
                    let update = lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    *p = T::from_f64(p.as_f64() - update);
                }
            }
        }
        Ok(())
    }
}

fn same_layout<T: Scalar>(model: &SplitModel<T>, grads: &GradientSet) -> bool {
    std::sync::Arc::ptr_eq(model.layout(), grads.layout()) || **model.layout() == **grads.layout()
}

/// Plain gradient descent `p -= lr * g` over the masked groups.
pub fn sgd_step<T: Scalar>(model: &mut SplitModel<T>, grads: &GradientSet, lr: f64, groups: GroupMask) -> Result<()> {
    if !same_layout(model, grads) {
        return Err(Error::contract("gradient layout does not match the model"));
    }
    for g in Group::ALL.into_iter().filter(|&g| groups.contains(g)) {
        let flat = grads.group(g);
        let mut offset = 0;
        for param in model.params_mut(g) {
            for p in param.tensor.values_mut() {
                *p = T::from_f64(p.as_f64() - lr * flat[offset]);
                offset += 1;
            }
        }
    }
    Ok(())
}
