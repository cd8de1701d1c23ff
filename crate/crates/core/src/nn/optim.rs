use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with per-parameter step counters, so parameters added mid-training
/// start their bias correction from zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Adam {
    pub first: ParamSet,
    pub second: ParamSet,
    pub steps: BTreeMap<String, u64>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, cfg: &AdamConfig, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) {
        for (name, grad) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            if !self.first.contains(name) {
                self.first.insert(name.clone(), Tensor::zeros(p.shape()));
                self.second.insert(name.clone(), Tensor::zeros(p.shape()));
            }
            let t = self.steps.entry(name.clone()).or_insert(0);
            *t += 1;
            let bc1 = 1.0 - cfg.beta1.powi(*t as i32);
            let bc2 = 1.0 - cfg.beta2.powi(*t as i32);
            let m = self.first.get_mut(name).expect("moment exists");
            for (mv, gv) in m.data_mut().iter_mut().zip(grad.data()) {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            }
            let v = self.second.get_mut(name).expect("moment exists");
            for (vv, gv) in v.data_mut().iter_mut().zip(grad.data()) {
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            }
            let m = self.first.get(name).expect("moment exists");
            let v = self.second.get(name).expect("moment exists");
            for ((pv, mv), vv) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *pv -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
    }
}
