//! Adam with L2 weight decay and a multi-step learning-rate schedule.

use crate::error::{Error, Result};
use crate::nn::Module;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Per-tensor first and second moments, in the module's visit order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub weight_decay: f64,
    pub decoupled: bool,
    pub step: u64,
    pub names: Vec<String>,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<M: Module>(module: &M, weight_decay: f64, decoupled: bool) -> Self {
        let mut names = Vec::new();
        let mut first = Vec::new();
        module.visit("", &mut |n, p| {
            names.push(n.to_string());
            first.push(vec![0.0; p.len()]);
        });
        let second = first.clone();
        Adam {
            weight_decay,
            decoupled,
            step: 0,
            names,
            first,
            second,
        }
    }

    /// Applies one update from the gradients accumulated in each tensor,
    /// multiplied by `grad_scale` (e.g. `1/batch`). Tensors with gradients
    /// disabled are left alone.
    pub fn update<M: Module>(&mut self, module: &mut M, lr: f64, grad_scale: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let (wd, decoupled) = (self.weight_decay, self.decoupled);
        let mut k = 0;
        let mut mismatch = None;
        module.visit_mut("", &mut |name, p| {
            let idx = k;
            k += 1;
            if mismatch.is_some() {
                return;
            }
            if self.names.get(idx).map(String::as_str) != Some(name) || self.first[idx].len() != p.len() {
                mismatch = Some(name.to_string());
                return;
            }
            if !p.requires_grad() {
                return;
            }
            let (m, v) = (&mut self.first[idx], &mut self.second[idx]);
            let grads: Vec<f64> = p.grad().to_vec();
            let w = p.values_mut();
            for i in 0..w.len() {
                let mut g = grads[i] * grad_scale;
                if !decoupled {
                    g += wd * w[i];
                }
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
                if decoupled {
                    w[i] -= lr * wd * w[i];
                }
            }
        });
        if let Some(name) = mismatch.or_else(|| (k != self.names.len()).then(|| "<count>".to_string())) {
            return Err(Error::Precondition(format!(
                "optimizer state does not match model tensor `{name}`"
            )));
        }
        Ok(())
    }
}

/// Learning rate multiplied by `gamma` once each milestone epoch has passed.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiStepLr {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl MultiStepLr {
    /// Rate for 1-based `epoch`.
    pub fn lr(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch > m).count();
        self.base * self.gamma.powi(passed as i32)
    }
}
