use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clip applied before every step.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
}

/// Adam with bias correction. One instance owns the moment state for one
/// [`ParamSet`]; tensors are matched by registration order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    moments: Vec<Moments>,
    /// Names of tensors whose update was skipped due to non-finite gradients.
    pub skipped: Vec<String>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        let moments = params
            .iter()
            .map(|(_, t)| Moments {
                m: Tensor::zeros(t.shape()),
                v: Tensor::zeros(t.shape()),
            })
            .collect();
        Adam {
            cfg,
            step: 0,
            moments,
            skipped: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters; `grads` in registration order.
    pub fn step(&mut self, params: &mut ParamSet, grads: &mut [Tensor]) {
        assert_eq!(grads.len(), self.moments.len());
        if let Some(max_norm) = self.cfg.clip_norm {
            clip_global_norm(grads, max_norm);
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for (idx, id) in params.ids().enumerate().map(|(i, id)| (i, id)).collect::<Vec<_>>() {
            let grad = &grads[idx];
            if !grad.all_finite() {
                self.skipped.push(params.name(id).to_string());
                continue;
            }
            let mom = &mut self.moments[idx];
            let p = params.get_mut(id);
            for i in 0..p.numel() {
                let g = grad.data()[i];
                let m = self.cfg.beta1 * mom.m.data()[i] + (1.0 - self.cfg.beta1) * g;
                let v = self.cfg.beta2 * mom.v.data()[i] + (1.0 - self.cfg.beta2) * g * g;
                mom.m.data_mut()[i] = m;
                mom.v.data_mut()[i] = v;
                let mhat = m / bc1;
                let vhat = v / bc2;
                p.data_mut()[i] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }
}

/// Scale all gradients so their joint L2 norm does not exceed `max_norm`.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) {
    let total: f64 = grads.iter().map(Tensor::frobenius_sq).sum::<f64>().sqrt();
    if total > max_norm && total.is_finite() {
        let scale = max_norm / total;
        for g in grads {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
}
