//! AdamW with decoupled weight decay.
//!
//! Update per parameter: `w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + wd * w)`
//! with bias-corrected moment estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig { lr, weight_decay, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig::new(1e-4, 0.01)
    }
}

/// Optimizer state: first/second moments per parameter tensor plus the step
/// counter.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, param_shapes: &[Vec<usize>]) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: param_shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: param_shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
        }
    }

    pub fn for_params(cfg: AdamWConfig, params: &[&Tensor]) -> Self {
        let shapes: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();
        AdamW::new(cfg, &shapes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advance one step. `params` and `grads` must align with the shapes the
    /// optimizer was built from.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::config(format!(
                "optimizer built for {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let AdamWConfig { lr, weight_decay, beta1, beta2, epsilon } = self.cfg;
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::shape(
                    None,
                    format!("optimizer shapes: param {:?} vs grad {:?} vs state {:?}", p.shape(), g.shape(), m.shape()),
                ));
            }
            let pd = p.data_mut();
            let gd = g.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * gd[i];
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gd[i] * gd[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= lr * (m_hat / (v_hat.sqrt() + epsilon) + weight_decay * pd[i]);
            }
        }
        Ok(())
    }
}
