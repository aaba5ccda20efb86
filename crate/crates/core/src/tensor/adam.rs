//! Adam with bias correction; state per parameter tensor.

use alloc::vec;
use alloc::vec::Vec;

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct AdamCfg {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamCfg {
    fn default() -> Self {
        AdamCfg { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state; the parameter list order must stay fixed across steps.
pub struct Adam<R: Real> {
    cfg: AdamCfg,
    m: Vec<Vec<R>>,
    v: Vec<Vec<R>>,
    t: u32,
}

impl<R: Real> Adam<R> {
    pub fn new(cfg: AdamCfg, param_sizes: &[usize]) -> Self {
        Adam {
            cfg,
            m: param_sizes.iter().map(|&s| vec![R::zero(); s]).collect(),
            v: param_sizes.iter().map(|&s| vec![R::zero(); s]).collect(),
            t: 0,
        }
    }

    /// One update over all parameters given matching gradients.
    pub fn step(&mut self, params: &mut [&mut Tensor<R>], grads: &[Tensor<R>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Invalid("adam parameter/gradient count mismatch".into()));
        }
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let alpha =
            self.cfg.lr * (1.0 - b2.powi(self.t as i32)).sqrt() / (1.0 - b1.powi(self.t as i32));
        let b1 = R::from_f64_lossy(b1);
        let b2 = R::from_f64_lossy(b2);
        let one_m_b1 = R::one() - b1;
        let one_m_b2 = R::one() - b2;
        let alpha = R::from_f64_lossy(alpha);
        let eps = R::from_f64_lossy(self.cfg.eps);

        for ((param, grad), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if param.numel() != m.len() || grad.numel() != m.len() {
                return Err(Error::Invalid("adam parameter size changed between steps".into()));
            }
            let p = param.data_mut();
            for i in 0..m.len() {
                let g = grad.data()[i];
                m[i] = b1 * m[i] + one_m_b1 * g;
                v[i] = b2 * v[i] + one_m_b2 * g * g;
                p[i] = p[i] - alpha * m[i] / (v[i].sqrt() + eps);
            }
        }
        Ok(())
    }
}
