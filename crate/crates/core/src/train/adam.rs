use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segnet::ModelParams;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient; `λθ` is added to the gradient before the moment update.
    pub l2_lambda: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, l2_lambda: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2_lambda,
        }
    }
}

/// One Adam update of a flat buffer at step `t` (1-based).
pub fn adam_step<T: Scalar>(param: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], t: u64, cfg: &AdamConfig) {
    assert!(t >= 1, "Adam steps are 1-based");
    assert!(param.len() == grad.len() && m.len() == grad.len() && v.len() == grad.len());
    let c = |x: f64| T::from_f64_lossy(x);
    let (b1, b2) = (c(cfg.beta1), c(cfg.beta2));
    let (one_b1, one_b2) = (c(1.0 - cfg.beta1), c(1.0 - cfg.beta2));
    let bc1 = c(1.0 - cfg.beta1.powi(t as i32));
    let bc2 = c(1.0 - cfg.beta2.powi(t as i32));
    let (lr, eps, lambda) = (c(cfg.lr), c(cfg.eps), c(cfg.l2_lambda));
    for i in 0..param.len() {
        let g = grad[i] + lambda * param[i];
        m[i] = b1 * m[i] + one_b1 * g;
        v[i] = b2 * v[i] + one_b2 * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Adam moments for every tensor of a parameter registry.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ModelParams<T>, cfg: AdamConfig) -> Self {
        let zeros = || params.entries().iter().map(|e| vec![T::zero(); e.tensor.numel()]).collect();
        Adam {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// `grads` is aligned with the registry order.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Config(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        self.t += 1;
        for (i, (p, g)) in params.tensors_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
            adam_step(p.data_mut(), g.data(), &mut self.m[i], &mut self.v[i], self.t, &self.cfg);
        }
        Ok(())
    }
}
