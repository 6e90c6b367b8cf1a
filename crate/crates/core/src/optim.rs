//! Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        AdamConfig { lr, beta1, beta2, eps: 1e-8, weight_decay }
    }
}

/// Optimizer state for one module. Moments follow the module's parameter
/// visiting order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Float> Adam<F> {
    pub fn new<M: Module<F> + ?Sized>(config: AdamConfig, module: &M) -> Self {
        let mut m = Vec::new();
        module.visit("", &mut |_, p| m.push(Tensor::zeros(p.value.shape())));
        let v = m.clone();
        Adam { config, step: 0, m, v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients:
    /// `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
    pub fn step<M: Module<F> + ?Sized>(&mut self, module: &mut M) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let (one_b1, one_b2) = (F::lit(1.0 - c.beta1), F::lit(1.0 - c.beta2));
        let step_size = F::lit(c.lr / bc1);
        let inv_sqrt_bc2 = F::lit(1.0 / bc2.sqrt());
        let eps = F::lit(c.eps);
        let decay = F::lit(1.0 - c.lr * c.weight_decay);
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        module.visit_mut("", &mut |_, p| {
            let (m, v) = (ms[i].data_mut(), vs[i].data_mut());
            for (((x, &g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *x = *x * decay - step_size * *m / ((*v).sqrt() * inv_sqrt_bc2 + eps);
            }
            i += 1;
        });
    }

    /// Moments as `(m, v)` pairs in visiting order.
    pub fn moments(&self) -> impl Iterator<Item = (&Tensor<F>, &Tensor<F>)> {
        self.m.iter().zip(&self.v)
    }

    /// Restores a saved state; shapes must match the current moments.
    pub fn restore(&mut self, step: u64, moments: Vec<(Tensor<F>, Tensor<F>)>) -> Result<()> {
        if moments.len() != self.m.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state holds {} tensors, expected {}",
                moments.len(),
                self.m.len()
            )));
        }
        for (i, (m, v)) in moments.iter().enumerate() {
            if m.shape() != self.m[i].shape() || v.shape() != self.v[i].shape() {
                return Err(Error::Checkpoint(format!("optimizer moment {i} has the wrong shape")));
            }
        }
        self.step = step;
        (self.m, self.v) = moments.into_iter().unzip();
        Ok(())
    }
}
