//! Training objectives. Every loss returns its value together with the
//! gradient with respect to its differentiable input(s); values are summed over
//! spatial positions and averaged over the batch.

use crate::error::{Error, Result};
use crate::nets::FeaturePyramid;
use crate::tensor::{Float, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_seg: f64,
    pub lambda_adv: f64,
    pub lambda_per: f64,
    /// Probabilities are clamped to `[eps, 1]` before taking logs.
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_seg: 100.0, lambda_adv: 0.01, lambda_per: 0.06, eps: 1e-7 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("lambda_seg", self.lambda_seg), ("lambda_adv", self.lambda_adv), ("lambda_per", self.lambda_per)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss.{key} must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.eps > 0.0 && self.eps <= 1e-3) {
            return Err(Error::Config(format!("loss.eps must lie in (0, 1e-3], got {}", self.eps)));
        }
        Ok(())
    }
}

/// Loss components of one training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub seg: f64,
    pub adv_gen: f64,
    pub per: f64,
    pub disc: f64,
    pub total: f64,
}

impl LossRecord {
    pub fn is_finite(&self) -> bool {
        [self.seg, self.adv_gen, self.per, self.disc, self.total].iter().all(|v| v.is_finite())
    }
}

/// A scalar loss and the gradient with respect to its input.
#[derive(Clone, Debug)]
pub struct Loss<F> {
    pub value: f64,
    pub grad: Tensor<F>,
}

fn guard<F: Float>(what: &str, t: &Tensor<F>) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn check_batch<F: Float>(what: &str, t: &Tensor<F>) -> Result<()> {
    if t.batch() == 0 {
        return Err(Error::Shape(format!("{what} has an empty batch")));
    }
    Ok(())
}

/// `-log(clamp(p, eps, 1))` and its derivative in `p` (zero where clamped).
fn neg_log<F: Float>(p: F, eps: f64) -> (f64, F) {
    let pf = p.to_f64().unwrap_or(f64::NAN);
    if pf < eps {
        (-eps.ln(), F::zero())
    } else if pf > 1.0 {
        (0.0, F::zero())
    } else {
        (-pf.ln(), -F::one() / p)
    }
}

/// Pixel-wise cross-entropy, summed over classes and pixels, batch-averaged.
pub fn seg_loss<F: Float>(probs: &Tensor<F>, labels: &Tensor<F>, eps: f64) -> Result<Loss<F>> {
    if probs.shape() != labels.shape() {
        return Err(Error::Shape(format!(
            "seg_loss: probabilities {:?} vs labels {:?}",
            probs.shape(),
            labels.shape()
        )));
    }
    check_batch("probabilities", probs)?;
    guard("probabilities", probs)?;
    guard("labels", labels)?;
    let inv_b = 1.0 / probs.batch() as f64;
    let scale = F::lit(inv_b);
    let mut total = 0.0;
    let mut grad = Tensor::zeros(probs.shape());
    for ((g, &p), &y) in grad.data_mut().iter_mut().zip(probs.data()).zip(labels.data()) {
        if y != F::zero() {
            let (v, d) = neg_log(p, eps);
            total += y.to_f64().unwrap_or(f64::NAN) * v;
            *g = y * d * scale;
        }
    }
    Ok(Loss { value: total * inv_b, grad })
}

/// Generator-side adversarial loss on the discriminator's scores for target
/// predictions: `-sum log D(M_t)`, batch-averaged.
pub fn adv_gen_loss<F: Float>(scores: &Tensor<F>, eps: f64) -> Result<Loss<F>> {
    check_batch("patch scores", scores)?;
    guard("patch scores", scores)?;
    let inv_b = 1.0 / scores.batch() as f64;
    let scale = F::lit(inv_b);
    let mut total = 0.0;
    let mut grad = Tensor::zeros(scores.shape());
    for (g, &s) in grad.data_mut().iter_mut().zip(scores.data()) {
        let (v, d) = neg_log(s, eps);
        total += v;
        *g = d * scale;
    }
    Ok(Loss { value: total * inv_b, grad })
}

/// Discriminator loss and its gradients with respect to both score maps.
#[derive(Clone, Debug)]
pub struct DiscLoss<F> {
    pub value: f64,
    pub grad_source: Tensor<F>,
    pub grad_target: Tensor<F>,
}

/// `-sum log D(M_s) - sum log(1 - D(M_t))`, each term averaged over its batch.
pub fn disc_loss<F: Float>(scores_source: &Tensor<F>, scores_target: &Tensor<F>, eps: f64) -> Result<DiscLoss<F>> {
    let real = adv_gen_loss(scores_source, eps)?;
    let flipped = scores_target.map(|t| F::one() - t);
    let fake = adv_gen_loss(&flipped, eps)?;
    Ok(DiscLoss { value: real.value + fake.value, grad_source: real.grad, grad_target: fake.grad.scale(-F::one()) })
}

/// Sum over levels of the mean absolute difference between feature maps.
/// The gradient is returned for the prediction side only.
pub fn perceptual_loss<F: Float>(pred: &FeaturePyramid<F>, label: &FeaturePyramid<F>) -> Result<(f64, Vec<Tensor<F>>)> {
    if pred.levels.len() != label.levels.len() {
        return Err(Error::Shape(format!(
            "perceptual_loss: {} prediction levels vs {} label levels",
            pred.levels.len(),
            label.levels.len()
        )));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(pred.levels.len());
    for (i, (a, b)) in pred.levels.iter().zip(&label.levels).enumerate() {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!("perceptual_loss level {i}: {:?} vs {:?}", a.shape(), b.shape())));
        }
        if a.is_empty() {
            return Err(Error::Shape(format!("perceptual_loss level {i} is empty")));
        }
        guard("prediction features", a)?;
        guard("label features", b)?;
        let n = a.len() as f64;
        let step = F::lit(1.0 / n);
        let mut sum = 0.0;
        let mut g = Tensor::zeros(a.shape());
        for ((g, &x), &y) in g.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
            let d = x - y;
            sum += d.abs().to_f64().unwrap_or(f64::NAN);
            *g = if d > F::zero() {
                step
            } else if d < F::zero() {
                -step
            } else {
                F::zero()
            };
        }
        total += sum / n;
        grads.push(g);
    }
    Ok((total, grads))
}

/// Weighted generator objective; the discriminator loss is not part of it.
pub fn total_loss(seg: f64, adv_gen: f64, per: f64, w: &LossWeights) -> f64 {
    w.lambda_seg * seg + w.lambda_adv * adv_gen + w.lambda_per * per
}
