use crate::error::{Error, Result};
use crate::nn::{join, sigmoid, sigmoid_backward, Activation, Conv2d, ConvCache, Init, Module, Param};
use crate::tensor::{Float, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Layout of the fully convolutional patch discriminator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub input_channels: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            input_channels: 2,
            widths: vec![64, 128, 256, 512],
            strides: vec![2, 2, 2, 1],
            leaky_slope: 0.2,
        }
    }
}

const KERNEL: usize = 4;
const PAD: usize = 1;

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::Config(
                "discriminator.widths and discriminator.strides must be non-empty and equally long".into(),
            ));
        }
        if self.widths.contains(&0) || self.strides.contains(&0) {
            return Err(Error::Config("discriminator widths and strides must be positive".into()));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config("discriminator.leaky_slope must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Side length of the patch map for a square `size` input, if every
    /// layer still sees at least one kernel footprint.
    pub fn output_size(&self, size: usize) -> Option<usize> {
        let mut s = size;
        for &stride in self.strides.iter().chain(std::iter::once(&1)) {
            if s + 2 * PAD < KERNEL {
                return None;
            }
            s = (s + 2 * PAD - KERNEL) / stride + 1;
        }
        Some(s)
    }
}

/// Patch discriminator: strided 4x4 convolutions with leaky ReLUs and a
/// final single-channel projection squashed to (0, 1). Each output cell is
/// the probability that its receptive patch came from a source prediction.
#[derive(Clone, Debug)]
pub struct Discriminator<F> {
    config: DiscriminatorConfig,
    layers: Vec<Conv2d<F>>,
}

pub struct DiscTape<F> {
    convs: Vec<ConvCache<F>>,
    scores: Tensor<F>,
}

impl<F: Float> Discriminator<F> {
    pub fn new<R: Rng>(config: &DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let act = Activation::LeakyRelu(config.leaky_slope);
        let mut layers = Vec::with_capacity(config.widths.len() + 1);
        let mut cin = config.input_channels;
        for (&w, &s) in config.widths.iter().zip(&config.strides) {
            layers.push(Conv2d::new(cin, w, KERNEL, s, PAD, act, Init::FanInUniform, rng));
            cin = w;
        }
        layers.push(Conv2d::new(cin, 1, KERNEL, 1, PAD, Activation::Identity, Init::FanInUniform, rng));
        Ok(Discriminator { config: config.clone(), layers })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor<F>) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if c != self.config.input_channels {
            return Err(Error::Shape(format!(
                "discriminator expects {} channels, got {c}",
                self.config.input_channels
            )));
        }
        if self.config.output_size(h.min(w)).is_none() {
            return Err(Error::Shape(format!("discriminator input {h}x{w} is too small")));
        }
        Ok(())
    }

    /// Patch scores in (0, 1), `B x 1 x h x w`.
    pub fn forward(&self, probs: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_input(probs)?;
        let mut h = probs.clone();
        for layer in &self.layers {
            h = layer.forward(&h);
        }
        Ok(sigmoid(&h))
    }

    pub fn forward_train(&self, probs: &Tensor<F>) -> Result<(Tensor<F>, DiscTape<F>)> {
        self.check_input(probs)?;
        let mut h = probs.clone();
        let mut convs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, c) = layer.forward_train(&h);
            h = y;
            convs.push(c);
        }
        let scores = sigmoid(&h);
        Ok((scores.clone(), DiscTape { convs, scores }))
    }

    /// Gradient with respect to the input map only; parameters and their
    /// gradient buffers are left untouched.
    pub fn backward_input(&self, tape: &DiscTape<F>, grad_scores: &Tensor<F>) -> Tensor<F> {
        let mut g = sigmoid_backward(&tape.scores, grad_scores);
        for (layer, cache) in self.layers.iter().zip(&tape.convs).rev() {
            g = layer.backward(cache, &g, false).input;
        }
        g
    }

    /// Full backward pass accumulating parameter gradients.
    pub fn backward(&mut self, tape: &DiscTape<F>, grad_scores: &Tensor<F>) -> Tensor<F> {
        let mut g = sigmoid_backward(&tape.scores, grad_scores);
        for (layer, cache) in self.layers.iter_mut().zip(&tape.convs).rev() {
            g = layer.backward_accumulate(cache, &g);
        }
        g
    }
}

impl<F: Float> Module<F> for Discriminator<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("conv{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("conv{i}")), f);
        }
    }
}
