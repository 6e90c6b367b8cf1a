//! Layer primitives with explicit forward caches and hand-written backward
//! passes.
//!
//! Forward passes take `&self` and are pure. Backward passes return gradient
//! values; networks decide whether to fold parameter gradients into their
//! [`Param::grad`] buffers, which keeps input-only backward passes (frozen
//! or opponent networks) from ever touching parameter state.

mod conv;
mod ops;

pub use conv::{Activation, Conv2d, ConvCache, ConvGrads, ConvTranspose2x2, UpCache};
pub use ops::{
    maxpool2, maxpool2_backward, sigmoid, sigmoid_backward, softmax_channels,
    softmax_channels_backward, PoolCache,
};

use crate::tensor::{Float, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

impl<F: Float> Param<F> {
    pub fn new(value: Tensor<F>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }
}

/// Anything holding named parameters in a fixed visiting order.
pub trait Module<F: Float> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.value.len());
        n
    }

    /// Parameter values in visiting order, named.
    fn named_values(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| out.push((name.to_string(), p.value.clone())));
        out
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in ±1/sqrt(fan_in) for weights and bias.
    FanInUniform,
    /// Normal with std sqrt(2/fan_in), zero bias.
    HeNormal,
}

pub(crate) fn init_tensor<F: Float, R: Rng>(
    shape: [usize; 4],
    fan_in: usize,
    init: Init,
    rng: &mut R,
) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = match init {
        Init::FanInUniform => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| F::lit(rng.gen_range(-bound..bound))).collect()
        }
        Init::HeNormal => {
            let std = (2.0 / fan_in as f64).sqrt();
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    F::lit(z * std)
                })
                .collect()
        }
    };
    Tensor::from_vec(shape, data)
}
