use crate::error::{Error, Result};
use crate::nn::{
    join, maxpool2, maxpool2_backward, softmax_channels, softmax_channels_backward, Activation,
    Conv2d, ConvCache, ConvTranspose2x2, Init, Module, Param, PoolCache, UpCache,
};
use crate::tensor::{Float, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Shape of the U-Net segmentation network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterConfig {
    pub input_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub depth: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig { input_channels: 1, num_classes: 2, base_width: 32, depth: 4 }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width < 4 {
            return Err(Error::Config(format!("model.base_width must be >= 4, got {}", self.base_width)));
        }
        if self.depth < 2 {
            return Err(Error::Config(format!("model.depth must be >= 2, got {}", self.depth)));
        }
        if self.input_channels == 0 || self.num_classes < 2 {
            return Err(Error::Config("model needs >= 1 input channel and >= 2 classes".into()));
        }
        Ok(())
    }

    /// Checks that `size` survives `depth` halvings exactly.
    pub fn check_input_size(&self, size: usize) -> Result<()> {
        let div = 1usize << self.depth;
        if size == 0 || !size.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "input size {size} is not divisible by 2^depth = {div}"
            )));
        }
        Ok(())
    }
}

/// Two 3x3 convolutions, each followed by a ReLU.
#[derive(Clone, Debug)]
struct DoubleConv<F> {
    a: Conv2d<F>,
    b: Conv2d<F>,
}

impl<F: Float> DoubleConv<F> {
    fn new<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Self {
        DoubleConv {
            a: Conv2d::new(cin, cout, 3, 1, 1, Activation::Relu, Init::FanInUniform, rng),
            b: Conv2d::new(cout, cout, 3, 1, 1, Activation::Relu, Init::FanInUniform, rng),
        }
    }

    fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        self.b.forward(&self.a.forward(x))
    }

    fn forward_train(&self, x: &Tensor<F>) -> (Tensor<F>, [ConvCache<F>; 2]) {
        let (h, ca) = self.a.forward_train(x);
        let (y, cb) = self.b.forward_train(&h);
        (y, [ca, cb])
    }

    fn backward(&mut self, tape: &[ConvCache<F>; 2], g: &Tensor<F>) -> Tensor<F> {
        let g = self.b.backward_accumulate(&tape[1], g);
        self.a.backward_accumulate(&tape[0], &g)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.a.visit(&join(prefix, "conv1"), f);
        self.b.visit(&join(prefix, "conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.a.visit_mut(&join(prefix, "conv1"), f);
        self.b.visit_mut(&join(prefix, "conv2"), f);
    }
}

/// Encoder-decoder segmentation network with skip connections at every
/// level, ending in a per-pixel softmax over classes.
#[derive(Clone, Debug)]
pub struct Segmenter<F> {
    config: SegmenterConfig,
    down: Vec<DoubleConv<F>>,
    bottom: DoubleConv<F>,
    up: Vec<ConvTranspose2x2<F>>,
    dec: Vec<DoubleConv<F>>,
    head: Conv2d<F>,
}

/// Activations recorded by [`Segmenter::forward_train`].
pub struct SegTape<F> {
    down: Vec<([ConvCache<F>; 2], PoolCache)>,
    bottom: [ConvCache<F>; 2],
    up: Vec<(UpCache<F>, [ConvCache<F>; 2])>,
    head: ConvCache<F>,
    probs: Tensor<F>,
}

impl<F: Float> SegTape<F> {
    pub fn probs(&self) -> &Tensor<F> {
        &self.probs
    }
}

impl<F: Float> Segmenter<F> {
    pub fn new<R: Rng>(config: &SegmenterConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let width = |level: usize| config.base_width << level;
        let mut down = Vec::with_capacity(config.depth);
        let mut cin = config.input_channels;
        for level in 0..config.depth {
            down.push(DoubleConv::new(cin, width(level), rng));
            cin = width(level);
        }
        let bottom = DoubleConv::new(cin, width(config.depth), rng);
        let mut up = Vec::with_capacity(config.depth);
        let mut dec = Vec::with_capacity(config.depth);
        for level in (0..config.depth).rev() {
            up.push(ConvTranspose2x2::new(width(level + 1), width(level), rng));
            dec.push(DoubleConv::new(2 * width(level), width(level), rng));
        }
        let head = Conv2d::new(
            config.base_width,
            config.num_classes,
            1,
            1,
            0,
            Activation::Identity,
            Init::FanInUniform,
            rng,
        );
        Ok(Segmenter { config: config.clone(), down, bottom, up, dec, head })
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor<F>) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if c != self.config.input_channels {
            return Err(Error::Shape(format!(
                "segmenter expects {} input channels, got {c}",
                self.config.input_channels
            )));
        }
        self.config.check_input_size(h)?;
        self.config.check_input_size(w)
    }

    /// Class probabilities, `B x C x H x W`.
    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x.clone();
        for block in &self.down {
            let y = block.forward(&h);
            h = maxpool2(&y).0;
            skips.push(y);
        }
        h = self.bottom.forward(&h);
        for (i, (up, dec)) in self.up.iter().zip(&self.dec).enumerate() {
            let u = up.forward(&h);
            h = dec.forward(&Tensor::concat_channels(&skips[self.config.depth - 1 - i], &u));
        }
        Ok(softmax_channels(&self.head.forward(&h)))
    }

    pub fn forward_train(&self, x: &Tensor<F>) -> Result<(Tensor<F>, SegTape<F>)> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut down_tape = Vec::with_capacity(self.config.depth);
        let mut h = x.clone();
        for block in &self.down {
            let (y, t) = block.forward_train(&h);
            let (p, pc) = maxpool2(&y);
            h = p;
            skips.push(y);
            down_tape.push((t, pc));
        }
        let (b, bottom) = self.bottom.forward_train(&h);
        h = b;
        let mut up_tape = Vec::with_capacity(self.config.depth);
        for (i, (up, dec)) in self.up.iter().zip(&self.dec).enumerate() {
            let (u, uc) = up.forward_train(&h);
            let cat = Tensor::concat_channels(&skips[self.config.depth - 1 - i], &u);
            let (y, dt) = dec.forward_train(&cat);
            h = y;
            up_tape.push((uc, dt));
        }
        let (logits, head) = self.head.forward_train(&h);
        let probs = softmax_channels(&logits);
        let tape = SegTape { down: down_tape, bottom, up: up_tape, head, probs: probs.clone() };
        Ok((probs, tape))
    }

    /// Backpropagates `grad_probs` (dL/dprobs), accumulating parameter
    /// gradients, and returns dL/dinput.
    pub fn backward(&mut self, tape: &SegTape<F>, grad_probs: &Tensor<F>) -> Tensor<F> {
        let depth = self.config.depth;
        let g = softmax_channels_backward(&tape.probs, grad_probs);
        let mut g = self.head.backward_accumulate(&tape.head, &g);
        let mut skip_grads: Vec<Option<Tensor<F>>> = vec![None; depth];
        for i in (0..depth).rev() {
            let (uc, dt) = &tape.up[i];
            let gcat = self.dec[i].backward(dt, &g);
            let level = depth - 1 - i;
            let (gskip, gup) = gcat.split_channels(self.config.base_width << level);
            skip_grads[level] = Some(gskip);
            g = self.up[i].backward_accumulate(uc, &gup);
        }
        g = self.bottom.backward(&tape.bottom, &g);
        for level in (0..depth).rev() {
            let (t, pc) = &tape.down[level];
            let mut gy = maxpool2_backward(pc, &g);
            gy.add_assign(skip_grads[level].as_ref().expect("decoder visited every level"));
            g = self.down[level].backward(t, &gy);
        }
        g
    }
}

impl<F: Float> Module<F> for Segmenter<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        for (i, b) in self.down.iter().enumerate() {
            b.visit(&join(prefix, &format!("down{i}")), f);
        }
        self.bottom.visit(&join(prefix, "bottom"), f);
        for (i, (u, d)) in self.up.iter().zip(&self.dec).enumerate() {
            u.visit(&join(prefix, &format!("up{i}")), f);
            d.visit(&join(prefix, &format!("dec{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (i, b) in self.down.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("down{i}")), f);
        }
        self.bottom.visit_mut(&join(prefix, "bottom"), f);
        for (i, (u, d)) in self.up.iter_mut().zip(self.dec.iter_mut()).enumerate() {
            u.visit_mut(&join(prefix, &format!("up{i}")), f);
            d.visit_mut(&join(prefix, &format!("dec{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
