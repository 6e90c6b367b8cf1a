use crate::error::{Error, Result};
use crate::nn::{maxpool2, maxpool2_backward, Activation, Conv2d, ConvCache, Init, Param, PoolCache};
use crate::tensor::{Float, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable naming the pretrained weight file.
pub const WEIGHTS_ENV: &str = "PAAA_VGG19_WEIGHTS";

/// ImageNet channel statistics the pretrained network expects.
const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Convolution widths of the 19-layer VGG up to `conv5_1`; `None` is a 2x2 max pool.
const PLAN: [Option<usize>; 17] = [
    Some(64), Some(64), None,
    Some(128), Some(128), None,
    Some(256), Some(256), Some(256), Some(256), None,
    Some(512), Some(512), Some(512), Some(512), None,
    Some(512),
];

/// Index (into the torchvision `features` sequence) of each convolution in [`PLAN`].
const TORCH_INDEX: [usize; 13] = [0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25, 28];

/// Convolutions whose ReLU output is tapped: relu1_1 .. relu5_1.
const TAPS: [usize; 5] = [0, 2, 4, 8, 12];

pub const LEVELS: usize = TAPS.len();

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorSource {
    /// ImageNet-pretrained weights from a safetensors file.
    Pretrained,
    /// Same topology with fixed-seed random frozen weights; needs no download.
    Fallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    pub source: ExtractorSource,
    /// Weight file; falls back to `$PAAA_VGG19_WEIGHTS` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    /// Divides every channel count. Only the fallback may use values > 1.
    pub width_divisor: usize,
    pub fallback_seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            source: ExtractorSource::Pretrained,
            weights: None,
            width_divisor: 1,
            fallback_seed: 19,
        }
    }
}

impl ExtractorConfig {
    pub fn fallback() -> Self {
        ExtractorConfig { source: ExtractorSource::Fallback, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_divisor == 0 || 64 % self.width_divisor != 0 {
            return Err(Error::Config(format!(
                "extractor.width_divisor must divide 64, got {}",
                self.width_divisor
            )));
        }
        if self.source == ExtractorSource::Pretrained && self.width_divisor != 1 {
            return Err(Error::Config("extractor.width_divisor must be 1 for pretrained weights".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> [usize; LEVELS] {
        [64, 128, 256, 512, 512].map(|c| c / self.width_divisor)
    }
}

/// Activations at the five tapped layers, shallowest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<F> {
    pub levels: Vec<Tensor<F>>,
}

#[allow(clippy::large_enum_variant)]
enum Op<F> {
    Conv(Conv2d<F>),
    Pool,
}

/// Frozen VGG-19 trunk through `relu5_1`. Holds no gradient state: its
/// backward pass produces input gradients only.
pub struct FeatureExtractor<F> {
    config: ExtractorConfig,
    ops: Vec<Op<F>>,
}

enum OpCache<F> {
    Conv(ConvCache<F>),
    Pool(PoolCache),
}

pub struct ExtractorTape<F> {
    ops: Vec<OpCache<F>>,
}

impl<F: Float> FeatureExtractor<F> {
    /// Builds the extractor described by `config`, loading pretrained weights
    /// when requested.
    pub fn new(config: &ExtractorConfig) -> Result<Self> {
        config.validate()?;
        match config.source {
            ExtractorSource::Fallback => Ok(Self::random(config)),
            ExtractorSource::Pretrained => {
                let path = config
                    .weights
                    .clone()
                    .or_else(|| std::env::var_os(WEIGHTS_ENV).map(PathBuf::from))
                    .ok_or_else(|| Error::Extractor(missing_weights_help()))?;
                Self::from_safetensors(config, &path)
            }
        }
    }

    fn random(config: &ExtractorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.fallback_seed);
        let mut cin = 3;
        let ops = PLAN
            .iter()
            .map(|step| match step {
                Some(w) => {
                    let cout = w / config.width_divisor;
                    let conv = Conv2d::new(cin, cout, 3, 1, 1, Activation::Relu, Init::HeNormal, &mut rng);
                    cin = cout;
                    Op::Conv(conv)
                }
                None => Op::Pool,
            })
            .collect();
        FeatureExtractor { config: config.clone(), ops }
    }

    fn from_safetensors(config: &ExtractorConfig, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Extractor(format!("cannot read {}: {e}\n{}", path.display(), missing_weights_help()))
        })?;
        let st = safetensors::SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Extractor(format!("{}: {e}", path.display())))?;
        let load = |name: &str, shape: [usize; 4]| -> Result<Tensor<F>> {
            let view = st
                .tensor(name)
                .map_err(|e| Error::Extractor(format!("{}: tensor {name}: {e}", path.display())))?;
            if view.dtype() != safetensors::Dtype::F32 {
                return Err(Error::Extractor(format!("{name}: expected f32, found {:?}", view.dtype())));
            }
            let expect: usize = shape.iter().product();
            if view.shape().iter().product::<usize>() != expect {
                return Err(Error::Extractor(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    view.shape()
                )));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|b| F::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                .collect();
            Ok(Tensor::from_vec(shape, data))
        };
        let mut ops = Vec::with_capacity(PLAN.len());
        let mut cin = 3;
        let mut conv_i = 0;
        for step in PLAN {
            match step {
                Some(cout) => {
                    let idx = TORCH_INDEX[conv_i];
                    let w = load(&format!("features.{idx}.weight"), [cout, cin, 3, 3])?;
                    let b = load(&format!("features.{idx}.bias"), [cout, 1, 1, 1])?;
                    ops.push(Op::Conv(Conv2d {
                        weight: Param::new(w),
                        bias: Param::new(b),
                        stride: 1,
                        pad: 1,
                        act: Activation::Relu,
                    }));
                    cin = cout;
                    conv_i += 1;
                }
                None => ops.push(Op::Pool),
            }
        }
        Ok(FeatureExtractor { config: config.clone(), ops })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    /// All weights and biases, in layer order (for freeze checks).
    pub fn parameters(&self) -> Vec<&Tensor<F>> {
        self.ops
            .iter()
            .filter_map(|op| match op {
                Op::Conv(c) => Some([&c.weight.value, &c.bias.value]),
                Op::Pool => None,
            })
            .flatten()
            .collect()
    }

    /// Replicates a single-channel map to three channels and applies the
    /// fixed per-channel input normalisation.
    fn normalise(x: &Tensor<F>) -> Result<Tensor<F>> {
        let [n, c, h, w] = x.shape();
        if c != 1 {
            return Err(Error::Shape(format!("extractor expects 1 channel, got {c}")));
        }
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("extractor input {h}x{w} must be a positive multiple of 16")));
        }
        let mut out = Tensor::zeros([n, 3, h, w]);
        for b in 0..n {
            let src = x.plane(b, 0).to_vec();
            for ch in 0..3 {
                let (m, s) = (F::lit(MEAN[ch]), F::lit(STD[ch]));
                for (d, &v) in out.plane_mut(b, ch).iter_mut().zip(&src) {
                    *d = (v - m) / s;
                }
            }
        }
        Ok(out)
    }

    fn run(&self, x: &Tensor<F>, mut tape: Option<&mut Vec<OpCache<F>>>) -> Result<FeaturePyramid<F>> {
        let mut h = Self::normalise(x)?;
        let mut levels = Vec::with_capacity(LEVELS);
        let mut conv_i = 0;
        for op in &self.ops {
            match op {
                Op::Conv(conv) => {
                    h = match tape.as_deref_mut() {
                        Some(t) => {
                            let (y, c) = conv.forward_train(&h);
                            t.push(OpCache::Conv(c));
                            y
                        }
                        None => conv.forward(&h),
                    };
                    if TAPS.contains(&conv_i) {
                        levels.push(h.clone());
                    }
                    conv_i += 1;
                }
                Op::Pool => {
                    let (y, c) = maxpool2(&h);
                    if let Some(t) = tape.as_deref_mut() {
                        t.push(OpCache::Pool(c));
                    }
                    h = y;
                }
            }
        }
        Ok(FeaturePyramid { levels })
    }

    /// Features of a batch of single-channel maps with values in [0, 1].
    pub fn forward(&self, x: &Tensor<F>) -> Result<FeaturePyramid<F>> {
        self.run(x, None)
    }

    pub fn forward_train(&self, x: &Tensor<F>) -> Result<(FeaturePyramid<F>, ExtractorTape<F>)> {
        let mut ops = Vec::with_capacity(self.ops.len());
        let pyr = self.run(x, Some(&mut ops))?;
        Ok((pyr, ExtractorTape { ops }))
    }

    /// Gradient with respect to the single-channel input given gradients at
    /// each pyramid level. Weights are never modified.
    pub fn backward_input(&self, tape: &ExtractorTape<F>, level_grads: &[Tensor<F>]) -> Tensor<F> {
        assert_eq!(level_grads.len(), LEVELS);
        let mut conv_i = PLAN.iter().filter(|s| s.is_some()).count();
        let mut g: Option<Tensor<F>> = None;
        for (op, cache) in self.ops.iter().zip(&tape.ops).rev() {
            match (op, cache) {
                (Op::Conv(conv), OpCache::Conv(c)) => {
                    conv_i -= 1;
                    if let Some(tap) = TAPS.iter().position(|&t| t == conv_i) {
                        match &mut g {
                            Some(acc) => acc.add_assign(&level_grads[tap]),
                            None => g = Some(level_grads[tap].clone()),
                        }
                    }
                    let go = g.take().expect("deepest layer is tapped");
                    g = Some(conv.backward(c, &go, false).input);
                }
                (Op::Pool, OpCache::Pool(c)) => {
                    let go = g.take().expect("pool follows a tapped layer");
                    g = Some(maxpool2_backward(c, &go));
                }
                _ => unreachable!("tape out of sync with layer list"),
            }
        }
        let g3 = g.expect("non-empty network");
        let [n, _, h, w] = g3.shape();
        let mut out = Tensor::zeros([n, 1, h, w]);
        for b in 0..n {
            let dst = out.plane_mut(b, 0);
            for (ch, &sd) in STD.iter().enumerate() {
                let s = F::lit(sd);
                for (d, &v) in dst.iter_mut().zip(g3.plane(b, ch)) {
                    *d += v / s;
                }
            }
        }
        out
    }
}

fn missing_weights_help() -> String {
    format!(
        "pretrained VGG-19 weights are not available. Export torchvision's \
         `vgg19(weights=\"IMAGENET1K_V1\").features` state dict to safetensors \
         (keys `features.<i>.weight` / `features.<i>.bias`, f32) and point \
         `extractor.weights` or ${WEIGHTS_ENV} at the file, or set \
         `extractor.source = \"fallback\"` to use fixed random weights"
    )
}
