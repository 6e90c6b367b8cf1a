//! Run configuration: one TOML document with `[data]`, `[model]`, `[train]`,
//! `[loss]` and `[eval]` sections. Defaults carry the published training
//! constants.

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nets::{DiscriminatorConfig, ExtractorConfig, SegmenterConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Supervised on the source domain only.
    SourceOnly,
    /// Supervised on labelled target images; the upper reference.
    Oracle,
    /// Source supervision plus output-space adversarial alignment.
    AdversarialOnly,
    /// Adversarial alignment plus the perceptual term.
    Paaa,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::SourceOnly, Mode::Oracle, Mode::AdversarialOnly, Mode::Paaa];

    pub fn name(self) -> &'static str {
        match self {
            Mode::SourceOnly => "source_only",
            Mode::Oracle => "oracle",
            Mode::AdversarialOnly => "adversarial_only",
            Mode::Paaa => "paaa",
        }
    }

    /// Whether the mode trains on unlabelled target batches.
    pub fn adapts(self) -> bool {
        matches!(self, Mode::AdversarialOnly | Mode::Paaa)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Labelled source-domain dataset.
    pub source: PathBuf,
    /// Target-domain training images (labels are read only in oracle mode).
    pub target: PathBuf,
    /// Labelled target split used for periodic evaluation and model selection.
    pub target_val: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: "data/source".into(),
            target: "data/target".into(),
            target_val: "data/target_val".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Square network input side length.
    pub input_size: usize,
    pub segmenter: SegmenterConfig,
    pub discriminator: DiscriminatorConfig,
    pub extractor: ExtractorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 224,
            segmenter: SegmenterConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            extractor: ExtractorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub mode: Mode,
    pub lr_seg: f64,
    pub lr_disc: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weight_decay: f64,
    /// Images per domain per step.
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Parent directory of run directories.
    pub output_dir: PathBuf,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            mode: Mode::Paaa,
            lr_seg: 1e-3,
            lr_disc: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            weight_decay: 1e-4,
            batch_size: 1,
            steps: 3000,
            seed: 0,
            output_dir: "runs".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Evaluate on `data.target_val` every this many steps; 0 evaluates only
    /// after the last step.
    pub every: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { every: 500 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub loss: LossWeights,
    pub eval: EvalSection,
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{key} must be > 0, got {v}")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. Relative data paths and the output
    /// directory are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.data.source,
            &mut cfg.data.target,
            &mut cfg.data.target_val,
            &mut cfg.train.output_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(w) = cfg.model.extractor.weights.as_mut() {
            if w.is_relative() {
                *w = base.join(&*w);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Loss weights after the mode's forced zeros.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.loss;
        match self.train.mode {
            Mode::SourceOnly | Mode::Oracle => {
                w.lambda_adv = 0.0;
                w.lambda_per = 0.0;
            }
            Mode::AdversarialOnly => w.lambda_per = 0.0,
            Mode::Paaa => {}
        }
        w
    }

    pub fn needs_discriminator(&self) -> bool {
        self.effective_weights().lambda_adv > 0.0
    }

    pub fn needs_extractor(&self) -> bool {
        self.effective_weights().lambda_per > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        positive("train.lr_seg", t.lr_seg)?;
        positive("train.lr_disc", t.lr_disc)?;
        for (key, b) in [("train.adam_beta1", t.adam_beta1), ("train.adam_beta2", t.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{key} must lie in [0, 1), got {b}")));
            }
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return Err(Error::Config(format!("train.weight_decay must be >= 0, got {}", t.weight_decay)));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        self.loss.validate()?;
        let m = &self.model;
        if m.input_size < 32 {
            return Err(Error::Config(format!("model.input_size must be >= 32, got {}", m.input_size)));
        }
        m.segmenter.validate()?;
        m.segmenter.check_input_size(m.input_size)?;
        if m.segmenter.input_channels != 1 || m.segmenter.num_classes != 2 {
            return Err(Error::Config("model.segmenter must map 1 input channel to 2 classes".into()));
        }
        m.discriminator.validate()?;
        if m.discriminator.input_channels != m.segmenter.num_classes {
            return Err(Error::Config("model.discriminator.input_channels must equal the class count".into()));
        }
        if m.discriminator.output_size(m.input_size).is_none() {
            return Err(Error::Config(format!("model.input_size {} is too small for the discriminator", m.input_size)));
        }
        m.extractor.validate()?;
        if !m.input_size.is_multiple_of(16) {
            return Err(Error::Config(format!("model.input_size must be a multiple of 16, got {}", m.input_size)));
        }
        Ok(())
    }

    /// Short content hash of the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(&digest[..6])
    }
}
