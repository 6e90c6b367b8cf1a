//! The three networks: segmenter, patch discriminator and the frozen
//! perceptual feature extractor.

mod patch;
mod unet;
mod vgg;

pub use patch::{DiscTape, Discriminator, DiscriminatorConfig};
pub use unet::{SegTape, Segmenter, SegmenterConfig};
pub use vgg::{
    ExtractorConfig, ExtractorSource, ExtractorTape, FeatureExtractor, FeaturePyramid, LEVELS,
    WEIGHTS_ENV,
};
