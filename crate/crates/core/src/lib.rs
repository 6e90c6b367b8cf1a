//! Unsupervised domain adaptation for band segmentation: a U-Net trained on
//! a labelled source domain is adapted to an unlabelled target domain with an
//! output-space patch discriminator and a perceptual loss on frozen VGG-19
//! features.

pub mod ablation;
pub mod config;
pub mod dataio;
pub mod error;
pub mod exec;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod nn;
pub mod optim;
pub mod raster;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
