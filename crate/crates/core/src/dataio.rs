//! Dataset loading, preprocessing to network resolution and seeded batch
//! scheduling.
//!
//! On-disk layout: `<root>/images/<id>.png` (8-bit gray), `<root>/masks/<id>.png`
//! (0 background, 255 foreground; decoded with threshold 128) and an optional
//! `<root>/manifest.txt`.

use crate::error::{Error, Result};
use crate::exec;
use crate::raster::{GrayImage, Mask};
use crate::synthdata::{Domain, ImageSample};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

pub const NUM_CLASSES: usize = 2;

/// An ordered, immutable collection of samples from one domain.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    domain: Domain,
    labels_visible: bool,
    samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn from_samples(domain: Domain, labels_visible: bool, samples: Vec<ImageSample>) -> Result<Self> {
        let mut samples = samples;
        for s in &mut samples {
            if s.domain != domain {
                return Err(Error::Config(format!("sample {} is not from the {domain} domain", s.id)));
            }
            if labels_visible {
                check_mask(s)?;
            } else {
                s.mask = None;
            }
        }
        Ok(Dataset { root: PathBuf::new(), domain, labels_visible, samples })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn labels_visible(&self) -> bool {
        self.labels_visible
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.id.as_str()).collect()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.samples[i].id
    }

    pub fn image(&self, i: usize) -> &GrayImage {
        &self.samples[i].image
    }

    /// The reference mask of sample `i`; fails for label-blind datasets.
    pub fn mask(&self, i: usize) -> Result<&Mask> {
        let s = &self.samples[i];
        if !self.labels_visible {
            return Err(Error::LabelsHidden { id: s.id.clone() });
        }
        s.mask.as_ref().ok_or_else(|| Error::MissingMask { id: s.id.clone() })
    }

    pub fn sample(&self, i: usize) -> &ImageSample {
        &self.samples[i]
    }
}

fn check_mask(s: &ImageSample) -> Result<()> {
    let m = s.mask.as_ref().ok_or_else(|| Error::MissingMask { id: s.id.clone() })?;
    if m.width != s.image.width || m.height != s.image.height {
        return Err(Error::DimensionMismatch {
            id: s.id.clone(),
            image_w: s.image.width,
            image_h: s.image.height,
            mask_w: m.width,
            mask_h: m.height,
        });
    }
    Ok(())
}

/// Loads `<root>/images/*.png` in lexicographic order of basename. Masks are
/// read (and validated) only when `labels_visible` is set.
pub fn load_dataset(root: &Path, domain: Domain, labels_visible: bool) -> Result<Dataset> {
    let image_dir = root.join("images");
    let listing = std::fs::read_dir(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut ids = Vec::new();
    for entry in listing {
        let path = entry.map_err(|e| Error::io(&image_dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Config(format!("{} contains no .png images", image_dir.display())));
    }
    let samples = exec::try_map_range(ids.len(), |i| -> Result<ImageSample> {
        let id = &ids[i];
        let image = GrayImage::load_png(&image_dir.join(format!("{id}.png")))?;
        let mask = if labels_visible {
            let p = root.join("masks").join(format!("{id}.png"));
            if !p.exists() {
                return Err(Error::MissingMask { id: id.clone() });
            }
            Some(Mask::load_png(&p)?)
        } else {
            None
        };
        let s = ImageSample { id: id.clone(), domain, image, mask };
        if labels_visible {
            check_mask(&s)?;
        }
        Ok(s)
    })?;
    Ok(Dataset { root: root.to_path_buf(), domain, labels_visible, samples })
}

/// Resizes to `size x size`: bilinear for the image, nearest-neighbour then
/// one-hot over two classes for the mask. Returns `1x1xSxS` and `1x2xSxS`.
pub fn preprocess(sample: &ImageSample, size: usize) -> Result<(Tensor<f32>, Option<Tensor<f32>>)> {
    let image = preprocess_image(&sample.image, size)?;
    let onehot = match &sample.mask {
        Some(m) => {
            if m.width != sample.image.width || m.height != sample.image.height {
                check_mask(sample)?;
            }
            Some(onehot(&m.resize_nearest(size, size)))
        }
        None => None,
    };
    Ok((image, onehot))
}

/// Bilinear resize of one image to a `1 x 1 x size x size` tensor.
pub fn preprocess_image(image: &GrayImage, size: usize) -> Result<Tensor<f32>> {
    if size < 32 {
        return Err(Error::Config(format!("network input size must be >= 32, got {size}")));
    }
    let img = image.resize_bilinear(size, size);
    Ok(Tensor::from_vec([1, 1, size, size], img.data.iter().map(|v| v.clamp(0.0, 1.0)).collect()))
}

/// `1 x 2 x H x W` one-hot encoding of a binary mask.
pub fn onehot(m: &Mask) -> Tensor<f32> {
    let hw = m.width * m.height;
    let mut data = vec![0.0f32; NUM_CLASSES * hw];
    for (i, &v) in m.data.iter().enumerate() {
        data[(v != 0) as usize * hw + i] = 1.0;
    }
    Tensor::from_vec([1, NUM_CLASSES, m.height, m.width], data)
}

/// One preprocessed sample held at network resolution.
#[derive(Clone, Debug)]
struct Prepared {
    id: String,
    image: Tensor<f32>,
    onehot: Option<Tensor<f32>>,
}

/// A dataset preprocessed once to network resolution.
#[derive(Clone, Debug)]
pub struct PreparedSet {
    size: usize,
    domain: Domain,
    labels: bool,
    items: Vec<Prepared>,
}

impl PreparedSet {
    pub fn new(ds: &Dataset, size: usize) -> Result<Self> {
        let items = exec::try_map_range(ds.len(), |i| {
            let (image, onehot) = preprocess(ds.sample(i), size)?;
            Ok::<_, Error>(Prepared { id: ds.id(i).to_string(), image, onehot })
        })?;
        Ok(PreparedSet { size, domain: ds.domain(), labels: ds.labels_visible(), items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn has_labels(&self) -> bool {
        self.labels
    }

    /// Gathers the given sample indices into a batch.
    pub fn batch(&self, indices: &[usize], with_labels: bool) -> Batch {
        let images: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.items[i].image).collect();
        let labels = (with_labels && self.labels).then(|| {
            let parts: Vec<&Tensor<f32>> =
                indices.iter().map(|&i| self.items[i].onehot.as_ref().expect("labelled set")).collect();
            Tensor::concat_batch(&parts)
        });
        Batch {
            images: Tensor::concat_batch(&images),
            labels,
            ids: indices.iter().map(|&i| self.items[i].id.clone()).collect(),
            indices: indices.to_vec(),
        }
    }
}

/// A minibatch at network resolution.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `B x 1 x S x S`, values in [0, 1].
    pub images: Tensor<f32>,
    /// `B x 2 x S x S` one-hot labels, absent for label-blind batches.
    pub labels: Option<Tensor<f32>>,
    pub ids: Vec<String>,
    /// Positions of the samples in their [`PreparedSet`].
    pub indices: Vec<usize>,
}

/// Per-epoch seeded shuffling of one dataset, with drop-last batching.
///
/// The batch for any step is a pure function of (seed, stream, step), so a
/// schedule can be resumed from a step count alone.
#[derive(Clone, Debug)]
pub struct Schedule {
    len: usize,
    batch_size: usize,
    seed: u64,
    stream: u64,
    cached: Option<(usize, Vec<usize>)>,
}

impl Schedule {
    pub fn new(len: usize, batch_size: usize, seed: u64, stream: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if batch_size > len {
            return Err(Error::Config(format!(
                "batch_size {batch_size} exceeds dataset size {len}"
            )));
        }
        Ok(Schedule { len, batch_size, seed, stream, cached: None })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len / self.batch_size
    }

    /// Sample order used in `epoch`.
    pub fn order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((self.stream << 40) | epoch as u64);
        let mut order: Vec<usize> = (0..self.len).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Sample indices of the batch consumed at `step`.
    pub fn batch_at(&mut self, step: usize) -> Vec<usize> {
        let bpe = self.batches_per_epoch();
        let (epoch, pos) = (step / bpe, step % bpe);
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            self.cached = Some((epoch, self.order(epoch)));
        }
        let order = &self.cached.as_ref().expect("just filled").1;
        order[pos * self.batch_size..(pos + 1) * self.batch_size].to_vec()
    }
}

const SOURCE_STREAM: u64 = 1;
const TARGET_STREAM: u64 = 2;

/// Endless stream of (labelled source batch, label-free target batch) pairs.
/// Each domain is shuffled independently per epoch; the shorter one cycles.
pub struct PairedBatches<'a> {
    source: &'a PreparedSet,
    target: &'a PreparedSet,
    source_schedule: Schedule,
    target_schedule: Schedule,
    step: usize,
}

pub fn paired_iterator<'a>(
    source: &'a PreparedSet,
    target: &'a PreparedSet,
    batch_size: usize,
    seed: u64,
) -> Result<PairedBatches<'a>> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Config("paired iteration needs non-empty source and target sets".into()));
    }
    if !source.has_labels() {
        return Err(Error::Config("source set must carry labels".into()));
    }
    Ok(PairedBatches {
        source,
        target,
        source_schedule: Schedule::new(source.len(), batch_size, seed, SOURCE_STREAM)?,
        target_schedule: Schedule::new(target.len(), batch_size, seed, TARGET_STREAM)?,
        step: 0,
    })
}

impl PairedBatches<'_> {
    /// Continue as if `step` pairs had already been consumed.
    pub fn starting_at(mut self, step: usize) -> Self {
        self.step = step;
        self
    }

    pub fn source_batches_per_epoch(&self) -> usize {
        self.source_schedule.batches_per_epoch()
    }
}

impl Iterator for PairedBatches<'_> {
    type Item = (Batch, Batch);

    fn next(&mut self) -> Option<Self::Item> {
        let s = self.source_schedule.batch_at(self.step);
        let t = self.target_schedule.batch_at(self.step);
        self.step += 1;
        Some((self.source.batch(&s, true), self.target.batch(&t, false)))
    }
}

/// Endless stream of labelled batches from a single set (supervised modes).
pub struct LabelledBatches<'a> {
    set: &'a PreparedSet,
    schedule: Schedule,
    step: usize,
}

pub fn labelled_iterator(set: &PreparedSet, batch_size: usize, seed: u64) -> Result<LabelledBatches<'_>> {
    if !set.has_labels() {
        return Err(Error::Config("supervised iteration needs a labelled set".into()));
    }
    Ok(LabelledBatches { set, schedule: Schedule::new(set.len(), batch_size, seed, SOURCE_STREAM)?, step: 0 })
}

impl LabelledBatches<'_> {
    pub fn starting_at(mut self, step: usize) -> Self {
        self.step = step;
        self
    }
}

impl Iterator for LabelledBatches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let idx = self.schedule.batch_at(self.step);
        self.step += 1;
        Some(self.set.batch(&idx, true))
    }
}
