//! Deterministic generator of banded grayscale images with masks.
//!
//! Each sample draws two smooth boundary curves (upper and lower) as short
//! random sinusoidal series; the band between them is the foreground class.
//! Two [`DomainSpec`]s that differ in intensity, contrast and noise stand in
//! for two imaging devices.

use crate::error::{Error, Result};
use crate::exec;
use crate::raster::{GrayImage, Mask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

/// One boundary curve, in fractions of the image height.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveSpec {
    /// Mean row position as a fraction of the height.
    pub mean: f64,
    /// Largest excursion from the mean, as a fraction of the height.
    pub amplitude: f64,
    pub harmonics: usize,
    /// Harmonic k gets a raw coefficient scaled by `k^-coef_scale`; larger is smoother.
    pub coef_scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseModel {
    /// Additive: `v + strength * n`.
    Gaussian { strength: f64 },
    /// Multiplicative: `v * (1 + strength * n)`.
    Speckle { strength: f64 },
}

impl NoiseModel {
    pub fn strength(&self) -> f64 {
        match *self {
            NoiseModel::Gaussian { strength } | NoiseModel::Speckle { strength } => strength,
        }
    }

    fn apply(&self, v: f64, n: f64) -> f64 {
        match *self {
            NoiseModel::Gaussian { strength } => v + strength * n,
            NoiseModel::Speckle { strength } => v * (1.0 + strength * n),
        }
    }
}

/// Parameters of one synthetic imaging domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain: Domain,
    pub width: usize,
    pub height: usize,
    pub upper: CurveSpec,
    pub lower: CurveSpec,
    pub band_intensity: f64,
    pub background_intensity: f64,
    pub noise: NoiseModel,
    pub contrast_gamma: f64,
    pub seed: u64,
}

impl DomainSpec {
    /// Clean square source domain.
    pub fn default_source() -> Self {
        DomainSpec {
            domain: Domain::Source,
            width: 256,
            height: 256,
            upper: CurveSpec { mean: 0.35, amplitude: 0.08, harmonics: 4, coef_scale: 1.0 },
            lower: CurveSpec { mean: 0.6, amplitude: 0.1, harmonics: 4, coef_scale: 1.0 },
            band_intensity: 0.7,
            background_intensity: 0.3,
            noise: NoiseModel::Gaussian { strength: 0.02 },
            contrast_gamma: 1.0,
            seed: 1,
        }
    }

    /// Wide, speckled, contrast-shifted target domain. After gamma the band
    /// sits near 0.5, below the source band level.
    pub fn default_target() -> Self {
        DomainSpec {
            domain: Domain::Target,
            width: 512,
            height: 256,
            upper: CurveSpec { mean: 0.4, amplitude: 0.08, harmonics: 5, coef_scale: 1.0 },
            lower: CurveSpec { mean: 0.65, amplitude: 0.1, harmonics: 5, coef_scale: 1.0 },
            band_intensity: 0.65,
            background_intensity: 0.3,
            noise: NoiseModel::Speckle { strength: 0.4 },
            contrast_gamma: 1.6,
            seed: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Spec(msg));
        if self.width < 2 || self.height < 2 {
            return bad(format!("image must be at least 2x2, got {}x{}", self.width, self.height));
        }
        for (name, c) in [("upper", &self.upper), ("lower", &self.lower)] {
            if !(c.mean.is_finite() && c.amplitude.is_finite() && c.coef_scale.is_finite()) {
                return bad(format!("{name} curve has non-finite parameters"));
            }
            if c.amplitude < 0.0 {
                return bad(format!("{name}.amplitude must be >= 0"));
            }
            if c.harmonics == 0 {
                return bad(format!("{name}.harmonics must be >= 1"));
            }
        }
        if self.lower.mean <= self.upper.mean
            || self.lower.mean - self.upper.mean < self.upper.amplitude + self.lower.amplitude
        {
            return bad(format!(
                "curve invariant violated: lower.mean - upper.mean ({:.4}) must be positive and \
                 >= upper.amplitude + lower.amplitude ({:.4}), otherwise the curves can cross",
                self.lower.mean - self.upper.mean,
                self.upper.amplitude + self.lower.amplitude
            ));
        }
        if self.upper.mean - self.upper.amplitude < 0.0 || self.lower.mean + self.lower.amplitude > 1.0 {
            return bad("curves must stay inside the image (mean ± amplitude within [0, 1])".into());
        }
        for (name, v) in [("band_intensity", self.band_intensity), ("background_intensity", self.background_intensity)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.contrast_gamma > 0.0 && self.contrast_gamma.is_finite()) {
            return bad(format!("contrast_gamma must be > 0, got {}", self.contrast_gamma));
        }
        let s = self.noise.strength();
        if !(s >= 0.0 && s.is_finite()) {
            return bad(format!("noise strength must be >= 0, got {s}"));
        }
        Ok(())
    }

    pub fn sample_id(&self, index: usize) -> String {
        format!("{}_{index:05}", self.domain)
    }
}

/// A grayscale image with optional mask and its domain tag.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub domain: Domain,
    pub image: GrayImage,
    pub mask: Option<Mask>,
}

/// Per-column boundary positions in (fractional) rows.
#[derive(Clone, Debug, PartialEq)]
pub struct BandCurves {
    pub upper: Vec<f64>,
    pub lower: Vec<f64>,
}

fn draw_curve(c: &CurveSpec, width: usize, height: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (1..=c.harmonics)
        .map(|k| rng.gen_range(-1.0..=1.0) * (k as f64).powf(-c.coef_scale))
        .collect();
    let phases: Vec<f64> = (0..c.harmonics).map(|_| rng.gen_range(0.0..TAU)).collect();
    let norm: f64 = raw.iter().map(|v| v.abs()).sum();
    (0..width)
        .map(|x| {
            let t = (x as f64 + 0.5) / width as f64;
            let dev = if norm > 0.0 {
                raw.iter()
                    .zip(&phases)
                    .enumerate()
                    .map(|(i, (a, p))| a / norm * (TAU * (i + 1) as f64 * t + p).sin())
                    .sum::<f64>()
            } else {
                0.0
            };
            height as f64 * (c.mean + c.amplitude * dev)
        })
        .collect()
}

fn sample_rng(spec: &DomainSpec, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    rng
}

/// Boundary curves of sample `index`.
pub fn generate_curves(spec: &DomainSpec, index: usize) -> Result<BandCurves> {
    spec.validate()?;
    let mut rng = sample_rng(spec, index);
    Ok(curves_from(spec, &mut rng))
}

fn curves_from(spec: &DomainSpec, rng: &mut ChaCha8Rng) -> BandCurves {
    let upper = draw_curve(&spec.upper, spec.width, spec.height, rng);
    let lower = draw_curve(&spec.lower, spec.width, spec.height, rng);
    BandCurves { upper, lower }
}

/// Deterministic sample `index` of the domain.
pub fn generate_sample(spec: &DomainSpec, index: usize) -> Result<ImageSample> {
    spec.validate()?;
    let mut rng = sample_rng(spec, index);
    let curves = curves_from(spec, &mut rng);
    let (w, h) = (spec.width, spec.height);
    let mut mask = Mask::new(w, h);
    for x in 0..w {
        let (top, bottom) = (curves.upper[x], curves.lower[x]);
        for y in 0..h {
            let r = y as f64;
            if top <= r && r < bottom {
                mask.set(x, y, true);
            }
        }
    }
    let band = spec.band_intensity.powf(spec.contrast_gamma);
    let background = spec.background_intensity.powf(spec.contrast_gamma);
    let noisy = spec.noise.strength() > 0.0;
    let data = mask
        .data
        .iter()
        .map(|&m| {
            let v = if m != 0 { band } else { background };
            let v = if noisy {
                let n: f64 = StandardNormal.sample(&mut rng);
                spec.noise.apply(v, n)
            } else {
                v
            };
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok(ImageSample {
        id: spec.sample_id(index),
        domain: spec.domain,
        image: GrayImage { width: w, height: h, data },
        mask: Some(mask),
    })
}

/// Header line of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub count: usize,
    pub spec: DomainSpec,
}

/// One record per generated sample, paths relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub path: PathBuf,
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_FORMAT: &str = "paaa-dataset";

impl Manifest {
    /// Reads a manifest written by [`generate_dataset`].
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let decode = |line: &str, what: &str| Error::Decode {
            path: path.to_path_buf(),
            message: format!("bad {what} record: {line}"),
        };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let first = lines.next().ok_or_else(|| decode("", "header"))?;
        let header: ManifestHeader = serde_json::from_str(first).map_err(|_| decode(first, "header"))?;
        let entries = lines
            .map(|l| serde_json::from_str(l).map_err(|_| decode(l, "sample")))
            .collect::<Result<Vec<ManifestEntry>>>()?;
        Ok(Manifest { path: path.to_path_buf(), header, entries })
    }
}

/// Writes `count` image/mask pairs plus a manifest under `destination`.
pub fn generate_dataset(spec: &DomainSpec, count: usize, destination: &Path) -> Result<Manifest> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Config("dataset count must be >= 1".into()));
    }
    let images = destination.join("images");
    let masks = destination.join("masks");
    for dir in [&images, &masks] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let entries = exec::try_map_range(count, |i| -> Result<ManifestEntry> {
        let sample = generate_sample(spec, i)?;
        let image = format!("images/{}.png", sample.id);
        let mask = format!("masks/{}.png", sample.id);
        sample.image.save_png(&destination.join(&image))?;
        sample.mask.as_ref().expect("generated samples carry masks").save_png(&destination.join(&mask))?;
        Ok(ManifestEntry { id: sample.id, image, mask, domain: spec.domain })
    })?;
    let header = ManifestHeader {
        format: MANIFEST_FORMAT.into(),
        version: 1,
        count,
        spec: spec.clone(),
    };
    let path = destination.join(MANIFEST_FILE);
    let mut out = json_line(&header);
    for e in &entries {
        out.extend(json_line(e));
    }
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&out).map_err(|e| Error::io(&path, e))?;
    Ok(Manifest { path, header, entries })
}

fn json_line<T: Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec(v).expect("manifest records serialise");
    out.push(b'\n');
    out
}
