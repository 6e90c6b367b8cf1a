//! Plain grayscale rasters and binary masks, with PNG I/O and the two
//! resampling kernels used by preprocessing.

use crate::error::{Error, Result};
use std::path::Path;

/// Row-major grayscale image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

/// Row-major binary mask: 0 background, 1 foreground.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, fill: f32) -> Self {
        GrayImage { width, height, data: vec![fill; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Bilinear resampling with half-pixel centres.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> GrayImage {
        let xs = sample_positions(self.width, width);
        let ys = sample_positions(self.height, height);
        let mut out = Vec::with_capacity(width * height);
        for &(y0, y1, wy) in &ys {
            let r0 = &self.data[y0 * self.width..(y0 + 1) * self.width];
            let r1 = &self.data[y1 * self.width..(y1 + 1) * self.width];
            for &(x0, x1, wx) in &xs {
                let top = lerp(r0[x0], r0[x1], wx);
                let bottom = lerp(r1[x0], r1[x1], wx);
                out.push(lerp(top, bottom, wy));
            }
        }
        GrayImage { width, height, data: out }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        save_gray(path, self.width, self.height, bytes)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let (width, height, bytes) = load_gray(path)?;
        Ok(GrayImage { width, height, data: bytes.into_iter().map(|b| b as f32 / 255.0).collect() })
    }
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

/// Source index sampled by nearest-neighbour resizing from `src` to `dst`.
pub fn nearest_index(d: usize, src: usize, dst: usize) -> usize {
    (((2 * d + 1) * src) / (2 * dst)).min(src - 1)
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask { width, height, data: vec![0; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn resize_nearest(&self, width: usize, height: usize) -> Mask {
        let mut out = Mask::new(width, height);
        for y in 0..height {
            let sy = nearest_index(y, self.height, height);
            for x in 0..width {
                let sx = nearest_index(x, self.width, width);
                out.data[y * width + x] = self.data[sy * self.width + sx];
            }
        }
        out
    }

    /// Foreground rows of column `x` form a single contiguous run (or none).
    pub fn column_is_contiguous(&self, x: usize) -> bool {
        let mut runs = 0;
        let mut prev = false;
        for y in 0..self.height {
            let on = self.get(x, y);
            if on && !prev {
                runs += 1;
            }
            prev = on;
        }
        runs <= 1
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
        save_gray(path, self.width, self.height, bytes)
    }

    /// Decodes an 8-bit mask; values >= 128 are foreground.
    pub fn load_png(path: &Path) -> Result<Self> {
        let (width, height, bytes) = load_gray(path)?;
        Ok(Mask { width, height, data: bytes.into_iter().map(|b| (b >= 128) as u8).collect() })
    }
}

/// First and last foreground row of each column.
pub fn band_edges(mask: &Mask) -> Vec<Option<(usize, usize)>> {
    (0..mask.width)
        .map(|x| {
            let first = (0..mask.height).find(|&y| mask.get(x, y))?;
            let last = (0..mask.height).rev().find(|&y| mask.get(x, y))?;
            Some((first, last))
        })
        .collect()
}

/// Writes the image in gray with the band boundaries drawn over it: the
/// reference in green, the prediction in red (yellow where they agree).
pub fn save_overlay(path: &Path, image: &GrayImage, reference: Option<&Mask>, prediction: &Mask) -> Result<()> {
    let (w, h) = (image.width, image.height);
    if prediction.width != w || prediction.height != h || reference.is_some_and(|r| r.width != w || r.height != h) {
        return Err(Error::Shape(format!("overlay masks must match the {w}x{h} image")));
    }
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for (i, p) in rgb.pixels_mut().enumerate() {
        let v = (image.data[i].clamp(0.0, 1.0) * 255.0).round() as u8;
        *p = image::Rgb([v, v, v]);
    }
    let mut paint = |mask: &Mask, channel: usize| {
        for (x, edges) in band_edges(mask).into_iter().enumerate() {
            if let Some((top, bottom)) = edges {
                for y in [top, bottom] {
                    let px = rgb.get_pixel_mut(x as u32, y as u32);
                    if px[0] != px[1] || px[1] != px[2] {
                        px[channel] = 255;
                    } else {
                        *px = image::Rgb([0, 0, 0]);
                        px[channel] = 255;
                    }
                }
            }
        }
    };
    if let Some(r) = reference {
        paint(r, 1);
    }
    paint(prediction, 0);
    rgb.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Decode { path: path.to_path_buf(), message: e.to_string() })
}

fn save_gray(path: &Path, width: usize, height: usize, bytes: Vec<u8>) -> Result<()> {
    let img = image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .expect("buffer length matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn load_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode { path: path.to_path_buf(), message: other.to_string() },
    })?;
    let g = img.to_luma8();
    Ok((g.width() as usize, g.height() as usize, g.into_raw()))
}
