//! Segmentation quality metrics: IOU on the foreground class, AUSDE on the
//! lower band boundary, and the gap to a supervised reference.

use crate::error::{Error, Result};
use crate::exec;
use crate::raster::Mask;
use serde::{Deserialize, Serialize};
use std::path::Path;

fn same_shape(a: &Mask, b: &Mask) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Shape(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// |pred ∧ ref| / |pred ∨ ref|, 1.0 when both are empty.
pub fn iou(pred: &Mask, reference: &Mask) -> Result<f64> {
    same_shape(pred, reference)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &r) in pred.data.iter().zip(&reference.data) {
        let (p, r) = (p != 0, r != 0);
        inter += (p && r) as usize;
        union += (p || r) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Lowest foreground row of each column.
pub fn lower_boundary(mask: &Mask) -> Vec<Option<usize>> {
    let mut out = vec![None; mask.width];
    for (y, row) in mask.data.chunks_exact(mask.width).enumerate() {
        for (x, &v) in row.iter().enumerate() {
            if v != 0 {
                out[x] = Some(y);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ausde {
    /// Mean absolute row distance in pixels.
    pub value: f64,
    /// Columns where neither mask has a boundary; excluded from the mean.
    pub skipped: usize,
}

/// Mean per-column distance between lower boundaries. A column where only
/// one mask has a boundary costs the image height. If every column is
/// skipped the error is 0.
pub fn ausde(pred: &Mask, reference: &Mask) -> Result<Ausde> {
    same_shape(pred, reference)?;
    let (bp, br) = (lower_boundary(pred), lower_boundary(reference));
    let (mut sum, mut counted, mut skipped) = (0usize, 0usize, 0usize);
    for (p, r) in bp.into_iter().zip(br) {
        match (p, r) {
            (Some(p), Some(r)) => sum += p.abs_diff(r),
            (None, None) => {
                skipped += 1;
                continue;
            }
            _ => sum += pred.height,
        }
        counted += 1;
    }
    let value = if counted == 0 { 0.0 } else { sum as f64 / counted as f64 };
    Ok(Ausde { value, skipped })
}

/// Absolute difference between a model's metric and the oracle's.
pub fn gap(model_value: f64, oracle_value: f64) -> f64 {
    (model_value - oracle_value).abs()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub iou: f64,
    pub ausde: f64,
    pub skipped_columns: usize,
}

/// Aggregate over a dataset: the means of the per-image values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub iou: f64,
    pub ausde: f64,
    pub images: usize,
    pub skipped_columns: usize,
    /// AUSDE gap to the oracle, in pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap_ausde: Option<f64>,
    /// IOU gap to the oracle, in percentage points.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap_iou: Option<f64>,
    pub per_image: Vec<ImageMetrics>,
}

impl MetricReport {
    /// Scores `(id, prediction, reference)` triples.
    pub fn from_masks(items: &[(String, Mask, Mask)]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Config("cannot build a metric report from zero images".into()));
        }
        let per_image = exec::try_map_range(items.len(), |i| {
            let (id, pred, reference) = &items[i];
            let a = ausde(pred, reference)?;
            Ok::<_, Error>(ImageMetrics { id: id.clone(), iou: iou(pred, reference)?, ausde: a.value, skipped_columns: a.skipped })
        })?;
        Ok(Self::from_per_image(per_image))
    }

    pub fn from_per_image(per_image: Vec<ImageMetrics>) -> Self {
        let n = per_image.len().max(1) as f64;
        MetricReport {
            iou: per_image.iter().map(|m| m.iou).sum::<f64>() / n,
            ausde: per_image.iter().map(|m| m.ausde).sum::<f64>() / n,
            images: per_image.len(),
            skipped_columns: per_image.iter().map(|m| m.skipped_columns).sum(),
            gap_ausde: None,
            gap_iou: None,
            per_image,
        }
    }

    /// Fills the GAP fields against an oracle report.
    pub fn with_oracle(mut self, oracle: &MetricReport) -> Self {
        self.gap_ausde = Some(gap(self.ausde, oracle.ausde));
        self.gap_iou = Some(gap(100.0 * self.iou, 100.0 * oracle.iou));
        self
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Decode { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn block(w: usize, h: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Mask {
        let mut m = Mask::new(w, h);
        for y in rows {
            for x in cols.clone() {
                m.set(x, y, true);
            }
        }
        m
    }

    fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, density: f64) -> Mask {
        let mut m = Mask::new(w, h);
        for y in 0..h {
            for x in 0..w {
                m.set(x, y, rng.gen_bool(density));
            }
        }
        m
    }

    fn brute_iou(a: &Mask, b: &Mask) -> f64 {
        let (mut i, mut u) = (0, 0);
        for y in 0..a.height {
            for x in 0..a.width {
                if a.get(x, y) && b.get(x, y) {
                    i += 1;
                }
                if a.get(x, y) || b.get(x, y) {
                    u += 1;
                }
            }
        }
        if u == 0 {
            1.0
        } else {
            i as f64 / u as f64
        }
    }

    fn brute_boundary(m: &Mask, x: usize) -> Option<usize> {
        (0..m.height).rev().find(|&y| m.get(x, y))
    }

    fn brute_ausde(a: &Mask, b: &Mask) -> (f64, usize) {
        let mut errs = Vec::new();
        let mut skipped = 0;
        for x in 0..a.width {
            match (brute_boundary(a, x), brute_boundary(b, x)) {
                (None, None) => skipped += 1,
                (Some(p), Some(r)) => errs.push((p as f64 - r as f64).abs()),
                _ => errs.push(a.height as f64),
            }
        }
        let v = if errs.is_empty() { 0.0 } else { errs.iter().sum::<f64>() / errs.len() as f64 };
        (v, skipped)
    }

    #[test]
    fn iou_examples() {
        let a = block(8, 8, 2..6, 1..5);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &block(8, 8, 2..6, 5..8)).unwrap(), 0.0);
        let p = block(4, 4, 0..2, 0..2);
        let r = block(4, 4, 0..2, 1..3);
        assert!((iou(&p, &r).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&Mask::new(3, 3), &Mask::new(3, 3)).unwrap(), 1.0);
        assert!(iou(&Mask::new(3, 3), &Mask::new(3, 4)).is_err());
    }

    #[test]
    fn boundary_examples() {
        let band = block(12, 32, 10..21, 0..12);
        assert!(lower_boundary(&band).iter().all(|&b| b == Some(20)));
        assert!(lower_boundary(&Mask::new(5, 5)).iter().all(Option::is_none));
    }

    #[test]
    fn ausde_examples() {
        let r = block(16, 32, 5..15, 0..16);
        assert_eq!(ausde(&r, &r).unwrap().value, 0.0);
        let shifted = block(16, 32, 8..18, 0..16);
        assert_eq!(ausde(&shifted, &r).unwrap().value, 3.0);
        let full = block(20, 64, 10..30, 0..20);
        let a = ausde(&Mask::new(20, 64), &full).unwrap();
        assert_eq!(a.value, 64.0);
        assert_eq!(a.skipped, 0);
        let partial = block(10, 8, 2..4, 0..6);
        let a = ausde(&partial, &partial).unwrap();
        assert_eq!((a.value, a.skipped), (0.0, 4));
    }

    #[test]
    fn table_gap_arithmetic() {
        assert!((gap(3.21, 2.65) - 0.56).abs() < 1e-12);
        assert!((gap(85.77, 89.30) - 3.53).abs() < 1e-12);
        assert_eq!(gap(7.5, 7.5), 0.0);
        assert_eq!(gap(2.0, 5.0), gap(5.0, 2.0));
    }

    #[test]
    fn kernels_match_brute_force_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(200);
        for _ in 0..200 {
            let d1 = rng.gen_range(0.0..1.0);
            let d2 = rng.gen_range(0.0..1.0);
            let a = random_mask(&mut rng, 16, 16, d1);
            let b = random_mask(&mut rng, 16, 16, d2);
            assert_eq!(iou(&a, &b).unwrap(), brute_iou(&a, &b));
            let got = ausde(&a, &b).unwrap();
            assert_eq!((got.value, got.skipped), brute_ausde(&a, &b));
            let lb = lower_boundary(&a);
            for (x, &got) in lb.iter().enumerate() {
                assert_eq!(got, brute_boundary(&a, x));
            }
        }
    }

    #[test]
    fn report_aggregates_and_gaps() {
        let r = block(16, 32, 5..15, 0..16);
        let s = block(16, 32, 8..18, 0..16);
        let items = vec![("a".to_string(), r.clone(), r.clone()), ("b".to_string(), s, r)];
        let rep = MetricReport::from_masks(&items).unwrap();
        assert_eq!(rep.images, 2);
        assert!((rep.ausde - 1.5).abs() < 1e-12);
        assert!(rep.gap_iou.is_none());
        let self_gap = rep.clone().with_oracle(&rep);
        assert_eq!(self_gap.gap_iou, Some(0.0));
        assert_eq!(self_gap.gap_ausde, Some(0.0));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        self_gap.save(&p).unwrap();
        assert_eq!(MetricReport::load(&p).unwrap(), self_gap);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn iou_is_symmetric(seed in any::<u64>(), w in 1usize..12, h in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_mask(&mut rng, w, h, 0.4);
            let b = random_mask(&mut rng, w, h, 0.4);
            prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
        }

        #[test]
        fn fixing_a_pixel_never_lowers_iou(seed in any::<u64>(), w in 1usize..12, h in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_mask(&mut rng, w, h, 0.5);
            let r = random_mask(&mut rng, w, h, 0.5);
            let wrong: Vec<usize> = (0..w * h).filter(|&i| p.data[i] != r.data[i]).collect();
            prop_assume!(!wrong.is_empty());
            let i = wrong[rng.gen_range(0..wrong.len())];
            let mut fixed = p.clone();
            fixed.data[i] = r.data[i];
            prop_assert!(iou(&fixed, &r).unwrap() >= iou(&p, &r).unwrap());
        }

        #[test]
        fn uniform_shift_gives_its_size(top in 0usize..20, len in 1usize..20, k in 0usize..20, w in 1usize..16) {
            let h = 64;
            prop_assume!(top + len + k <= h);
            let r = block(w, h, top..top + len, 0..w);
            let p = block(w, h, top + k..top + len + k, 0..w);
            prop_assert_eq!(ausde(&p, &r).unwrap().value, k as f64);
            prop_assert_eq!(ausde(&r, &p).unwrap().value, k as f64);
        }
    }
}
