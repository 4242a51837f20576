//! Evaluation metrics: Dice similarity coefficient and normalized surface
//! Dice on binary 2D masks.
//!
//! Conventions (frozen):
//! - Boundary pixels are mask pixels with at least one 4-neighbour outside the
//!   mask or outside the image.
//! - Distances are Euclidean between pixel centres, tolerance in pixels.
//! - Both masks empty scores 1.0; exactly one empty scores 0.0.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::unet::Model;

/// Default surface tolerance, in pixels.
pub const DEFAULT_NSD_TOLERANCE: f64 = 1.0;

/// Binary 2D mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape("mask", "length", height * width, bits.len()));
        }
        Ok(Self { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    /// Pixels equal to `class` in a label map.
    pub fn from_labels(height: usize, width: usize, labels: &[u8], class: u8) -> Result<Self> {
        Self::new(height, width, labels.iter().map(|&l| l == class).collect())
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.bits[y * self.width + x] = on;
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Mask pixels touching background or the image border (4-connectivity).
    pub fn boundary(&self) -> Mask {
        let mut out = Mask::empty(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(y, x) {
                    continue;
                }
                let edge = y == 0
                    || x == 0
                    || y + 1 == self.height
                    || x + 1 == self.width
                    || !self.get(y - 1, x)
                    || !self.get(y + 1, x)
                    || !self.get(y, x - 1)
                    || !self.get(y, x + 1);
                out.set(y, x, edge);
            }
        }
        out
    }

    fn check_same(&self, other: &Mask, op: &'static str) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape(
                op,
                "mask extent",
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        Ok(())
    }
}

/// `2|A∩B| / (|A|+|B|)`; 1.0 when both are empty.
pub fn dsc(pred: &Mask, gt: &Mask) -> Result<f64> {
    pred.check_same(gt, "dsc")?;
    let (a, b) = (pred.count(), gt.count());
    if a + b == 0 {
        return Ok(1.0);
    }
    let inter = pred.bits.iter().zip(&gt.bits).filter(|(p, g)| **p && **g).count();
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Normalized surface Dice at tolerance `tol` pixels.
pub fn nsd(pred: &Mask, gt: &Mask, tol: f64) -> Result<f64> {
    pred.check_same(gt, "nsd")?;
    if !(tol >= 0.0) {
        return Err(Error::Config(format!("nsd tolerance must be non-negative, got {tol}")));
    }
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let (ba, bb) = (pred.boundary(), gt.boundary());
    let (da, db) = (squared_distance_to(&ba), squared_distance_to(&bb));
    let tol2 = tol * tol;
    let near = |boundary: &Mask, dist: &[f64]| {
        boundary
            .bits
            .iter()
            .zip(dist)
            .filter(|(on, d)| **on && **d <= tol2)
            .count()
    };
    let hits = near(&ba, &db) + near(&bb, &da);
    Ok(hits as f64 / (ba.count() + bb.count()) as f64)
}

const FAR: f64 = 1e20;

/// Exact squared Euclidean distance from every pixel to the nearest set pixel
/// of `target` (separable lower-envelope transform).
fn squared_distance_to(target: &Mask) -> Vec<f64> {
    let (h, w) = (target.height, target.width);
    let mut grid: Vec<f64> = target.bits.iter().map(|&b| if b { 0.0 } else { FAR }).collect();
    let mut buf = vec![0.0; h.max(w)];
    for y in 0..h {
        let row = &mut grid[y * w..(y + 1) * w];
        buf[..w].copy_from_slice(row);
        envelope_1d(&buf[..w], row);
    }
    let mut col = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            buf[y] = grid[y * w + x];
        }
        envelope_1d(&buf[..h], &mut col);
        for y in 0..h {
            grid[y * w + x] = col[y];
        }
    }
    grid
}

fn envelope_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let parabola = |q: usize| f[q] + (q * q) as f64;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = (parabola(q) - parabola(p)) / (2.0 * (q - p) as f64);
            // z[0] is -inf, so this never underflows k.
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Per-case scores with mean and sample standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dsc: Vec<f64>,
    pub nsd: Vec<f64>,
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub nsd_mean: f64,
    pub nsd_std: f64,
}

/// Mean and sample (n − 1) standard deviation; std is 0 for fewer than two values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl MetricsReport {
    pub fn from_cases(dsc: Vec<f64>, nsd: Vec<f64>) -> Self {
        let (dsc_mean, dsc_std) = mean_std(&dsc);
        let (nsd_mean, nsd_std) = mean_std(&nsd);
        Self {
            dsc,
            nsd,
            dsc_mean,
            dsc_std,
            nsd_mean,
            nsd_std,
        }
    }

    /// Pools the per-case values of several reports.
    pub fn pooled<'a>(reports: impl IntoIterator<Item = &'a MetricsReport>) -> Self {
        let (mut d, mut n) = (Vec::new(), Vec::new());
        for r in reports {
            d.extend_from_slice(&r.dsc);
            n.extend_from_slice(&r.nsd);
        }
        Self::from_cases(d, n)
    }
}

/// Foreground mask (any non-background class) from the per-pixel argmax of
/// `[C, H, W]` logits. Ties go to the lowest class index.
pub fn argmax_foreground(logits: &Tensor) -> Result<Mask> {
    if logits.rank() != 3 {
        return Err(Error::shape("argmax_foreground", "logits rank", 3, logits.rank()));
    }
    let (c, h, w) = (logits.dim(0), logits.dim(1), logits.dim(2));
    let hw = h * w;
    let z = logits.data();
    let bits = (0..hw)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if z[k * hw + p] > z[best * hw + p] {
                    best = k;
                }
            }
            best != 0
        })
        .collect();
    Mask::new(h, w, bits)
}

/// Predicted-vs-ground-truth foreground scores for one case.
pub fn score_prediction(pred: &Mask, label: &[u8], tol: f64) -> Result<(f64, f64)> {
    let gt = Mask::new(pred.height(), pred.width(), label.iter().map(|&l| l != 0).collect())?;
    Ok((dsc(pred, &gt)?, nsd(pred, &gt, tol)?))
}

/// Runs the model on one sample and scores the argmax foreground against the
/// label at the default tolerance.
pub fn evaluate_case(model: &Model, sample: &SegSample) -> Result<(f64, f64)> {
    evaluate_case_with_tolerance(model, sample, DEFAULT_NSD_TOLERANCE)
}

pub fn evaluate_case_with_tolerance(model: &Model, sample: &SegSample, tol: f64) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let batch = Tensor::stack(std::slice::from_ref(&sample.image))?;
    let logits = model.forward(&batch, &mut tape)?;
    let pred = argmax_foreground(&tape.value(logits).slice_outer(0))?;
    score_prediction(&pred, &sample.label, tol)
}

/// Scores every case of a test set.
pub fn evaluate(model: &Model, samples: &[SegSample]) -> Result<MetricsReport> {
    let mut d = Vec::with_capacity(samples.len());
    let mut n = Vec::with_capacity(samples.len());
    for s in samples {
        let (a, b) = evaluate_case(model, s)?;
        d.push(a);
        n.push(b);
    }
    Ok(MetricsReport::from_cases(d, n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(h: usize, w: usize, top: usize, left: usize, size: usize) -> Mask {
        let mut m = Mask::empty(h, w);
        for y in top..top + size {
            for x in left..left + size {
                m.set(y, x, true);
            }
        }
        m
    }

    #[test]
    fn dsc_cases() {
        let a = square(8, 8, 1, 1, 3);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &square(8, 8, 5, 5, 2)).unwrap(), 0.0);
        let e = Mask::empty(8, 8);
        assert_eq!(dsc(&e, &e).unwrap(), 1.0);
        assert_eq!(dsc(&a, &e).unwrap(), 0.0);
        // |A| = |B| = 4, overlap 2.
        let a = square(4, 4, 0, 0, 2);
        let b = square(4, 4, 0, 1, 2);
        assert_eq!(dsc(&a, &b).unwrap(), 0.5);
        assert!(dsc(&a, &Mask::empty(3, 4)).is_err());
    }

    #[test]
    fn nsd_empty_conventions() {
        let e = Mask::empty(6, 6);
        let a = square(6, 6, 1, 1, 2);
        assert_eq!(nsd(&e, &e, 1.0).unwrap(), 1.0);
        assert_eq!(nsd(&a, &e, 1.0).unwrap(), 0.0);
        assert_eq!(nsd(&e, &a, 1.0).unwrap(), 0.0);
        assert!(nsd(&a, &a, -1.0).is_err());
    }

    #[test]
    fn boundary_of_filled_square_is_its_ring() {
        let b = square(10, 10, 2, 2, 5).boundary();
        assert_eq!(b.count(), 16);
        assert!(!b.get(4, 4));
        // Mask touching the image border counts the border pixels as boundary.
        let full = square(3, 3, 0, 0, 3).boundary();
        assert_eq!(full.count(), 8);
    }

    #[test]
    fn distance_transform_single_point() {
        let mut m = Mask::empty(5, 7);
        m.set(2, 3, true);
        let d = squared_distance_to(&m);
        for y in 0..5 {
            for x in 0..7 {
                let e = (y as f64 - 2.0).powi(2) + (x as f64 - 3.0).powi(2);
                assert_eq!(d[y * 7 + x], e);
            }
        }
    }

    #[test]
    fn far_squares_have_zero_nsd() {
        let a = square(40, 40, 2, 2, 3);
        let b = square(40, 40, 2, 25, 3);
        assert_eq!(nsd(&a, &b, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn sample_std_convention() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
    }
}
