//! Contrast-limited adaptive histogram equalization.
//!
//! The image is split into a `tiles_x x tiles_y` grid of near-equal tiles
//! (tile `i` spans `[i*len/tiles, (i+1)*len/tiles)`). Each tile gets a
//! clipped-histogram equalization lookup table; every pixel blends the tables
//! of the (up to) four tiles whose centers surround it.

use serde::{Deserialize, Serialize};

use super::image::GrayImage;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClaheParams {
    /// Clip limit as a multiple of the uniform bin height.
    pub clip: f32,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub bins: usize,
}

impl Default for ClaheParams {
    fn default() -> Self {
        ClaheParams { clip: 2.0, tiles_x: 8, tiles_y: 8, bins: 256 }
    }
}

impl ClaheParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Error::Config(format!("CLAHE clip limit must be positive, got {}", self.clip)));
        }
        if self.tiles_x == 0 || self.tiles_y == 0 {
            return Err(Error::Config("CLAHE tile grid must be at least 1x1".into()));
        }
        if self.bins < 2 {
            return Err(Error::Config(format!("CLAHE needs at least 2 histogram bins, got {}", self.bins)));
        }
        Ok(())
    }

    /// Histogram bin of a value in [0, 1].
    pub fn bin(&self, v: f32) -> usize {
        (v.clamp(0.0, 1.0) * (self.bins - 1) as f32).round() as usize
    }
}

/// Tile `i` of `tiles` over a length-`len` axis.
pub(crate) fn tile_span(i: usize, tiles: usize, len: usize) -> (usize, usize) {
    (i * len / tiles, (i + 1) * len / tiles)
}

/// Equalization table for one tile's histogram.
pub(crate) fn clipped_lut(hist: &[u32], clip: f32) -> Vec<f32> {
    let bins = hist.len();
    let total: u64 = hist.iter().map(|&h| u64::from(h)).sum();
    if total == 0 {
        return vec![0.0; bins];
    }
    // Work in fractions of the tile so equal distributions give equal tables
    // regardless of tile size.
    let limit = f64::from(clip) / bins as f64;
    let frac = |h: u32| f64::from(h) / total as f64;
    let excess: f64 = hist.iter().map(|&h| (frac(h) - limit).max(0.0)).sum();
    let share = excess / bins as f64;
    let mut acc = 0.0;
    hist.iter()
        .map(|&h| {
            acc += frac(h).min(limit) + share;
            acc.min(1.0) as f32
        })
        .collect()
}

/// Interpolation anchors along one axis: for each coordinate, the lower
/// tile index, the upper tile index and the weight of the upper one.
fn anchors(len: usize, tiles: usize) -> Vec<(usize, usize, f32)> {
    let centers: Vec<f32> = (0..tiles)
        .map(|i| {
            let (a, b) = tile_span(i, tiles, len);
            (a + b) as f32 / 2.0 - 0.5
        })
        .collect();
    (0..len)
        .map(|p| {
            let p = p as f32;
            if p <= centers[0] {
                return (0, 0, 0.0);
            }
            if p >= centers[tiles - 1] {
                return (tiles - 1, tiles - 1, 0.0);
            }
            let i = centers.partition_point(|&c| c <= p) - 1;
            let t = (p - centers[i]) / (centers[i + 1] - centers[i]);
            (i, i + 1, t)
        })
        .collect()
}

/// Exact when `a == b`.
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

pub fn clahe(img: &GrayImage, params: &ClaheParams) -> Result<GrayImage> {
    params.validate()?;
    let (h, w) = img.dims();
    if params.tiles_x > w || params.tiles_y > h {
        return Err(Error::Config(format!(
            "CLAHE grid {}x{} is larger than the {}x{} image",
            params.tiles_x, params.tiles_y, w, h
        )));
    }
    let bins: Vec<usize> = img.data().iter().map(|&v| params.bin(v)).collect();
    let mut luts = Vec::with_capacity(params.tiles_x * params.tiles_y);
    for ty in 0..params.tiles_y {
        let (y0, y1) = tile_span(ty, params.tiles_y, h);
        for tx in 0..params.tiles_x {
            let (x0, x1) = tile_span(tx, params.tiles_x, w);
            let mut hist = vec![0u32; params.bins];
            for y in y0..y1 {
                for &b in &bins[y * w + x0..y * w + x1] {
                    hist[b] += 1;
                }
            }
            luts.push(clipped_lut(&hist, params.clip));
        }
    }
    let lut = |tx: usize, ty: usize, b: usize| luts[ty * params.tiles_x + tx][b];
    let ax = anchors(w, params.tiles_x);
    let ay = anchors(h, params.tiles_y);
    let mut out = Vec::with_capacity(w * h);
    for (y, &(y0, y1, fy)) in ay.iter().enumerate() {
        for (x, &(x0, x1, fx)) in ax.iter().enumerate() {
            let b = bins[y * w + x];
            let top = lerp(lut(x0, y0, b), lut(x1, y0, b), fx);
            let bottom = lerp(lut(x0, y1, b), lut(x1, y1, b), fx);
            out.push(lerp(top, bottom, fy).clamp(0.0, 1.0));
        }
    }
    GrayImage::new(w, h, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_stays_constant() {
        let img = GrayImage::filled(40, 30, 0.4);
        let out = clahe(&img, &ClaheParams::default()).unwrap();
        let first = out.get(0, 0);
        assert!(out.data().iter().all(|&v| v == first));
        assert!((0.0..=1.0).contains(&first));
    }

    #[test]
    fn grid_larger_than_image_is_rejected() {
        let img = GrayImage::filled(6, 20, 0.5);
        assert!(matches!(clahe(&img, &ClaheParams::default()), Err(Error::Config(_))));
    }

    #[test]
    fn uniform_histogram_is_left_alone() {
        // One tile holding each bin exactly once: the LUT is the identity ramp.
        let hist = vec![1u32; 8];
        let lut = clipped_lut(&hist, 2.0);
        for (i, v) in lut.iter().enumerate() {
            assert!((v - (i + 1) as f32 / 8.0).abs() < 1e-6);
        }
    }

    #[test]
    fn clipping_redistributes_excess() {
        // 16 samples in one of 4 bins, clip 2 => limit 8, excess 8 spread as 2 per bin.
        let lut = clipped_lut(&[0, 16, 0, 0], 2.0);
        let expect = [2.0 / 16.0, 12.0 / 16.0, 14.0 / 16.0, 1.0];
        for (a, b) in lut.iter().zip(expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn tiles_cover_the_axis() {
        for len in [8, 9, 17, 565] {
            let mut next = 0;
            for i in 0..8 {
                let (a, b) = tile_span(i, 8, len);
                assert_eq!(a, next);
                assert!(b > a);
                next = b;
            }
            assert_eq!(next, len);
        }
    }
}
