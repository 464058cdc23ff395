//! Synthetic fundus photographs with known vessel maps.
//!
//! Real DRIVE/STARE/CHASE-DB1 images cannot ship with the crate, so tests
//! and demos use these: a bright circular field of view with an illumination
//! falloff and an optic disc, and branching vessel trees that are darker than
//! the background (most strongly in green), plus sensor noise.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::io::{write_mask, write_rgb, DatasetManifest, DatasetName, SampleRecord, SplitSpec};
use crate::pipeline::Mask;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub width: usize,
    pub height: usize,
    /// Vessel trees growing out of the optic disc.
    pub trees: usize,
    /// Width of the root vessels in pixels.
    pub root_width: f32,
    /// Standard deviation of the additive noise, in 8-bit levels.
    pub noise: f32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig { width: 128, height: 128, trees: 5, root_width: 3.0, noise: 4.0 }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticFundus {
    pub rgb: RgbImage,
    /// Vessel pixels (coverage >= 1/2).
    pub vessels: Mask,
    /// A second, slightly more generous annotation (coverage >= 0.3).
    pub vessels_alt: Mask,
    pub fov: Mask,
}

struct Canvas {
    w: usize,
    h: usize,
    /// Per-pixel vessel coverage in [0, 1].
    cover: Vec<f32>,
}

impl Canvas {
    fn stamp(&mut self, cx: f32, cy: f32, radius: f32) {
        let reach = radius + 1.0;
        let (x0, x1) = ((cx - reach).floor().max(0.0) as usize, ((cx + reach).ceil() as usize).min(self.w - 1));
        let (y0, y1) = ((cy - reach).floor().max(0.0) as usize, ((cy + reach).ceil() as usize).min(self.h - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
                let c = (radius + 0.5 - d).clamp(0.0, 1.0);
                let slot = &mut self.cover[y * self.w + x];
                *slot = slot.max(c);
            }
        }
    }
}

struct Fov {
    cx: f32,
    cy: f32,
    r: f32,
}

impl Fov {
    fn contains(&self, x: f32, y: f32) -> bool {
        (x - self.cx).powi(2) + (y - self.cy).powi(2) <= self.r * self.r
    }
}

#[allow(clippy::too_many_arguments)]
fn grow(canvas: &mut Canvas, fov: &Fov, rng: &mut ChaCha8Rng, mut x: f32, mut y: f32, mut angle: f32, width: f32, depth: usize) {
    if width < 0.9 || depth > 5 {
        return;
    }
    let length = rng.gen_range(0.25..0.6) * fov.r * (width / 4.0).sqrt().max(0.4);
    let mut travelled = 0.0;
    let mut next_branch = rng.gen_range(0.3..0.7) * length;
    while travelled < length {
        canvas.stamp(x, y, width / 2.0);
        angle += rng.gen_range(-0.12..0.12);
        x += angle.cos();
        y += angle.sin();
        travelled += 1.0;
        if !fov.contains(x, y) {
            return;
        }
        if travelled >= next_branch {
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let turn = side * rng.gen_range(0.4..1.1);
            let child = width * rng.gen_range(0.55..0.75);
            grow(canvas, fov, rng, x, y, angle + turn, child, depth + 1);
            next_branch += rng.gen_range(0.5..0.9) * length;
        }
    }
    // Carry on past the end, a little thinner.
    grow(canvas, fov, rng, x, y, angle, width * 0.8, depth + 1);
}

/// Approximately normal noise (Irwin-Hall with 4 terms).
fn noise(rng: &mut ChaCha8Rng, sigma: f32) -> f32 {
    let s: f32 = (0..4).map(|_| rng.gen::<f32>()).sum::<f32>() - 2.0;
    s * sigma * 3f32.sqrt()
}

pub fn synthetic_fundus(config: &SyntheticConfig, seed: u64) -> SyntheticFundus {
    let (w, h) = (config.width, config.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fov = Fov { cx: (w as f32 - 1.0) / 2.0, cy: (h as f32 - 1.0) / 2.0, r: 0.47 * w.min(h) as f32 };
    let disc_angle = rng.gen_range(-0.4f32..0.4) + if rng.gen_bool(0.5) { 0.0 } else { std::f32::consts::PI };
    let disc = (fov.cx + 0.55 * fov.r * disc_angle.cos(), fov.cy + 0.55 * fov.r * disc_angle.sin());
    let disc_r = 0.1 * fov.r;

    let mut canvas = Canvas { w, h, cover: vec![0.0; w * h] };
    for t in 0..config.trees {
        // Trees leave the disc towards the centre of the field, fanned out.
        let towards = (fov.cy - disc.1).atan2(fov.cx - disc.0);
        let fan = (t as f32 + 0.5) / config.trees as f32 - 0.5;
        let angle = towards + fan * 4.0 + rng.gen_range(-0.2..0.2);
        let width = config.root_width * rng.gen_range(0.8..1.1);
        grow(&mut canvas, &fov, &mut rng, disc.0, disc.1, angle, width, 0);
    }

    let mut rgb = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f32, y as f32);
            let px = if fov.contains(fx, fy) {
                let rr = ((fx - fov.cx).powi(2) + (fy - fov.cy).powi(2)).sqrt() / fov.r;
                let light = 1.0 - 0.35 * rr * rr;
                let dd = ((fx - disc.0).powi(2) + (fy - disc.1).powi(2)).sqrt() / disc_r;
                let glow = (-dd * dd).exp() * 0.6;
                let v = canvas.cover[y * w + x];
                let base = [200.0 * light, 95.0 * light, 35.0 * light];
                let dark = [0.25 * v, 0.55 * v, 0.35 * v];
                let mut c = [0u8; 3];
                for ch in 0..3 {
                    let lit = base[ch] * (1.0 + glow) * (1.0 - dark[ch]);
                    c[ch] = (lit + noise(&mut rng, config.noise)).round().clamp(0.0, 255.0) as u8;
                }
                Rgb(c)
            } else {
                let n = noise(&mut rng, 1.5).abs();
                Rgb([n as u8 + 2, n as u8 + 1, n as u8])
            };
            rgb.put_pixel(x as u32, y as u32, px);
        }
    }
    let inside = |x: usize, y: usize| fov.contains(x as f32, y as f32);
    SyntheticFundus {
        rgb,
        vessels: Mask::from_fn(w, h, |x, y| inside(x, y) && canvas.cover[y * w + x] >= 0.5),
        vessels_alt: Mask::from_fn(w, h, |x, y| inside(x, y) && canvas.cover[y * w + x] >= 0.3),
        fov: Mask::from_fn(w, h, inside),
    }
}

/// Write `count` synthetic samples (PNG image, two annotations, FOV) and a
/// manifest into `dir`; returns the manifest path.
pub fn write_synthetic_dataset(
    dir: &Path,
    name: DatasetName,
    count: usize,
    split: SplitSpec,
    config: &SyntheticConfig,
    seed: u64,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("{:02}", i + 1);
        let s = synthetic_fundus(config, seed.wrapping_add(i as u64));
        let rec = SampleRecord {
            id: id.clone(),
            image: format!("{id}_image.png").into(),
            gt1: format!("{id}_gt1.png").into(),
            gt2: Some(format!("{id}_gt2.png").into()),
            fov: Some(format!("{id}_fov.png").into()),
        };
        write_rgb(&dir.join(&rec.image), &s.rgb)?;
        write_mask(&dir.join(&rec.gt1), &s.vessels)?;
        write_mask(&dir.join(rec.gt2.as_ref().expect("set above")), &s.vessels_alt)?;
        write_mask(&dir.join(rec.fov.as_ref().expect("set above")), &s.fov)?;
        samples.push(rec);
    }
    let manifest = DatasetManifest { name, samples, split, root: dir.to_path_buf() };
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::generate_fov_mask;

    #[test]
    fn deterministic_and_seed_dependent() {
        let c = SyntheticConfig::default();
        let a = synthetic_fundus(&c, 1);
        assert_eq!(a.rgb, synthetic_fundus(&c, 1).rgb);
        assert_ne!(a.rgb, synthetic_fundus(&c, 2).rgb);
    }

    #[test]
    fn plausible_vessel_fraction() {
        let s = synthetic_fundus(&SyntheticConfig::default(), 7);
        let frac = s.vessels.count() as f64 / s.fov.count() as f64;
        assert!((0.04..0.30).contains(&frac), "vessel fraction {frac}");
        assert!(s.vessels_alt.count() >= s.vessels.count());
    }

    #[test]
    fn generated_fov_matches_the_disk() {
        let s = synthetic_fundus(&SyntheticConfig::default(), 3);
        let m = generate_fov_mask(&s.rgb, 30.0 / 255.0).unwrap();
        let differ = m.data().iter().zip(s.fov.data()).filter(|(a, b)| a != b).count();
        assert!(differ < s.fov.count() / 50, "{differ} pixels differ");
    }
}
