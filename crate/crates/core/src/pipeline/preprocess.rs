use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::clahe::{clahe, ClaheParams};
use super::image::GrayImage;
use crate::error::{Error, Result};

/// ITU-R 601 luma, scaled to [0, 1].
pub fn rgb_to_gray(rgb: &RgbImage) -> GrayImage {
    let (w, h) = rgb.dimensions();
    let data = rgb
        .pixels()
        .map(|p| {
            let [r, g, b] = p.0.map(f32::from);
            ((0.299 * r + 0.587 * g + 0.114 * b) / 255.0).clamp(0.0, 1.0)
        })
        .collect();
    GrayImage::new(w as usize, h as usize, data).expect("dimensions match pixel count")
}

/// Z-score every image with the mean and standard deviation pooled over the
/// whole list, then rescale so the pooled minimum maps to 0 and the pooled
/// maximum to 1.
pub fn normalize_dataset(images: &[GrayImage]) -> Result<Vec<GrayImage>> {
    if images.is_empty() {
        return Err(Error::Config("normalize_dataset needs at least one image".into()));
    }
    let count: usize = images.iter().map(|i| i.data().len()).sum();
    if count == 0 {
        return Err(Error::Degenerate("all images are empty".into()));
    }
    let mean = images.iter().flat_map(|i| i.data()).map(|&v| f64::from(v)).sum::<f64>() / count as f64;
    let var = images.iter().flat_map(|i| i.data()).map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / count as f64;
    let std = var.sqrt();
    if std == 0.0 || !std.is_finite() {
        return Err(Error::Degenerate("pooled standard deviation is zero (every pixel has the same value)".into()));
    }
    let (lo, hi) = images
        .iter()
        .flat_map(|i| i.data())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v.into()), hi.max(v.into())));
    let (zlo, zhi) = ((lo - mean) / std, (hi - mean) / std);
    let span = zhi - zlo;
    Ok(images
        .iter()
        .map(|img| {
            img.map(|v| {
                let z = (f64::from(v) - mean) / std;
                (((z - zlo) / span) as f32).clamp(0.0, 1.0)
            })
        })
        .collect())
}

pub fn gamma_correct(img: &GrayImage, gamma: f32) -> Result<GrayImage> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    Ok(img.map(|v| v.clamp(0.0, 1.0).powf(gamma)))
}

/// Preprocessing and patch parameters; defaults follow the published recipe
/// where it gives one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub clahe_clip: f32,
    pub clahe_tiles: usize,
    pub clahe_bins: usize,
    pub gamma: f32,
    /// FOV threshold on the RGB channel mean, as a fraction of 255.
    pub fov_threshold: f32,
    pub patch_size: usize,
    pub patches_per_image: usize,
    /// Patches per image held out for validation; `None` means a tenth.
    pub val_per_image: Option<usize>,
    pub stride: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            clahe_clip: 2.0,
            clahe_tiles: 8,
            clahe_bins: 256,
            gamma: 1.2,
            fov_threshold: 30.0 / 255.0,
            patch_size: 48,
            patches_per_image: 10_000,
            val_per_image: None,
            stride: 5,
        }
    }
}

impl PipelineConfig {
    pub fn clahe_params(&self) -> ClaheParams {
        ClaheParams { clip: self.clahe_clip, tiles_x: self.clahe_tiles, tiles_y: self.clahe_tiles, bins: self.clahe_bins }
    }

    pub fn val_count(&self) -> usize {
        self.val_per_image.unwrap_or(self.patches_per_image / 10)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.stride == 0 {
            return bad("patch size and stride must be positive".into());
        }
        if self.patches_per_image == 0 {
            return bad("patches_per_image must be positive".into());
        }
        if self.val_count() > self.patches_per_image {
            return bad(format!(
                "cannot hold out {} validation patches from {} per image",
                self.val_count(),
                self.patches_per_image
            ));
        }
        if !(self.fov_threshold >= 0.0 && self.fov_threshold < 1.0) {
            return bad(format!("fov_threshold must be in [0, 1), got {}", self.fov_threshold));
        }
        self.clahe_params().validate()?;
        if !(self.gamma > 0.0) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        Ok(())
    }
}

/// Quantize a [0, 1] value to 16 bits.
pub fn quantize16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Round an image through 16-bit quantization, the precision of the
/// preprocessed-image cache, so cached and freshly computed images agree.
pub fn quantize_gray16(img: &GrayImage) -> GrayImage {
    img.map(|v| f32::from(quantize16(v)) / 65535.0)
}

/// grayscale -> pooled normalization -> CLAHE -> gamma over one dataset,
/// rounded to cache precision.
pub fn preprocess_dataset(images: &[RgbImage], config: &PipelineConfig) -> Result<Vec<GrayImage>> {
    let gray: Vec<_> = images.iter().map(rgb_to_gray).collect();
    let params = config.clahe_params();
    normalize_dataset(&gray)?
        .iter()
        .map(|img| Ok(quantize_gray16(&gamma_correct(&clahe(img, &params)?, config.gamma)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn rgb(px: [u8; 3]) -> RgbImage {
        RgbImage::from_pixel(1, 1, Rgb(px))
    }

    #[test]
    fn luma_weights() {
        assert_eq!(rgb_to_gray(&rgb([255, 255, 255])).get(0, 0), 1.0);
        assert_eq!(rgb_to_gray(&rgb([0, 0, 0])).get(0, 0), 0.0);
        assert!((rgb_to_gray(&rgb([255, 0, 0])).get(0, 0) - 0.299).abs() < 1e-6);
    }

    #[test]
    fn normalize_two_pixel_image_is_unchanged() {
        let img = GrayImage::new(2, 1, vec![0.0, 1.0]).unwrap();
        let out = normalize_dataset(&[img]).unwrap();
        assert!((out[0].get(0, 0) - 0.0).abs() < 1e-6);
        assert!((out[0].get(1, 0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn normalize_pools_over_images() {
        let a = GrayImage::new(2, 1, vec![0.2, 0.3]).unwrap();
        let b = GrayImage::new(2, 1, vec![0.4, 0.6]).unwrap();
        let out = normalize_dataset(&[a, b]).unwrap();
        assert_eq!(out[0].get(0, 0), 0.0);
        assert_eq!(out[1].get(1, 0), 1.0);
        assert!((out[1].get(0, 0) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn normalize_rejects_constant_dataset() {
        let img = GrayImage::filled(4, 4, 0.3);
        assert!(matches!(normalize_dataset(&[img.clone(), img]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn gamma_cases() {
        let img = GrayImage::new(3, 1, vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(gamma_correct(&img, 1.0).unwrap(), img);
        let sq = gamma_correct(&img, 2.0).unwrap();
        assert_eq!(sq.data(), &[0.0, 0.25, 1.0]);
        assert!(matches!(gamma_correct(&img, 0.0), Err(Error::Config(_))));
        assert!(matches!(gamma_correct(&img, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn default_val_count_is_a_tenth() {
        let c = PipelineConfig::default();
        assert_eq!(c.val_count(), 1000);
        let c = PipelineConfig { patches_per_image: 100, ..c };
        assert_eq!(c.val_count(), 10);
        c.validate().unwrap();
    }
}
