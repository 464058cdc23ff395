//! Fundus preprocessing, FOV masks, training-patch sampling and tiled
//! inference support.

mod clahe;
mod fov;
mod image;
mod patches;
mod preprocess;

pub use clahe::{clahe, ClaheParams};
pub use fov::{fill_holes, generate_fov_mask, largest_component};
pub use image::{GrayImage, Mask};
pub use patches::{
    extract_overlapping_patches, image_seed, recompose, sample_training_patches, split_train_val, PatchOrigin,
    PatchRole, PatchSet, RecomposeBuffer, SourceInfo, TileGrid,
};
pub use preprocess::{
    gamma_correct, normalize_dataset, preprocess_dataset, quantize16, quantize_gray16, rgb_to_gray, PipelineConfig,
};

/// Dataset record: RGB fundus image, expert annotations and FOV.
#[derive(Debug, Clone)]
pub struct FundusSample {
    pub id: String,
    pub rgb: ::image::RgbImage,
    /// First observer's annotation (training groundtruth).
    pub gt1: Mask,
    /// Second observer's annotation, when the dataset has one.
    pub gt2: Option<Mask>,
    pub fov: Mask,
}

impl FundusSample {
    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.rgb.height() as usize, self.rgb.width() as usize)
    }
}

/// A sample after preprocessing: the network input plus its labels.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub image: GrayImage,
    pub gt1: Mask,
    pub gt2: Option<Mask>,
    pub fov: Mask,
}

/// Preprocess a whole dataset (normalization statistics are pooled over
/// every sample given).
pub fn prepare_samples(samples: &[FundusSample], config: &PipelineConfig) -> crate::Result<Vec<PreparedSample>> {
    config.validate()?;
    let rgb: Vec<_> = samples.iter().map(|s| s.rgb.clone()).collect();
    let images = preprocess_dataset(&rgb, config)?;
    Ok(samples
        .iter()
        .zip(images)
        .map(|(s, image)| PreparedSample {
            id: s.id.clone(),
            image,
            gt1: s.gt1.clone(),
            gt2: s.gt2.clone(),
            fov: s.fov.clone(),
        })
        .collect())
}
