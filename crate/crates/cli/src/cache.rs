//! On-disk cache of preprocessed images.
//!
//! `prepare` writes one 16-bit PNG per sample, its FOV mask and an index
//! recording the settings used. Later commands refuse a cache whose index
//! does not match their own configuration.

use std::path::{Path, PathBuf};

use retina_forge::io::{load_dataset, read_gray16, read_mask, write_gray16, write_mask, DatasetManifest, Fold};
use retina_forge::pipeline::{prepare_samples, Mask, PipelineConfig, PreparedSample};
use retina_forge::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CACHE_FORMAT: &str = "retina-forge-cache/1";
const INDEX: &str = "cache.json";

/// The pipeline settings that change the cached pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Preprocessing {
    clahe_clip: f32,
    clahe_tiles: usize,
    clahe_bins: usize,
    gamma: f32,
    fov_threshold: f32,
}

impl From<&PipelineConfig> for Preprocessing {
    fn from(p: &PipelineConfig) -> Self {
        Preprocessing {
            clahe_clip: p.clahe_clip,
            clahe_tiles: p.clahe_tiles,
            clahe_bins: p.clahe_bins,
            gamma: p.gamma,
            fov_threshold: p.fov_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheIndex {
    format: String,
    samples: Vec<String>,
    preprocessing: Preprocessing,
}

fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.png"))
}

fn fov_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_fov.png"))
}

/// Preprocess every sample of `manifest` into `dir`. Re-running with the
/// same inputs rewrites identical bytes.
pub fn prepare(manifest: &Path, pipeline: &PipelineConfig, dir: &Path) -> Result<Vec<String>> {
    pipeline.validate()?;
    let dataset = load_dataset(manifest, pipeline.fov_threshold)?;
    let prepared = prepare_samples(&dataset.samples, pipeline)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in &prepared {
        write_gray16(&image_path(dir, &s.id), &s.image)?;
        write_mask(&fov_path(dir, &s.id), &s.fov)?;
    }
    let index = CacheIndex {
        format: CACHE_FORMAT.into(),
        samples: prepared.iter().map(|s| s.id.clone()).collect(),
        preprocessing: pipeline.into(),
    };
    let path = dir.join(INDEX);
    let text = serde_json::to_string_pretty(&index).map_err(|source| Error::Json { path: path.clone(), source })?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(index.samples)
}

/// A manifest's folds plus its samples as read back from the cache.
pub struct Prepared {
    pub manifest: DatasetManifest,
    pub folds: Vec<Fold>,
    pub samples: Vec<PreparedSample>,
}

impl Prepared {
    /// Test samples of every fold, in fold order.
    pub fn test_samples(&self) -> Vec<&PreparedSample> {
        self.folds.iter().flat_map(|f| f.test.iter().map(|&i| &self.samples[i])).collect()
    }
}

fn same_dims(id: &str, what: &str, m: &Mask, dims: (usize, usize)) -> Result<()> {
    if m.dims() != dims {
        return Err(Error::Data(format!("sample '{id}': cached {what} does not match the image size")));
    }
    Ok(())
}

/// Load the cache in `dir` for `manifest`, checking it was built with the
/// same samples and preprocessing settings.
pub fn load(manifest_path: &Path, pipeline: &PipelineConfig, dir: &Path) -> Result<Prepared> {
    let path = dir.join(INDEX);
    if !path.exists() {
        return Err(Error::Config(format!(
            "no prepared cache at {} (run `retina-forge prepare` first)",
            dir.display()
        )));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: CacheIndex = serde_json::from_str(&text).map_err(|source| Error::Json { path: path.clone(), source })?;
    if index.format != CACHE_FORMAT {
        return Err(Error::Config(format!("{}: unsupported cache format '{}'", path.display(), index.format)));
    }
    let manifest = DatasetManifest::load(manifest_path)?;
    let ids: Vec<String> = manifest.samples.iter().map(|s| s.id.clone()).collect();
    if index.samples != ids || index.preprocessing != Preprocessing::from(pipeline) {
        return Err(Error::Config(format!(
            "cache at {} was prepared for other samples or settings (re-run `retina-forge prepare`)",
            dir.display()
        )));
    }
    let folds = manifest.plan()?;
    let samples = manifest
        .samples
        .iter()
        .map(|r| {
            let image = read_gray16(&image_path(dir, &r.id))?;
            let dims = image.dims();
            let fov = read_mask(&fov_path(dir, &r.id))?;
            same_dims(&r.id, "FOV", &fov, dims)?;
            let gt1 = read_mask(&manifest.resolve(&r.gt1))?;
            same_dims(&r.id, "gt1", &gt1, dims)?;
            let gt2 = match &r.gt2 {
                Some(p) => {
                    let m = read_mask(&manifest.resolve(p))?;
                    same_dims(&r.id, "gt2", &m, dims)?;
                    Some(m)
                }
                None => None,
            };
            Ok(PreparedSample { id: r.id.clone(), image, gt1, gt2, fov })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared { manifest, folds, samples })
}
