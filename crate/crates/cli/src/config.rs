use std::path::{Path, PathBuf};

use clap::Args;
use retina_forge::arch::{ArchKind, ArchitectureSpec};
use retina_forge::eval::EvalConfig;
use retina_forge::pipeline::PipelineConfig;
use retina_forge::train::TrainConfig;
use retina_forge::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything a run depends on besides the dataset bytes.
///
/// Precedence, highest first: command-line flag, `RETINA_FORGE_SEED` (seed
/// only), the `--config` file, built-in defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub arch: ArchKind,
    pub out: PathBuf,
    pub seed: u64,
    /// Binarization threshold for reports and binary maps.
    pub threshold: f32,
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: None,
            arch: ArchKind::IterMiUnet,
            out: PathBuf::from("runs/default"),
            seed: 0,
            threshold: 0.5,
            pipeline: PipelineConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Read a JSON config; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c: RunConfig =
            serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(m) = &c.manifest {
            c.manifest = Some(base.join(m));
        }
        c.out = base.join(&c.out);
        c.train.seed = c.seed;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            serde_json::to_string_pretty(self).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold must be in [0, 1], got {}", self.threshold)));
        }
        if self.pipeline.val_count() == 0 {
            return Err(Error::Config("at least one validation patch per image is needed".into()));
        }
        if self.train.seed != self.seed {
            return Err(Error::Config("train.seed must equal the run seed".into()));
        }
        self.spec().validate()
    }

    pub fn manifest(&self) -> Result<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| Error::Config("no dataset manifest given (use --manifest or the config file)".into()))
    }

    /// The default architecture for `arch`, with the configured number of
    /// outputs for the iterative kinds.
    pub fn spec(&self) -> ArchitectureSpec {
        let spec = ArchitectureSpec::default_for(self.arch);
        if self.arch.is_iterative() {
            spec.with_iterations(self.train.iterations)
        } else {
            spec
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            patch_size: self.pipeline.patch_size,
            stride: self.pipeline.stride,
            batch_size: self.train.batch_size,
            threshold: self.threshold,
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.out.join("cache")
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// unet, miunet, iternet or itermiunet.
    #[arg(long, global = true)]
    pub arch: Option<ArchKind>,
    #[arg(long, global = true, env = "RETINA_FORGE_SEED")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Weight archive to load.
    #[arg(long, global = true, value_name = "FILE")]
    pub weights: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long, global = true, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f32>,
    #[arg(long, global = true)]
    pub patches_per_image: Option<usize>,
    #[arg(long, global = true)]
    pub val_per_image: Option<usize>,
    /// Tiling stride for whole-image inference.
    #[arg(long, global = true)]
    pub stride: Option<usize>,
    /// Outputs of the iterative models.
    #[arg(long, global = true)]
    pub iterations: Option<usize>,
    #[arg(long, global = true)]
    pub threshold: Option<f32>,
    /// Suppress progress output on stderr.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

impl CommonArgs {
    /// Merge the config file (if any) with these flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.manifest {
            c.manifest = Some(v.clone());
        }
        if let Some(v) = self.arch {
            c.arch = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.out {
            c.out = v.clone();
        }
        if let Some(v) = self.epochs {
            c.train.epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.train.batch_size = v;
        }
        if let Some(v) = self.lr {
            c.train.lr = v;
        }
        if let Some(v) = self.patches_per_image {
            c.pipeline.patches_per_image = v;
        }
        if let Some(v) = self.val_per_image {
            c.pipeline.val_per_image = Some(v);
        }
        if let Some(v) = self.stride {
            c.pipeline.stride = v;
        }
        if let Some(v) = self.iterations {
            c.train.iterations = v;
        }
        if let Some(v) = self.threshold {
            c.threshold = v;
        }
        c.train.seed = c.seed;
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"arch":"unet","seed":3,"manifest":"data/m.json","train":{"epochs":7}}"#).unwrap();
        let args = CommonArgs { config: Some(path), epochs: Some(2), ..Default::default() };
        let c = args.resolve().unwrap();
        assert_eq!(c.arch, ArchKind::Unet);
        assert_eq!((c.seed, c.train.seed), (3, 3));
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.manifest.unwrap(), dir.path().join("data/m.json"));
        let args = CommonArgs { seed: Some(9), arch: Some(ArchKind::MiUnet), ..Default::default() };
        let c = args.resolve().unwrap();
        assert_eq!((c.seed, c.train.seed, c.arch), (9, 9, ArchKind::MiUnet));
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = serde_json::from_str::<RunConfig>(r#"{"epochs":3}"#).unwrap_err();
        assert!(e.to_string().contains("unknown field"));
    }

    #[test]
    fn iterations_only_apply_to_iterative_kinds() {
        let mut c = RunConfig { arch: ArchKind::Unet, ..Default::default() };
        c.train.iterations = 3;
        assert_eq!(c.spec().iterations, 1);
        c.arch = ArchKind::IterNet;
        assert_eq!(c.spec().iterations, 3);
    }
}
