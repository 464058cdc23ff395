//! Shared fixtures for the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use retina_forge::pipeline::{prepare_samples, sample_training_patches, FundusSample, PatchSet, PipelineConfig, PreparedSample};
use retina_forge::synthetic::{synthetic_fundus, SyntheticConfig};

/// One preprocessed synthetic fundus image of `size x size` pixels.
pub fn fundus(size: usize) -> PreparedSample {
    let cfg = SyntheticConfig { width: size, height: size, ..SyntheticConfig::default() };
    let s = synthetic_fundus(&cfg, 1);
    let sample = FundusSample { id: "bench".into(), rgb: s.rgb, gt1: s.vessels, gt2: None, fov: s.fov };
    prepare_samples(&[sample], &PipelineConfig::default()).expect("synthetic image prepares").remove(0)
}

/// `n` labelled 48x48 training patches.
pub fn patches(n: usize) -> PatchSet {
    let s = fundus(128);
    sample_training_patches(&s.image, &s.gt1, &s.id, n, 48, 0).expect("patches sample")
}

pub fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}
