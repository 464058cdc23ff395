use retina_forge::arch::{ArchKind, ArchitectureSpec, Model};
use retina_forge::eval::{evaluate_model, EvalConfig};
use retina_forge::io::{load_dataset, DatasetName, SplitSpec};
use retina_forge::pipeline::{prepare_samples, sample_training_patches, split_train_val, PatchSet, PipelineConfig};
use retina_forge::synthetic::{write_synthetic_dataset, SyntheticConfig};
use retina_forge::train::{history_csv, train, Quiet, TrainConfig};

fn small() -> SyntheticConfig {
    SyntheticConfig { width: 64, height: 64, ..SyntheticConfig::default() }
}

#[test]
fn synthetic_dataset_loads_and_prepares() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_synthetic_dataset(dir.path(), DatasetName::Custom, 3, SplitSpec::LeaveOneOut, &small(), 1).unwrap();
    let data = load_dataset(&path, 30.0 / 255.0).unwrap();
    assert_eq!(data.samples.len(), 3);
    assert_eq!(data.folds.len(), 3);
    let prepared = prepare_samples(&data.samples, &PipelineConfig::default()).unwrap();
    for p in &prepared {
        assert_eq!(p.image.dims(), (64, 64));
        assert!(p.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(p.gt2.is_some());
        assert!(p.gt1.count() > 0 && p.gt1.count() < p.fov.count());
    }
}

fn patch_sets(seed: u64) -> (PatchSet, PatchSet) {
    let dir = tempfile::tempdir().unwrap();
    let path = write_synthetic_dataset(dir.path(), DatasetName::Custom, 2, SplitSpec::FirstK { k: 2 }, &small(), 2).unwrap();
    let data = load_dataset(&path, 30.0 / 255.0).unwrap();
    let prepared = prepare_samples(&data.samples, &PipelineConfig::default()).unwrap();
    let sets: Vec<_> =
        prepared.iter().map(|p| sample_training_patches(&p.image, &p.gt1, &p.id, 12, 48, seed).unwrap()).collect();
    split_train_val(&PatchSet::merge(&sets).unwrap(), 2).unwrap()
}

#[test]
fn training_is_reproducible() {
    let (tr, va) = patch_sets(7);
    let config = TrainConfig { epochs: 2, batch_size: 8, seed: 11, ..TrainConfig::default() };
    let spec = ArchitectureSpec::default_for(ArchKind::MiUnet);
    let run = || {
        let mut model = Model::build(&spec, 3).unwrap();
        let outcome = train(&mut model, &tr, &va, &config, &mut Quiet).unwrap();
        (history_csv(&outcome.history), model.params().values())
    };
    let (h1, v1) = run();
    let (h2, v2) = run();
    assert_eq!(h1, h2);
    assert_eq!(v1, v2);
    assert_eq!(h1.lines().count(), 3);
}

#[test]
fn trained_model_evaluates_on_a_whole_image() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_synthetic_dataset(dir.path(), DatasetName::Custom, 2, SplitSpec::FirstK { k: 1 }, &small(), 3).unwrap();
    let data = load_dataset(&path, 30.0 / 255.0).unwrap();
    let prepared = prepare_samples(&data.samples, &PipelineConfig::default()).unwrap();
    let model = Model::build(&ArchitectureSpec::default_for(ArchKind::MiUnet), 0).unwrap();
    let config = EvalConfig { stride: 16, ..EvalConfig::default() };
    let (report, maps) = evaluate_model(&model, &prepared[1..], &config).unwrap();
    assert_eq!(maps[0].dims(), (64, 64));
    assert!(maps[0].data().iter().all(|&p| p > 0.0 && p < 1.0));
    assert_eq!(report.images.len(), 1);
    assert_eq!(report.pooled.counts.total() as usize, prepared[1].fov.count());
}
