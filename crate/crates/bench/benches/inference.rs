use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use retina_forge::arch::{ArchKind, ArchitectureSpec, Model};
use retina_forge::eval::{predict_map, EvalConfig};
use retina_forge_bench::fundus;

/// Whole-image tiled inference, stride 16 on a 96x96 image (16 tiles).
fn tiled_inference(c: &mut Criterion) {
    let image = fundus(96).image;
    let config = EvalConfig { stride: 16, batch_size: 16, ..EvalConfig::default() };
    let mut group = c.benchmark_group("predict_map_96px");
    group.sample_size(10);
    for kind in ArchKind::ALL {
        let model = Model::build(&ArchitectureSpec::default_for(kind), 0).expect("default spec builds");
        group.bench_function(BenchmarkId::from_parameter(kind), |b| {
            b.iter(|| predict_map(&model, &image, &config).expect("inference runs"))
        });
    }
    group.finish();
}

criterion_group!(benches, tiled_inference);
criterion_main!(benches);
