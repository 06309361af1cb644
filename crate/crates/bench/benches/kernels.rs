use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use countshift_core::dataio::{generate_scene, hist_equalize, SceneConfig};
use countshift_core::density::{build_density_map, DensityMapConfig};
use countshift_core::models::{init_params, regress_batch};
use countshift_core::Tensor;

fn kernels(c: &mut Criterion) {
    let patch = generate_scene(&SceneConfig::source(7));
    let params = init_params(0);
    let x = hist_equalize(&patch).to_tensor();
    c.bench_function("regressor_forward_128", |b| {
        b.iter(|| regress_batch(&params, black_box(&x)).unwrap())
    });
    let ann = patch.annotation.clone().unwrap();
    let cfg = DensityMapConfig::default();
    c.bench_function("density_map_128", |b| {
        b.iter(|| build_density_map(black_box(&ann), (patch.width, patch.height), &cfg))
    });
    let imgs: Vec<Tensor> = (0..4).map(|s| generate_scene(&SceneConfig::target(s)).to_tensor()).collect();
    let batch = Tensor::stack(&imgs.iter().collect::<Vec<_>>()).unwrap();
    c.bench_function("regressor_forward_batch4", |b| {
        b.iter(|| regress_batch(&params, black_box(&batch)).unwrap())
    });
}

criterion_group!(benches, kernels);
criterion_main!(benches);
