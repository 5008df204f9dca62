use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use spatial_causal::effects::{draw_neighbourhoods, estimate_effects_dose, treatment_grid};
use spatial_causal::experiment::{generate, ExperimentConfig};
use spatial_causal::gp::{InducingSet, KernelSpec, NystromMap};
use spatial_causal::model::{build_model, Geometry};
use spatial_causal::par::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench_predict(c: &mut Criterion) {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/line_graph_nn_gp.toml");
    let cfg = ExperimentConfig::load(path.as_ref()).unwrap();
    let g = generate(&cfg.data, 0).unwrap();
    let ds = &g.dataset;
    let model = build_model(&cfg.model, Geometry::of(ds), &ds.coords, 0).unwrap();
    let mut group = c.benchmark_group("predict_all");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| model.predict_all(ds, exec).unwrap()));
    }
    group.finish();

    let grid = treatment_grid(ds, 0, 21).unwrap();
    let draws = draw_neighbourhoods(ds.n(), 8, 0);
    let mut group = c.benchmark_group("dose_effects");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| estimate_effects_dose(&model, ds, 0, None, &grid, &draws, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_features(c: &mut Criterion) {
    let n = 4000;
    let coords: Vec<f64> = (0..2 * n).map(|k| ((k * 7919) % 1000) as f64 / 1000.0).collect();
    let side = 10;
    let points: Vec<f64> = (0..side * side)
        .flat_map(|k| [(k % side) as f64 / (side - 1) as f64, (k / side) as f64 / (side - 1) as f64])
        .collect();
    let map = NystromMap::build(InducingSet { dim: 2, points }, KernelSpec::rbf(1.0, 0.2, 0.1)).unwrap();
    let mut group = c.benchmark_group("nystrom_features");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| map.features(&coords, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench_predict, bench_features);
criterion_main!(benches);
