use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mmot::data::{generate_dataset, DataConfig, Example, SceneKnobs};
use mmot::model::{Mmot, ModelConfig};
use mmot::numerics::{Graph, ParamStore, RngState};
use mmot::parallel::{self, Exec};

fn setup() -> (Mmot, ParamStore<f32>, Vec<Example>) {
    let knobs = SceneKnobs::default();
    let cfg = ModelConfig::desk(&knobs);
    let (model, store) = Mmot::init::<f32>(&cfg, &mut RngState::new(1)).unwrap();
    let data = DataConfig { knobs, ..Default::default() };
    let exs = generate_dataset(&data, 16, 7, Exec::Sequential).unwrap();
    (model, store, exs)
}

fn grad_norm(model: &Mmot, store: &ParamStore<f32>, ex: &Example) -> f64 {
    let g = Graph::new(store);
    let loss = model.nll(&g, &ex.image.tokens, &ex.conditions).unwrap();
    let grads = g.backward(loss).unwrap();
    store
        .iter()
        .filter_map(|p| grads.params.get(store.id(&p.name).unwrap()))
        .flatten()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum()
}

fn per_example_gradients(c: &mut Criterion) {
    let (model, store, exs) = setup();
    let mut group = c.benchmark_group("per_example_gradients_16");
    group.sample_size(10);
    group.bench_function("sequential", |b| {
        b.iter(|| parallel::map(Exec::Sequential, exs.len(), |i| grad_norm(&model, &store, &exs[i])))
    });
    #[cfg(feature = "parallel")]
    for workers in [1, 2, 4] {
        group.bench_with_input(BenchmarkId::new("rayon", workers), &workers, |b, &w| {
            b.iter(|| parallel::map_with_workers(w, exs.len(), |i| grad_norm(&model, &store, &exs[i])))
        });
    }
    group.finish();
}

criterion_group!(benches, per_example_gradients);
criterion_main!(benches);
