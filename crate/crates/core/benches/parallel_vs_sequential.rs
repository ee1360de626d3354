use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zofair::cluster::kmeans;
use zofair::experiment::validate_gradients;
use zofair::search::global_generation;
use zofair::{AttributeSpec, DatasetSchema, Execution, GlobalConfig, Instance, MlpModel, ModelHandle, Precision};

const MODES: [Execution; 2] = [Execution::Sequential, Execution::Parallel];

fn schema() -> DatasetSchema {
    let attrs = (0..13)
        .map(|i| AttributeSpec::new(format!("a{i}"), 0, if i == 8 { 1 } else { 9 }, i == 8))
        .collect();
    DatasetSchema::new(attrs).unwrap()
}

fn rows(schema: &DatasetSchema, count: usize, seed: u64) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            Instance::new(
                schema
                    .attributes()
                    .iter()
                    .map(|a| rng.random_range(a.domain_min..=a.domain_max))
                    .collect(),
            )
        })
        .collect()
}

fn batch_forward(c: &mut Criterion) {
    let model = MlpModel::random(13, &[64, 32], 1).unwrap();
    let batch: Vec<Vec<f64>> = rows(&schema(), 4096, 2).iter().map(Instance::to_real).collect();
    let mut g = c.benchmark_group("batch_forward");
    for precision in [Precision::F64, Precision::F32] {
        for exec in MODES {
            let handle = ModelHandle::in_process(model.clone())
                .with_precision(precision)
                .with_execution(exec);
            g.bench_with_input(BenchmarkId::new(format!("{precision:?}"), format!("{exec:?}")), &batch, |b, batch| {
                b.iter(|| handle.forward(batch).unwrap())
            });
        }
    }
    g.finish();
}

fn global_phase(c: &mut Criterion) {
    let schema = schema();
    let data = rows(&schema, 500, 3);
    let model = MlpModel::random(13, &[64, 32], 4).unwrap();
    let mut g = c.benchmark_group("global_generation");
    g.sample_size(10);
    for exec in MODES {
        let handle = ModelHandle::in_process(model.clone()).with_execution(exec);
        let cfg = GlobalConfig {
            global_num: 50,
            execution: exec,
            ..Default::default()
        };
        g.bench_function(format!("{exec:?}"), |b| {
            b.iter(|| global_generation(&handle, &data, &schema, &cfg, 5).unwrap())
        });
    }
    g.finish();
}

fn clustering(c: &mut Criterion) {
    let data = rows(&schema(), 5000, 6);
    let mut g = c.benchmark_group("kmeans");
    g.sample_size(20);
    for exec in MODES {
        g.bench_function(format!("{exec:?}"), |b| b.iter(|| kmeans(&data, 4, 7, exec).unwrap()));
    }
    g.finish();
}

fn validation(c: &mut Criterion) {
    let schema = schema();
    let data = rows(&schema, 500, 8);
    let handle = ModelHandle::in_process(MlpModel::random(13, &[64, 32], 9).unwrap());
    let mut g = c.benchmark_group("validate_gradients");
    g.sample_size(10);
    for exec in MODES {
        g.bench_function(format!("{exec:?}"), |b| {
            b.iter(|| validate_gradients(&handle, &schema, &data, 1.0, 200, 10, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, batch_forward, global_phase, clustering, validation);
criterion_main!(benches);
