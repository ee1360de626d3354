use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use zofair::experiment::BENCH_HIDDEN;
use zofair::gradient::{estimate_gradient_naive, estimate_gradient_vectored};
use zofair::{EstimationConfig, MlpModel, ModelHandle, Precision};

fn estimators(c: &mut Criterion) {
    let est = EstimationConfig::new(1.0).unwrap();
    let mut g = c.benchmark_group("gradient");
    for n in [13usize, 64, 137] {
        let model = MlpModel::random(n, &BENCH_HIDDEN, n as u64).unwrap();
        let x: Vec<f64> = (0..n).map(|j| (j % 5) as f64).collect();
        for precision in [Precision::F64, Precision::F32] {
            let handle = ModelHandle::in_process(model.clone()).with_precision(precision);
            let tag = format!("{precision:?}");
            g.bench_with_input(BenchmarkId::new(format!("naive/{tag}"), n), &x, |b, x| {
                b.iter(|| estimate_gradient_naive(&handle, x, &est).unwrap())
            });
            g.bench_with_input(BenchmarkId::new(format!("vectored/{tag}"), n), &x, |b, x| {
                b.iter(|| estimate_gradient_vectored(&handle, x, &est).unwrap())
            });
        }
        let handle = ModelHandle::in_process(model);
        g.bench_with_input(BenchmarkId::new("backprop", n), &x, |b, x| {
            b.iter(|| handle.output_gradient(x).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, estimators);
criterion_main!(benches);
