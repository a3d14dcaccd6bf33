//! Rayon fan-out against a single-threaded run of the same code.
//!
//! `sequential` executes inside a one-thread pool, which is what the
//! `--no-default-features` build does without the pool overhead.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pbf_rbdo::optimize::{draw_samples, Evaluator};
use pbf_rbdo::pipeline::{generate_doe, run_batch, run_simulations, train, PipelineConfig};
use pbf_rbdo::thermal::DesignPoint;

fn one_thread() -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()
}

fn simulations(c: &mut Criterion) {
    let cfg = PipelineConfig::default();
    let inputs = generate_doe(8, &cfg.input_bounds, 1).unwrap();
    let pool = one_thread();
    let mut g = c.benchmark_group("run_batch_8");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("parallel", rayon::current_num_threads()), |b| {
        b.iter(|| run_batch(&inputs, &cfg).unwrap())
    });
    g.bench_function("sequential", |b| {
        b.iter(|| pool.install(|| run_batch(&inputs, &cfg).unwrap()))
    });
    g.finish();
}

fn surrogate_response(c: &mut Criterion) {
    // The synthetic response trains in milliseconds and has the same
    // bundle layout as the simulator-backed one.
    let cfg = PipelineConfig {
        synthetic: true,
        ..PipelineConfig::default()
    };
    let (bundle, _) = train(&run_simulations(&cfg).unwrap(), &cfg).unwrap();
    let samples = draw_samples(&bundle.input_bounds, 20_000, 2);
    let eval = Evaluator::new(&bundle, &samples).unwrap();
    let d = DesignPoint::new(700.0, 150.0);
    let pool = one_thread();
    let mut g = c.benchmark_group("respond_20000");
    g.bench_function(BenchmarkId::new("parallel", rayon::current_num_threads()), |b| {
        b.iter(|| eval.respond(&d).unwrap())
    });
    g.bench_function("sequential", |b| b.iter(|| pool.install(|| eval.respond(&d).unwrap())));
    g.finish();
}

criterion_group!(benches, simulations, surrogate_response);
criterion_main!(benches);
