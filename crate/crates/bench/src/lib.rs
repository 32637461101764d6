//! Benchmark fixtures and groups. The `merging` bench target runs them.

use criterion::{BenchmarkId, Criterion, Throughput};
use fmerge_core::expert::{compose, extract_expert, topd_select, ExpertBundle};
use fmerge_core::spectral::{dft_oracle, fft};
use fmerge_core::store::task_vector_with_id;
use fmerge_core::{filter_tensor, fr_merge, Checkpoint, FilterSpec, TaskVector, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

pub fn random_tensor(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// A two-layer checkpoint with `rows * cols + rows` parameters.
pub fn layered_checkpoint(seed: u64, rows: usize, cols: usize) -> Checkpoint {
    let mut c = Checkpoint::new();
    c.insert("layer.weight", random_tensor(seed, &[rows, cols]))
        .expect("unique name");
    c.insert("layer.bias", random_tensor(seed ^ 0x5eed, &[rows]))
        .expect("unique name");
    c
}

/// `n` task vectors against `pre`, each from an independently seeded fine model.
pub fn task_vectors(pre: &Checkpoint, n: usize, rows: usize, cols: usize) -> Vec<TaskVector> {
    (0..n)
        .map(|k| {
            let fine = layered_checkpoint(100 + k as u64, rows, cols);
            task_vector_with_id(format!("task{k}"), &fine, pre).expect("same layout")
        })
        .collect()
}

pub fn spectral(c: &mut Criterion) {
    let mut group = c.benchmark_group("spectral");
    for side in [64usize, 128, 256] {
        let t = random_tensor(side as u64, &[side, side]);
        group.throughput(Throughput::Elements((side * side) as u64));
        group.bench_with_input(BenchmarkId::new("fft", side), &t, |b, t| {
            b.iter(|| fft(black_box(t)).unwrap())
        });
        let spec = FilterSpec::high_pass(0.1).unwrap();
        group.bench_with_input(BenchmarkId::new("high_pass", side), &t, |b, t| {
            b.iter(|| filter_tensor(black_box(t), &spec).unwrap())
        });
    }
    // The quadratic oracle, kept small.
    let t = random_tensor(7, &[32, 32]);
    group.bench_function("dft_oracle/32", |b| {
        b.iter(|| dft_oracle(black_box(&t)).unwrap())
    });
    group.finish();
}

pub fn merging(c: &mut Criterion) {
    let mut group = c.benchmark_group("fr_merge");
    group.sample_size(10);
    for (rows, cols) in [(128usize, 128usize), (256, 256), (256, 512)] {
        let pre = layered_checkpoint(1, rows, cols);
        let tvs = task_vectors(&pre, 3, rows, cols);
        group.throughput(Throughput::Elements((rows * cols + rows) as u64));
        group.bench_function(BenchmarkId::from_parameter(format!("{rows}x{cols}")), |b| {
            b.iter(|| fr_merge(black_box(&pre), black_box(&tvs), 0.1).unwrap())
        });
    }
    group.finish();
}

pub fn experts(c: &mut Criterion) {
    let (rows, cols) = (512, 512);
    let pre = layered_checkpoint(1, rows, cols);
    let tvs = task_vectors(&pre, 3, rows, cols);

    let mut group = c.benchmark_group("experts");
    group.sample_size(20);
    for d in [0.01, 0.1] {
        group.bench_with_input(BenchmarkId::new("topd_select", d), &d, |b, &d| {
            b.iter(|| topd_select(black_box(&tvs[0]), d).unwrap())
        });
    }
    let bundle = ExpertBundle::bind(
        &pre,
        tvs.iter()
            .map(|v| extract_expert(v, 0.01, 1.0 / 3.0).unwrap())
            .collect(),
    )
    .unwrap();
    group.bench_function("compose_one_hot", |b| {
        b.iter(|| compose(black_box(&pre), &bundle, &[0.0, 1.0, 0.0]).unwrap())
    });
    group.finish();
}
