//! Dense vs block-skipping kernel, mask construction and backward pass.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dma_core::attention::{attend, KernelOptions};
use dma_core::{backward, build_mask, forward, DmaConfig, DmaWeights, DynamicMask, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Inputs {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: DynamicMask,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn inputs(t: usize, d: usize, w: usize) -> Inputs {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let q = uniform(&mut rng, &[1, t, d], -1.0, 1.0);
    let k = uniform(&mut rng, &[1, t, d], -1.0, 1.0);
    let v = uniform(&mut rng, &[1, t, d], -1.0, 1.0);
    let delta = uniform(&mut rng, &[1, t], 1.0, 3.0);
    let mask = build_mask(&delta, t, &DmaConfig::new(1, d, w)).expect("valid mask");
    Inputs { q, k, v, mask }
}

fn kernel(c: &mut Criterion) {
    let mut group = c.benchmark_group("attend_t1024_d64");
    group.sample_size(10);
    for w in [64, 256, 1024] {
        let x = inputs(1024, 64, w);
        for (name, skip) in [("dense", false), ("sparse", true)] {
            let opts = KernelOptions { skip_masked: skip, record: false };
            group.bench_with_input(BenchmarkId::new(name, w), &x, |b, x| {
                b.iter(|| attend(black_box(&x.q), &x.k, &x.v, &x.mask, opts).expect("kernel runs"))
            });
        }
    }
    group.finish();
}

fn mask(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let delta = uniform(&mut rng, &[4, 2048], 0.5, 4.0);
    let cfg = DmaConfig::new(4, 16, 128);
    c.bench_function("build_mask_h4_t2048_w128", |b| {
        b.iter(|| build_mask(black_box(&delta), 2048, &cfg).expect("valid mask"))
    });
}

fn grad(c: &mut Criterion) {
    let (t, heads, dh, w) = (256, 4, 16, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = DmaConfig::new(heads, dh, w);
    let weights = DmaWeights::random(&cfg, &mut rng);
    let h = uniform(&mut rng, &[t, cfg.d_model], -1.0, 1.0);
    let d_out = uniform(&mut rng, &[t, cfg.d_model], -1.0, 1.0);
    let (acts, mask) = forward(&h, &weights, &cfg).expect("forward runs");
    c.bench_function("backward_t256_h4_w32", |b| {
        b.iter(|| backward(black_box(&acts), &mask, &weights, &cfg, &d_out).expect("backward runs"))
    });
}

criterion_group!(benches, kernel, mask, grad);
criterion_main!(benches);
