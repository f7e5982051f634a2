//! Benchmarks for the paths that dominate training and evaluation time:
//! the cross-attention kernel, the closed-form forward diffusion step, the
//! Frechet image distance, and image embedding similarity.

use candle_core::{Device, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use idforge_core::image_data::ImageTensor;
use idforge_core::injection::{cross_attention, AttentionWeights};
use idforge_core::metrics::{fid, pairwise_sim, ToyImageEmbedder};
use idforge_core::schedule::NoiseSchedule;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
}

fn bench_cross_attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut group = c.benchmark_group("cross_attention");
    for &(m, n, d) in &[(64usize, 16usize, 64usize), (256, 64, 128)] {
        let w = AttentionWeights {
            w_q: rand_tensor(&mut rng, &[d, d]),
            w_k: rand_tensor(&mut rng, &[d, d]),
            w_v: rand_tensor(&mut rng, &[d, d]),
        };
        let z = rand_tensor(&mut rng, &[m, d]);
        let cond = rand_tensor(&mut rng, &[n, d]);
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{m}x{n}x{d}")),
            &(z, cond, w),
            |b, (z, cond, w)| b.iter(|| cross_attention(z, cond, w).unwrap()),
        );
    }
    group.finish();
}

fn bench_forward_diffuse(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let schedule = NoiseSchedule::default_schedule(1000).unwrap();
    let x0 = rand_tensor(&mut rng, &[3, 64, 64]);
    let eps = rand_tensor(&mut rng, &[3, 64, 64]);
    c.bench_function("forward_diffuse/3x64x64", |b| {
        b.iter(|| schedule.forward_diffuse(&x0, 500, &eps).unwrap())
    });
}

fn bench_fid(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut group = c.benchmark_group("fid");
    for &(n, d) in &[(64usize, 32usize), (256, 64)] {
        let feats = |rng: &mut ChaCha8Rng| -> Vec<Vec<f32>> {
            (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
                .collect()
        };
        let a = feats(&mut rng);
        let b_set = feats(&mut rng);
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{n}x{d}")),
            &(a, b_set),
            |b, (fa, fb)| b.iter(|| fid(fa, fb).unwrap()),
        );
    }
    group.finish();
}

fn bench_pairwise_sim(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let embedder = ToyImageEmbedder::new(32, 101);
    let image = |rng: &mut ChaCha8Rng| {
        let data: Vec<f32> = (0..3 * 64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
        ImageTensor::new(data, 64, 64).unwrap()
    };
    let a = image(&mut rng);
    let b_img = image(&mut rng);
    c.bench_function("pairwise_sim/64x64", |b| {
        b.iter(|| pairwise_sim(&embedder, &a, &b_img).unwrap())
    });
}

criterion_group!(
    benches,
    bench_cross_attention,
    bench_forward_diffuse,
    bench_fid,
    bench_pairwise_sim
);
criterion_main!(benches);
