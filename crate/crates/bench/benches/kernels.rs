use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use vstain_core::losses::{local_variance, variance_loss, variance_loss_grad};
use vstain_core::metrics::{perceptual_distance, ssim, RandomConvPyramid};
use vstain_core::prior::IntensityBackend;
use vstain_core::{generate_soft_prior, ImagePatch, MifStack, PatchKey, Raster, ValueRange};

fn raster(rng: &mut ChaCha8Rng, side: usize, c: usize) -> Raster {
    Raster::new(side, side, c, (0..side * side * c).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn stack(rng: &mut ChaCha8Rng, side: usize) -> MifStack {
    let names = ["DAPI", "Lap2", "Ki67"].iter().map(|s| s.to_string()).collect();
    MifStack::new(raster(rng, side, 3), ValueRange::Unit, names, 0).unwrap()
}

fn variance(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img = raster(&mut rng, 256, 3);
    let target = raster(&mut rng, 256, 3);
    let mut g = c.benchmark_group("local_variance_256x256x3");
    for k in [3, 5, 15] {
        g.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, &k| b.iter(|| local_variance(black_box(&img), k).unwrap()));
    }
    g.finish();
    c.bench_function("variance_loss_256x256x3_k15", |b| b.iter(|| variance_loss(black_box(&img), &target, 15).unwrap()));
    c.bench_function("variance_loss_grad_256x256x3_k15", |b| {
        b.iter(|| variance_loss_grad(black_box(&img), &target, 15).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (stack(&mut rng, 256), stack(&mut rng, 256));
    c.bench_function("ssim_256x256x3", |bench| bench.iter(|| ssim(black_box(&a), &b).unwrap()));
    let features = RandomConvPyramid::default();
    c.bench_function("perceptual_256x256x3", |bench| {
        bench.iter(|| perceptual_distance(black_box(&a), &b, &features).unwrap())
    });
}

fn prior(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ihc = ImagePatch::new(raster(&mut rng, 256, 3), ValueRange::Unit).unwrap();
    let key = PatchKey::new("case", "patch");
    let backend = IntensityBackend::default();
    c.bench_function("soft_prior_256x256", |b| b.iter(|| generate_soft_prior(black_box(&ihc), &key, &backend).unwrap()));
}

criterion_group!(benches, variance, metrics, prior);
criterion_main!(benches);
