use criterion::{criterion_group, criterion_main, Criterion};
use dssinet_core::tensor::{bilinear_upsample_x2, conv2d, conv2d_backward, ConvSpec, PadMode};
use dssinet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&[32, 48, 48], &mut rng);
    let w = random(&[32, 32, 3, 3], &mut rng);
    let b = random(&[32], &mut rng);
    let spec = ConvSpec::same(3, 1, PadMode::Zero);
    let y = conv2d(&x, &w, Some(&b), &spec).unwrap();

    c.bench_function("conv3x3 32->32 48x48", |bench| {
        bench.iter(|| conv2d(&x, &w, Some(&b), &spec).unwrap())
    });
    c.bench_function("conv3x3 backward 32->32 48x48", |bench| {
        bench.iter(|| conv2d_backward(&x, &w, &spec, &y).unwrap())
    });
    let plane = random(&[1, 96, 96], &mut rng);
    let gauss = random(&[1, 1, 5, 5], &mut rng);
    let dilated = ConvSpec::same(5, 9, PadMode::Reflect);
    c.bench_function("conv5x5 dilation 9 reflect 96x96", |bench| {
        bench.iter(|| conv2d(&plane, &gauss, None, &dilated).unwrap())
    });
    let small = random(&[16, 24, 24], &mut rng);
    c.bench_function("bilinear x2 16x24x24", |bench| {
        bench.iter(|| bilinear_upsample_x2(&small).unwrap())
    });
}

criterion_group!(benches, kernels);
criterion_main!(benches);
