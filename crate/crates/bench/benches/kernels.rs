use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use voxflow::autodiff::{ConvGeometry, Padding, PoolGeometry};
use voxflow::nn::arch::ArchitectureSpec;
use voxflow::nn::layers::Mode;
use voxflow::nn::model::{accumulate_sample_gradient, Model};
use voxflow::nn::params::ParamGrads;
use voxflow::svm::{kernel_matrix, solve_dual, Kernel, SvmConfig};
use voxflow::Tensor;

fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect()
}

fn conv3d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("conv3d");
    for &(cin, cout, grid) in &[(1usize, 16usize, [12usize, 12, 8]), (16, 16, [12, 12, 8]), (16, 32, [6, 6, 4])] {
        let input_shape = [cin, grid[0], grid[1], grid[2]];
        let geo = ConvGeometry::new(&input_shape, &[cout, cin, 3, 3, 3], cout, Padding::Same).unwrap();
        let input = random(input_shape.iter().product(), &mut rng);
        let kernel = random(cout * cin * 27, &mut rng);
        let bias = random(cout, &mut rng);
        let id = format!("{cin}to{cout}@{}x{}x{}", grid[0], grid[1], grid[2]);
        group.bench_function(BenchmarkId::new("forward", &id), |b| {
            b.iter(|| geo.forward(black_box(&input), &kernel, &bias))
        });
        let out = geo.forward(&input, &kernel, &bias);
        let mut di = vec![0f32; input.len()];
        let mut dk = vec![0f32; kernel.len()];
        let mut db = vec![0f32; bias.len()];
        group.bench_function(BenchmarkId::new("backward", &id), |b| {
            b.iter(|| geo.backward(&input, &kernel, black_box(&out), Some(&mut di), Some(&mut dk), Some(&mut db)))
        });
    }
    group.finish();
}

fn maxpool(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let geo = PoolGeometry::new(&[16, 12, 12, 8]).unwrap();
    let input = random(16 * 12 * 12 * 8, &mut rng);
    c.bench_function("maxpool3d/forward/16@12x12x8", |b| b.iter(|| geo.forward(black_box(&input))));
}

fn window(frames: usize, grid: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = frames * grid.iter().product::<usize>();
    Tensor::from_vec(&[frames, grid[0], grid[1], grid[2]], random(n, rng)).unwrap()
}

fn models(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grid = [12, 12, 8];
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    for name in ["lstm", "rcnn-2-1"] {
        let mut spec = ArchitectureSpec::named(name).unwrap();
        spec.flatten_scope = voxflow::nn::arch::FlattenScope::Grid;
        let model = Model::<f32>::new(spec, grid, None, &mut rng).unwrap();
        let w = window(16, grid, &mut rng);
        group.bench_function(BenchmarkId::new("inference-T16", name), |b| {
            b.iter(|| model.predict_log_probs(black_box(&w)).unwrap())
        });
        let mut acc = ParamGrads::zeros_like(&model.params);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(4);
        group.bench_function(BenchmarkId::new("train-sample-T16", name), |b| {
            b.iter(|| accumulate_sample_gradient(&model, black_box(&w), 1, Mode::Train, &mut drop_rng, &mut acc).unwrap())
        });
    }
    group.finish();
}

fn smo(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut group = c.benchmark_group("smo");
    for &n in &[100usize, 400] {
        let d = 64;
        let x: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let shift = if i % 2 == 0 { 0.3 } else { -0.3 };
                (0..d).map(|_| rng.random::<f64>() - 0.5 + shift).collect()
            })
            .collect();
        let y: Vec<i8> = (0..n).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
        for (label, kernel) in [("linear", Kernel::Linear), ("rbf", Kernel::Rbf { gamma: 1.0 / d as f64 })] {
            let k = kernel_matrix(&x, kernel);
            let cfg = SvmConfig { c: 1.0, tol: 1e-3, max_iter: None };
            group.bench_function(BenchmarkId::new(label, n), |b| b.iter(|| solve_dual(black_box(&k), &y, &cfg).unwrap()));
        }
    }
    group.finish();
}

criterion_group!(benches, conv3d, maxpool, models, smo);
criterion_main!(benches);
