use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use foilnet_core::geom::{naca4, rasterize};
use foilnet_core::oracle::{evaluate_field, solve_panels};
use foilnet_core::tensor::{conv2d, Padding};
use foilnet_core::{Freestream, GridSpec, Tensor, UNet, UNetConfig};
use std::hint::black_box;

fn filled(shape: &[usize]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|i| ((i * 7919) % 1000) as f32 / 500.0 - 1.0).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    // (channels in, channels out, spatial size, kernel, stride)
    for (cin, cout, hw, k, s) in [(3, 8, 128, 4, 2), (16, 32, 32, 4, 2), (64, 32, 16, 3, 1)] {
        let x = filled(&[10, cin, hw, hw]);
        let w = filled(&[cout, cin, k, k]);
        let b = filled(&[cout]);
        let pad = if s == 2 { Padding::uniform(1) } else { Padding::uniform(k / 2) };
        g.bench_function(BenchmarkId::from_parameter(format!("{cin}x{hw}->{cout}_k{k}s{s}")), |bch| {
            bch.iter(|| conv2d(black_box(&x), &w, Some(&b), s, pad).unwrap())
        });
    }
    g.finish();
}

fn forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("unet_infer");
    g.sample_size(10);
    for ci in [3, 4] {
        let net = UNet::<f32>::build(UNetConfig::new(ci), 0).unwrap();
        let x = filled(&[1, 3, 128, 128]);
        g.bench_function(BenchmarkId::from_parameter(format!("ci{ci}")), |b| b.iter(|| net.infer(black_box(&x)).unwrap()));
    }
    g.finish();
}

fn panels(c: &mut Criterion) {
    let shape = naca4(2, 4, 12, 80);
    let fs = Freestream::new(1.0, 5.0).unwrap();
    let grid = GridSpec::default();
    let mask = rasterize(&shape, &grid).unwrap();
    c.bench_function("panel_solve_200", |b| b.iter(|| solve_panels(black_box(&shape), fs, 200).unwrap()));
    let sys = solve_panels(&shape, fs, 200).unwrap();
    c.bench_function("field_eval_128", |b| b.iter(|| evaluate_field(black_box(&sys), fs, &grid, &mask).unwrap()));
}

criterion_group!(benches, conv, forward, panels);
criterion_main!(benches);
