//! Kernel and network timings. The ids do not depend on the build, so running
//! once with default features and once with `--no-default-features` makes
//! criterion report the parallel build against the sequential one.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mpdiff::network::{Denoiser, NetConfig, Preset};
use mpdiff::{par, Rng, Tape, Tensor};

fn mode() -> &'static str {
    if par::is_parallel() {
        "built parallel"
    } else {
        "built sequential"
    }
}

fn conv(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let mut g = c.benchmark_group("conv3x3");
    eprintln!("{}", mode());
    for &(n, ch, res) in &[(8usize, 16usize, 16usize), (8, 32, 8)] {
        let x = Tensor::randn(&[n, ch, res, res], &mut rng);
        let w = Tensor::randn(&[ch, ch, 3, 3], &mut rng);
        let id = format!("{n}x{ch}x{res}");
        g.bench_with_input(BenchmarkId::new("forward", &id), &(), |b, _| {
            b.iter(|| {
                let tape = Tape::new();
                tape.constant(x.clone()).conv2d(tape.constant(w.clone())).unwrap().value()
            })
        });
        g.bench_with_input(BenchmarkId::new("forward_backward", &id), &(), |b, _| {
            b.iter(|| {
                let tape = Tape::new();
                let wv = tape.param(w.clone());
                let y = tape.constant(x.clone()).conv2d(wv).unwrap().sqr().sum();
                tape.backward(y).take(wv)
            })
        });
    }
    g.finish();
}

fn matmul(c: &mut Criterion) {
    let mut rng = Rng::new(2);
    let a = Tensor::randn(&[256, 256], &mut rng);
    let b = Tensor::randn(&[256, 256], &mut rng);
    c.bench_function("matmul/256", |bch| {
        bch.iter(|| {
            let tape = Tape::new();
            tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap().value()
        })
    });
}

fn denoiser(c: &mut Criterion) {
    let mut rng = Rng::new(3);
    let net = Denoiser::new(NetConfig::toy(Preset::G), &mut rng).unwrap();
    let x = Tensor::randn(&[8, 1, 16, 16], &mut rng);
    let sigma = vec![0.7; 8];
    let mut g = c.benchmark_group("denoiser");
    g.sample_size(20);
    g.bench_function("toy_g_forward_batch8", |b| b.iter(|| net.denoise(&x, &sigma, None).unwrap()));
    g.finish();
}

criterion_group!(benches, conv, matmul, denoiser);
criterion_main!(benches);
