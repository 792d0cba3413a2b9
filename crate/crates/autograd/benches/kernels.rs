//! Kernel throughput with the rayon pool enabled and disabled at runtime.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use s2fuse_autograd::kernels::bicubic_up2;
use s2fuse_autograd::{par, Graph, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn conv(c: &mut Criterion) {
    let x = random(&[64, 120, 120], 1);
    let w = random(&[64, 64, 3, 3], 2);
    let b = random(&[64], 3);
    let mut group = c.benchmark_group("conv2d_3x3_64ch_120px");
    group.sample_size(10);
    for (name, on) in MODES {
        par::set_enabled(on);
        group.bench_function(BenchmarkId::new("forward_backward", name), |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (xv, wv, bv) = (g.leaf(x.clone(), true), g.leaf(w.clone(), true), g.leaf(b.clone(), true));
                let y = g.conv2d(xv, wv, Some(bv), 1).unwrap();
                let l = g.sum(y).unwrap();
                g.backward(l).unwrap();
                black_box(g.grad(wv).map(|d| d[0]))
            })
        });
    }
    group.finish();
    par::set_enabled(true);
}

fn attention(c: &mut Criterion) {
    let q = random(&[32, 120, 120], 4);
    let k = random(&[32, 120, 120], 5);
    let v = random(&[32, 120, 120], 6);
    let mut group = c.benchmark_group("window_attention_w7_120px");
    group.sample_size(10);
    for (name, on) in MODES {
        par::set_enabled(on);
        group.bench_function(BenchmarkId::new("forward_backward", name), |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (qv, kv, vv) = (g.leaf(q.clone(), true), g.leaf(k.clone(), true), g.leaf(v.clone(), true));
                let y = g.window_attention(qv, kv, vv, 7).unwrap();
                let l = g.sum(y).unwrap();
                g.backward(l).unwrap();
                black_box(g.grad(qv).map(|d| d[0]))
            })
        });
    }
    group.finish();
    par::set_enabled(true);
}

fn bicubic(c: &mut Criterion) {
    let x = random(&[6, 120, 120], 7);
    let mut group = c.benchmark_group("bicubic_up2_6x120px");
    for (name, on) in MODES {
        par::set_enabled(on);
        group.bench_function(name, |bench| bench.iter(|| black_box(bicubic_up2(x.data(), 6, 120, 120))));
    }
    group.finish();
    par::set_enabled(true);
}

criterion_group!(benches, conv, attention, bicubic);
criterion_main!(benches);
