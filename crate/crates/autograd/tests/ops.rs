//! Forward kernels against brute-force loop oracles, adjoint identities and
//! finite-difference gradient checks for every differentiable op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2fuse_autograd::kernels;
use s2fuse_autograd::{GradCheck, Graph, Result, Tensor, Var};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const GRAD_TOL: f64 = 1e-4;

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, rng)
}

/// Projects `out` onto a fixed random tensor so every output element matters.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let shape = g.value(out).shape().to_vec();
    let r = g.constant(rand_t(&shape, &mut rng));
    let p = g.mul(out, r)?;
    g.sum(p)
}

fn check(name: &str, inputs: Vec<Tensor<f64>>, seed: u64, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) {
    let rep = GradCheck {
        eps: 1e-4,
        samples_per_tensor: 24,
        seed,
        kink_tol: None,
    }
    .run(&inputs, |g, v| {
        let out = f(g, v)?;
        project(g, out, seed)
    })
    .unwrap();
    assert!(rep.passes(GRAD_TOL), "{name} seed {seed}: {rep:?}");
}

// ---------- oracles ----------

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&[f64]>, pad: usize) -> Vec<f64> {
    let (c, h, wd) = x.dims3().unwrap();
    let s = w.shape();
    let (o, kh, kw) = (s[0], s[2], s[3]);
    let ho = h + 2 * pad + 1 - kh;
    let wo = wd + 2 * pad + 1 - kw;
    let mut out = vec![0.0; o * ho * wo];
    for oc in 0..o {
        for y in 0..ho {
            for xx in 0..wo {
                let mut acc = b.map_or(0.0, |b| b[oc]);
                for ic in 0..c {
                    for i in 0..kh {
                        for j in 0..kw {
                            let iy = y as isize + i as isize - pad as isize;
                            let ix = xx as isize + j as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += w.data()[((oc * c + ic) * kh + i) * kw + j]
                                    * x.data()[(ic * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                }
                out[(oc * ho + y) * wo + xx] = acc;
            }
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------- conv2d ----------

#[test]
fn conv2d_identity_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_t(&[3, 6, 5], &mut rng);
    let mut w = Tensor::<f64>::zeros(&[3, 3, 3, 3]);
    for c in 0..3 {
        w.data_mut()[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w);
    let y = g.conv2d(xv, wv, None, 1).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv2d_pointwise_scales_constant() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(&[1, 4, 4], 3.0));
    let w = g.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
    let y = g.conv2d(x, w, None, 0).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 6.0));
}

#[test]
fn conv2d_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_t(&[1, 5, 5], &mut rng);
    let w = rand_t(&[1, 1, 3, 3], &mut rng);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv2d(xv, wv, None, 1).unwrap();
    assert!(max_diff(g.value(y).data(), &conv_oracle(&x, &w, None, 1)) <= 1e-6);

    // multi-channel, bias, no padding
    let x = rand_t(&[3, 7, 6], &mut rng);
    let w = rand_t(&[4, 3, 3, 3], &mut rng);
    let b = rand_t(&[4], &mut rng);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv2d(xv, wv, Some(bv), 0).unwrap();
    assert_eq!(g.value(y).shape(), &[4, 5, 4]);
    assert!(max_diff(g.value(y).data(), &conv_oracle(&x, &w, Some(b.data()), 0)) <= 1e-12);
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(
        g.conv2d(x, w, None, 1),
        Err(s2fuse_autograd::GraphError::ChannelMismatch { .. })
    ));
}

#[test]
fn conv2d_adjoint_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (c, h, w, o) = (3, 9, 8, 5);
    let x = rand_t(&[c, h, w], &mut rng);
    let wt = rand_t(&[o, c, 3, 3], &mut rng);
    let y = rand_t(&[o, h, w], &mut rng);
    let ax = kernels::conv2d_forward(x.data(), c, h, w, wt.data(), None, o, 3, 3, 1);
    let aty = kernels::conv2d_backward_input(y.data(), c, h, w, wt.data(), o, 3, 3, 1);
    let lhs: f64 = ax.iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.data().iter().zip(&aty).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() <= 1e-5, "{lhs} vs {rhs}");
}

#[test]
fn conv2d_gradients() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![rand_t(&[2, 5, 6], &mut rng), rand_t(&[3, 2, 3, 3], &mut rng), rand_t(&[3], &mut rng)];
        check("conv2d", inputs, seed, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1));
        let inputs = vec![rand_t(&[4, 3, 3], &mut rng), rand_t(&[2, 4, 1, 1], &mut rng)];
        check("conv2d 1x1", inputs, seed, |g, v| g.conv2d(v[0], v[1], None, 0));
    }
}

// ---------- depthwise ----------

#[test]
fn depthwise_matches_per_channel_oracle_and_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_t(&[6, 7, 7], &mut rng);
    let w = rand_t(&[6, 3, 3], &mut rng);
    assert_eq!(w.len(), 54);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.depthwise_conv2d(xv, wv, 1).unwrap();
    for c in 0..6 {
        let xc = x.slice_channels(c, 1).unwrap();
        let wc = Tensor::new(&[1, 1, 3, 3], w.data()[c * 9..(c + 1) * 9].to_vec()).unwrap();
        let want = conv_oracle(&xc, &wc, None, 1);
        assert!(max_diff(g.value(y).channel(c), &want) <= 1e-6);
    }
}

#[test]
fn depthwise_identity_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_t(&[6, 4, 5], &mut rng);
    let w = Tensor::from_fn(&[6, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 });
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w));
    let y = g.depthwise_conv2d(xv, wv, 1).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn depthwise_gradients() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![rand_t(&[3, 6, 5], &mut rng), rand_t(&[3, 3, 3], &mut rng)];
        check("depthwise", inputs, seed, |g, v| g.depthwise_conv2d(v[0], v[1], 1));
    }
}

// ---------- transposed stride 2 ----------

#[test]
fn transposed_zero_kernel_and_shape() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(&[6, 3, 4], 1.0));
    let w = g.constant(Tensor::zeros(&[6, 3, 3]));
    let y = g.transposed_conv2d_s2(x, w).unwrap();
    assert_eq!(g.value(y).shape(), &[6, 6, 8]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    assert_eq!(g.value(w).len(), 54);
}

#[test]
fn transposed_adjoint_identity() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h, w) = (6, 5, 7);
        let x = rand_t(&[c, h, w], &mut rng);
        let k = rand_t(&[c, 3, 3], &mut rng);
        let y = rand_t(&[c, 2 * h, 2 * w], &mut rng);
        let tx = kernels::transposed_conv_s2_forward(x.data(), c, h, w, k.data(), 3);
        let cy = kernels::conv_s2_depthwise(y.data(), c, h, w, k.data(), 3);
        let lhs: f64 = tx.iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(&cy).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-5);
    }
}

#[test]
fn transposed_matches_scatter_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (h, w) = (3, 4);
    let x = rand_t(&[1, h, w], &mut rng);
    let k = rand_t(&[1, 3, 3], &mut rng);
    // zero-insertion upsampling followed by a flipped-kernel correlation
    let mut z = vec![0.0; (2 * h + 2) * (2 * w + 2)];
    let zw = 2 * w + 2;
    for i in 0..h {
        for j in 0..w {
            z[(2 * i + 1) * zw + 2 * j + 1] = x.data()[i * w + j];
        }
    }
    let mut want = vec![0.0; 4 * h * w];
    for oy in 0..2 * h {
        for ox in 0..2 * w {
            let mut acc = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    acc += k.data()[(2 - a) * 3 + (2 - b)] * z[(oy + a) * zw + ox + b];
                }
            }
            want[oy * 2 * w + ox] = acc;
        }
    }
    let got = kernels::transposed_conv_s2_forward(x.data(), 1, h, w, k.data(), 3);
    assert!(max_diff(&got, &want) < 1e-12);
}

#[test]
fn transposed_gradients() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![rand_t(&[2, 4, 3], &mut rng), rand_t(&[2, 3, 3], &mut rng)];
        check("transposed", inputs, seed, |g, v| g.transposed_conv2d_s2(v[0], v[1]));
    }
}

// ---------- pooling ----------

#[test]
fn avg_pool_values() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
    let y = g.avg_pool2(x).unwrap();
    assert_eq!(g.value(y).data(), &[1.5]);
    let c = g.constant(Tensor::full(&[2, 4, 6], 0.7));
    let y = g.avg_pool2(c).unwrap();
    assert!(g.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
}

#[test]
fn avg_pool_gradients() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        check("avg_pool2", vec![rand_t(&[2, 4, 6], &mut rng)], seed, |g, v| g.avg_pool2(v[0]));
    }
}

// ---------- bicubic ----------

fn bicubic_oracle(x: &Tensor<f64>) -> Vec<f64> {
    let (c, h, w) = x.dims3().unwrap();
    let mut out = vec![0.0; c * 4 * h * w];
    for ch in 0..c {
        for oy in 0..2 * h {
            for ox in 0..2 * w {
                let sy = (oy as f64 + 0.5) / 2.0 - 0.5;
                let sx = (ox as f64 + 0.5) / 2.0 - 0.5;
                let mut acc = 0.0;
                for iy in (sy.floor() as isize - 1)..=(sy.floor() as isize + 2) {
                    for ix in (sx.floor() as isize - 1)..=(sx.floor() as isize + 2) {
                        let wgt = kernels::cubic_weight(sy - iy as f64) * kernels::cubic_weight(sx - ix as f64);
                        let ry = kernels::reflect_index(iy, h);
                        let rx = kernels::reflect_index(ix, w);
                        acc += wgt * x.data()[(ch * h + ry) * w + rx];
                    }
                }
                out[(ch * 2 * h + oy) * 2 * w + ox] = acc;
            }
        }
    }
    out
}

#[test]
fn bicubic_matches_weighted_sum_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_t(&[1, 4, 4], &mut rng);
    let got = kernels::bicubic_up2(x.data(), 1, 4, 4);
    assert!(max_diff(&got, &bicubic_oracle(&x)) <= 1e-6);
}

#[test]
fn bicubic_preserves_constants() {
    let x = Tensor::<f32>::full(&[2, 3, 5], 0.42);
    let y = kernels::bicubic_up2(x.data(), 2, 3, 5);
    assert!(y.iter().all(|&v| (v - 0.42).abs() < 1e-6));
}

#[test]
fn bicubic_reproduces_linear_ramps_away_from_borders() {
    let (h, w) = (8, 10);
    let x = Tensor::<f64>::from_fn(&[1, h, w], |i| 0.1 * (i / w) as f64 + 0.03 * (i % w) as f64);
    let y = kernels::bicubic_up2(x.data(), 1, h, w);
    // interior outputs only: all four taps fall inside the input
    for oy in 3..2 * h - 3 {
        for ox in 3..2 * w - 3 {
            let sy = (oy as f64 + 0.5) / 2.0 - 0.5;
            let sx = (ox as f64 + 0.5) / 2.0 - 0.5;
            let want = 0.1 * sy + 0.03 * sx;
            assert!((y[oy * 2 * w + ox] - want).abs() < 1e-6);
        }
    }
}

// ---------- softmax ----------

#[test]
fn softmax_uniform_and_peaked() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[2, 25], 3.0));
    let y = g.softmax_rows(x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| (v - 0.04).abs() < 1e-15));
    let mut row = vec![0.0; 5];
    row[2] = 1000.0;
    let x = g.constant(Tensor::new(&[1, 5], row).unwrap());
    let y = g.softmax_rows(x).unwrap();
    let v = g.value(y).data();
    assert!((v[2] - 1.0).abs() < 1e-12 && v[0] < 1e-300);
}

#[test]
fn softmax_matches_exp_sum_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_t(&[3, 7], &mut rng).map(|v| 4.0 * v);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.softmax_rows(xv).unwrap();
    for r in 0..3 {
        let row = &x.data()[r * 7..(r + 1) * 7];
        let s: f64 = row.iter().map(|v| v.exp()).sum();
        for j in 0..7 {
            assert!((g.value(y).data()[r * 7 + j] - row[j].exp() / s).abs() <= 1e-7);
        }
    }
}

#[test]
fn softmax_gradients() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        check("softmax_rows", vec![rand_t(&[3, 6], &mut rng)], seed, |g, v| g.softmax_rows(v[0]));
        check("softmax_channels", vec![rand_t(&[5, 3, 2], &mut rng)], seed, |g, v| {
            g.softmax_channels(v[0])
        });
    }
}

// ---------- the rest of the op set ----------

#[test]
fn elementwise_and_structural_gradients() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_t(&[2, 3, 4], &mut rng);
        let b = rand_t(&[2, 3, 4], &mut rng);
        let p = rand_t(&[1, 3, 4], &mut rng);
        check("add/sub/mul", vec![a.clone(), b.clone()], seed, |g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(s, v[1])?;
            let m = g.mul(d, v[1])?;
            g.scale(m, 0.7)
        });
        check("relu/abs/square", vec![a.clone()], seed, |g, v| {
            let r = g.relu(v[0])?;
            let s = g.square(v[0])?;
            let a = g.abs(v[0])?;
            let t = g.add(r, s)?;
            g.add(t, a)
        });
        check("mean", vec![a.clone()], seed, |g, v| {
            let s = g.square(v[0])?;
            g.mean(s)
        });
        check("concat/slice", vec![a.clone(), p.clone()], seed, |g, v| {
            let c = g.concat(&[v[0], v[1]])?;
            g.slice_channels(c, 1, 2)
        });
        check("mul_channel", vec![p.clone(), a.clone()], seed, |g, v| g.mul_channel(v[0], v[1]));
        check("unfold", vec![rand_t(&[2, 4, 5], &mut rng)], seed, |g, v| g.unfold(v[0], 3));
        let px = vec![3usize, 0, 7, 11];
        let rest: Vec<usize> = (0..12).filter(|i| !px.contains(i)).collect();
        check("gather/scatter", vec![a.clone()], seed, move |g, v| {
            let s1 = g.gather_pixels(v[0], &px)?;
            let s1 = g.scale(s1, 2.0)?;
            let s2 = g.gather_pixels(v[0], &rest)?;
            g.scatter_pixels(&[(s1, px.clone()), (s2, rest.clone())], 3, 4)
        });
    }
}

#[test]
fn window_attention_gradients() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = rand_t(&[3, 7, 6], &mut rng);
        let k = rand_t(&[3, 7, 6], &mut rng);
        let v = rand_t(&[2, 7, 6], &mut rng);
        check("window_attention", vec![q, k, v], seed, |g, x| g.window_attention(x[0], x[1], x[2], 5));
    }
}

#[test]
fn composite_conv_pool_l1_matches_finite_differences() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_t(&[2, 6, 6], &mut rng);
        let w = rand_t(&[3, 2, 3, 3], &mut rng);
        let target = rand_t(&[3, 3, 3], &mut rng);
        let rep = GradCheck {
            eps: 1e-4,
            samples_per_tensor: 64,
            seed,
            kink_tol: None,
        }
        .run(&[x, w], |g, v| {
            let y = g.conv2d(v[0], v[1], None, 1)?;
            let p = g.avg_pool2(y)?;
            let t = g.constant(target.clone());
            let d = g.sub(p, t)?;
            let a = g.abs(d)?;
            g.mean(a)
        })
        .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }
}

#[test]
fn random_finite_inputs_never_produce_nan() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..20 {
        let scale: f64 = rng.gen_range(0.1..50.0);
        let x = rand_t(&[4, 6, 6], &mut rng).map(|v| v * scale);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let w = g.constant(rand_t(&[4, 4, 3, 3], &mut rng));
        let y = g.conv2d(xv, w, None, 1).unwrap();
        let q = g.unfold(y, 3).unwrap();
        let a = g.window_attention(q, q, xv, 5).unwrap();
        let s = g.softmax_channels(a).unwrap();
        assert!(g.value(s).is_finite());
    }
}
