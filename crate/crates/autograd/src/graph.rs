//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order: [`Graph::backward`] walks it once from the loss down to
//! the first node. A graph supports a single backward pass.

use crate::error::{shape_err, GraphError, Result};
use crate::kernels::{self, Tile};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
    },
    DepthwiseConv2d {
        x: Var,
        w: Var,
        pad: usize,
    },
    TransposedConvS2 {
        x: Var,
        w: Var,
    },
    AvgPool2(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Mean(Var),
    Sum(Var),
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    MulChannel {
        p: Var,
        x: Var,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Unfold {
        x: Var,
        patch: usize,
    },
    WindowAttention {
        q: Var,
        k: Var,
        v: Var,
        tiles: Vec<Tile>,
        weights: Vec<Vec<T>>,
    },
    GatherPixels {
        x: Var,
        pixels: Vec<usize>,
    },
    ScatterPixels {
        parts: Vec<(Var, Vec<usize>)>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::DepthwiseConv2d { .. } => "depthwise_conv2d",
            Op::TransposedConvS2 { .. } => "transposed_conv2d_s2",
            Op::AvgPool2(_) => "avg_pool2",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Abs(_) => "abs",
            Op::Square(_) => "square",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::Concat(_) => "concat",
            Op::SliceChannels { .. } => "slice_channels",
            Op::MulChannel { .. } => "mul_channel",
            Op::Softmax { .. } => "softmax",
            Op::Unfold { .. } => "unfold",
            Op::WindowAttention { .. } => "window_attention",
            Op::GatherPixels { .. } => "gather_pixels",
            Op::ScatterPixels { .. } => "scatter_pixels",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::DepthwiseConv2d { x, w, .. } | Op::TransposedConvS2 { x, w } => vec![*x, *w],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AvgPool2(x)
            | Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Abs(x)
            | Op::Square(x)
            | Op::Mean(x)
            | Op::Sum(x) => vec![*x],
            Op::Concat(parts) => parts.clone(),
            Op::SliceChannels { x, .. }
            | Op::Softmax { x, .. }
            | Op::Unfold { x, .. }
            | Op::GatherPixels { x, .. } => vec![*x],
            Op::MulChannel { p, x } => vec![*p, *x],
            Op::WindowAttention { q, k, v, .. } => vec![*q, *k, *v],
            Op::ScatterPixels { parts } => parts.iter().map(|(v, _)| *v).collect(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
    grad: Option<Vec<T>>,
}

/// A recorded computation. Build it with the op methods, then call
/// [`Graph::backward`] on a scalar to populate leaf gradients.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf; its gradient is available after [`Graph::backward`].
    pub fn parameter(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn dims3(&self, v: Var) -> Result<(usize, usize, usize)> {
        self.value(v).dims3()
    }

    fn push(&mut self, op: Op<T>, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(GraphError::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        // Weights are only needed by backward.
        let op = match op {
            Op::WindowAttention {
                q, k, v, tiles, ..
            } if !requires_grad => Op::WindowAttention {
                q,
                k,
                v,
                tiles,
                weights: Vec::new(),
            },
            other => other,
        };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Zero-padded stride-1 convolution. `w` is `[o, c, kh, kw]`, `b` is `[o]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (c, h, wd) = self.dims3(x)?;
        let ws = self.value(w).shape().to_vec();
        let [o, wc, kh, kw] = ws[..] else {
            return Err(shape_err("conv2d", format!("weight shape {ws:?}")));
        };
        if wc != c {
            return Err(GraphError::ChannelMismatch {
                op: "conv2d",
                got: c,
                expected: wc,
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(GraphError::InvalidArgument {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} must be odd"),
            });
        }
        if let Some(b) = b {
            if self.value(b).len() != o {
                return Err(shape_err("conv2d", "bias length"));
            }
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err("conv2d", "kernel larger than padded input"));
        }
        let (ho, wo) = (h + 2 * pad + 1 - kh, wd + 2 * pad + 1 - kw);
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            c,
            h,
            wd,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            o,
            kh,
            kw,
            pad,
        );
        self.push(Op::Conv2d { x, w, b, pad }, &[o, ho, wo], out)
    }

    /// Channel-wise convolution, `w` is `[c, k, k]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (c, h, wd) = self.dims3(x)?;
        let ws = self.value(w).shape().to_vec();
        let [wc, k, k2] = ws[..] else {
            return Err(shape_err("depthwise_conv2d", format!("weight shape {ws:?}")));
        };
        if wc != c {
            return Err(GraphError::ChannelMismatch {
                op: "depthwise_conv2d",
                got: c,
                expected: wc,
            });
        }
        if k != k2 || k % 2 == 0 {
            return Err(GraphError::InvalidArgument {
                op: "depthwise_conv2d",
                detail: format!("kernel {k}x{k2} must be square and odd"),
            });
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err("depthwise_conv2d", "kernel larger than padded input"));
        }
        let (ho, wo) = (h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k);
        let out = kernels::depthwise_conv2d_forward(
            self.value(x).data(),
            c,
            h,
            wd,
            self.value(w).data(),
            k,
            pad,
        );
        self.push(Op::DepthwiseConv2d { x, w, pad }, &[c, ho, wo], out)
    }

    /// Depthwise stride-2 transposed convolution, output exactly `[c, 2h, 2w]`.
    pub fn transposed_conv2d_s2(&mut self, x: Var, w: Var) -> Result<Var> {
        let (c, h, wd) = self.dims3(x)?;
        let ws = self.value(w).shape().to_vec();
        let [wc, k, k2] = ws[..] else {
            return Err(shape_err("transposed_conv2d_s2", format!("weight shape {ws:?}")));
        };
        if wc != c {
            return Err(GraphError::ChannelMismatch {
                op: "transposed_conv2d_s2",
                got: c,
                expected: wc,
            });
        }
        if k != k2 || k % 2 == 0 {
            return Err(GraphError::InvalidArgument {
                op: "transposed_conv2d_s2",
                detail: format!("kernel {k}x{k2} must be square and odd"),
            });
        }
        let out =
            kernels::transposed_conv_s2_forward(self.value(x).data(), c, h, wd, self.value(w).data(), k);
        self.push(Op::TransposedConvS2 { x, w }, &[c, 2 * h, 2 * wd], out)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.dims3(x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(GraphError::OddDimension {
                op: "avg_pool2",
                height: h,
                width: w,
            });
        }
        let out = kernels::avg_pool2_forward(self.value(x).data(), c, h, w);
        self.push(Op::AvgPool2(x), &[c, h / 2, w / 2], out)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa.to_vec())
    }

    fn zip_with(&mut self, op: Op<T>, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        let shape = self.same_shape(op.name(), a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(op, &shape, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    fn unary(&mut self, op: Op<T>, x: Var, f: impl Fn(T) -> T) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let out = self.value(x).data().iter().map(|&v| f(v)).collect();
        self.push(op, &shape, out)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        self.unary(Op::Scale(x, factor), x, |v| v * factor)
    }

    /// Elementwise `max(0, x)`.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Relu(x), x, |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Abs(x), x, |v| v.abs())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Square(x), x, |v| v * v)
    }

    /// Mean over all elements, as a `[1]` tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(shape_err("mean", "empty tensor"));
        }
        let s: T = t.data().iter().copied().sum::<T>() / T::of(t.len() as f64);
        self.push(Op::Mean(x), &[1], vec![s])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Op::Sum(x), &[1], vec![s])
    }

    /// Channel concatenation of rank-3 tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_channels(&vals)?;
        let shape = t.shape().to_vec();
        self.push(Op::Concat(parts.to_vec()), &shape, t.into_data())
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).slice_channels(start, len)?;
        let shape = t.shape().to_vec();
        self.push(Op::SliceChannels { x, start }, &shape, t.into_data())
    }

    /// `p[1,h,w]` broadcast over the channels of `x[c,h,w]`.
    pub fn mul_channel(&mut self, p: Var, x: Var) -> Result<Var> {
        let (pc, ph, pw) = self.dims3(p)?;
        let (c, h, w) = self.dims3(x)?;
        if pc != 1 || (ph, pw) != (h, w) {
            return Err(shape_err("mul_channel", format!("[{pc},{ph},{pw}] vs [{c},{h},{w}]")));
        }
        let pv = self.value(p).data();
        let out = self
            .value(x)
            .data()
            .chunks(h * w)
            .flat_map(|plane| plane.iter().zip(pv).map(|(&a, &b)| a * b))
            .collect();
        self.push(Op::MulChannel { p, x }, &[c, h, w], out)
    }

    /// Row softmax of an `[n, m]` matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let [n, m] = shape[..] else {
            return Err(shape_err("softmax_rows", format!("expected rank 2, got {shape:?}")));
        };
        self.softmax_axis(x, n, m, 1)
    }

    /// Per-pixel softmax over the channels of `[c, h, w]`.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.dims3(x)?;
        self.softmax_axis(x, 1, c, h * w)
    }

    fn softmax_axis(&mut self, x: Var, outer: usize, len: usize, inner: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let out = kernels::softmax_forward(self.value(x).data(), outer, len, inner);
        self.push(
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            &shape,
            out,
        )
    }

    /// Stacks the zero-padded `patch x patch` neighbourhood of every pixel:
    /// `[d, h, w]` to `[d * patch^2, h, w]`. `patch = 1` is the identity.
    pub fn unfold(&mut self, x: Var, patch: usize) -> Result<Var> {
        if patch % 2 == 0 {
            return Err(GraphError::InvalidArgument {
                op: "unfold",
                detail: format!("patch {patch} must be odd"),
            });
        }
        let (d, h, w) = self.dims3(x)?;
        let out = kernels::im2col(self.value(x).data(), d, h, w, patch, patch, patch / 2);
        self.push(Op::Unfold { x, patch }, &[d * patch * patch, h, w], out)
    }

    /// Window-restricted attention: `q`, `k` are `[dq, h, w]` descriptors,
    /// `v` is `[dv, h, w]`; returns `[dv, h, w]`.
    pub fn window_attention(&mut self, q: Var, k: Var, v: Var, window: usize) -> Result<Var> {
        if window == 0 {
            return Err(GraphError::InvalidArgument {
                op: "window_attention",
                detail: "window must be positive".into(),
            });
        }
        let (dq, h, w) = self.dims3(q)?;
        if self.value(k).shape() != self.value(q).shape() {
            return Err(shape_err("window_attention", "query/key shapes differ"));
        }
        let (dv, vh, vw) = self.dims3(v)?;
        if (vh, vw) != (h, w) {
            return Err(shape_err("window_attention", format!("value grid {vh}x{vw} vs {h}x{w}")));
        }
        let tiles = kernels::window_tiles(h, w, window);
        let (out, weights) = kernels::window_attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            dq,
            dv,
            h * w,
            &tiles,
        );
        self.push(
            Op::WindowAttention {
                q,
                k,
                v,
                tiles,
                weights,
            },
            &[dv, h, w],
            out,
        )
    }

    /// Collects the listed pixels of `x[c,h,w]` into a `[c, 1, n]` strip.
    pub fn gather_pixels(&mut self, x: Var, pixels: &[usize]) -> Result<Var> {
        let (c, h, w) = self.dims3(x)?;
        let plane = h * w;
        if pixels.iter().any(|&p| p >= plane) {
            return Err(shape_err("gather_pixels", "pixel index out of range"));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(c * pixels.len());
        for ch in 0..c {
            out.extend(pixels.iter().map(|&p| xv[ch * plane + p]));
        }
        self.push(
            Op::GatherPixels {
                x,
                pixels: pixels.to_vec(),
            },
            &[c, 1, pixels.len()],
            out,
        )
    }

    /// Inverse of [`Graph::gather_pixels`]: writes `[c, 1, n]` strips back to
    /// their pixel positions in a zero `[c, h, w]` image.
    pub fn scatter_pixels(&mut self, parts: &[(Var, Vec<usize>)], h: usize, w: usize) -> Result<Var> {
        let plane = h * w;
        let mut c_out = None;
        let mut out: Vec<T> = Vec::new();
        for (v, px) in parts {
            let (c, one, n) = self.dims3(*v)?;
            if one != 1 || n != px.len() || px.iter().any(|&p| p >= plane) {
                return Err(shape_err("scatter_pixels", "strip does not match its pixel list"));
            }
            match c_out {
                None => {
                    c_out = Some(c);
                    out = vec![T::zero(); c * plane];
                }
                Some(c0) if c0 != c => return Err(shape_err("scatter_pixels", "channel counts differ")),
                _ => {}
            }
            let vals = self.value(*v).data();
            for ch in 0..c {
                for (i, &p) in px.iter().enumerate() {
                    out[ch * plane + p] = vals[ch * n + i];
                }
            }
        }
        let c = c_out.ok_or_else(|| shape_err("scatter_pixels", "no parts"))?;
        self.push(
            Op::ScatterPixels {
                parts: parts.to_vec(),
            },
            &[c, h, w],
            out,
        )
    }

    /// Reverse pass from a scalar `loss`. Fills gradients of every leaf that
    /// requires one. Fails when called a second time.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(GraphError::BackwardTwice);
        }
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(GraphError::NonScalarLoss(shape));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.vjp(i, &g);
            for (v, gv) in contributions {
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&gv).for_each(|(a, b)| *a += *b),
                    None => node.grad = Some(gv),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` for each of its inputs.
    fn vjp(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, pad } => {
                let (c, h, wd) = self.nodes[x.0].value.dims3().expect("rank 3");
                let ws = self.nodes[w.0].value.shape();
                let (o, kh, kw) = (ws[0], ws[2], ws[3]);
                if self.wants(*w) || b.is_some_and(|b| self.wants(b)) {
                    let (dx, dw, db) = kernels::conv2d_backward(g, val(*x), c, h, wd, val(*w), o, kh, kw, *pad);
                    out.push((*w, dw));
                    if let Some(b) = b {
                        out.push((*b, db));
                    }
                    out.push((*x, dx));
                } else if self.wants(*x) {
                    let dx = kernels::conv2d_backward_input(g, c, h, wd, val(*w), o, kh, kw, *pad);
                    out.push((*x, dx));
                }
            }
            Op::DepthwiseConv2d { x, w, pad } => {
                let (c, h, wd) = self.nodes[x.0].value.dims3().expect("rank 3");
                let k = self.nodes[w.0].value.shape()[1];
                let (dx, dw) = kernels::depthwise_conv2d_backward(g, val(*x), c, h, wd, val(*w), k, *pad);
                out.push((*x, dx));
                out.push((*w, dw));
            }
            Op::TransposedConvS2 { x, w } => {
                let (c, h, wd) = self.nodes[x.0].value.dims3().expect("rank 3");
                let k = self.nodes[w.0].value.shape()[1];
                let (dx, dw) = kernels::transposed_conv_s2_backward(g, val(*x), c, h, wd, val(*w), k);
                out.push((*x, dx));
                out.push((*w, dw));
            }
            Op::AvgPool2(x) => {
                let (c, h, w) = self.nodes[x.0].value.dims3().expect("rank 3");
                out.push((*x, kernels::avg_pool2_backward(g, c, h, w)));
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|&x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                out.push((*a, g.iter().zip(vb).map(|(&g, &y)| g * y).collect()));
                out.push((*b, g.iter().zip(va).map(|(&g, &x)| g * x).collect()));
            }
            Op::Scale(x, f) => out.push((*x, g.iter().map(|&v| v * *f).collect())),
            Op::Relu(x) => out.push((
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect(),
            )),
            Op::Abs(x) => out.push((
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(&g, &v)| {
                        if v > T::zero() {
                            g
                        } else if v < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect(),
            )),
            Op::Square(x) => out.push((
                *x,
                g.iter().zip(val(*x)).map(|(&g, &v)| g * (v + v)).collect(),
            )),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                out.push((*x, vec![g[0] / T::of(n as f64); n]));
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                out.push((*x, vec![g[0]; n]));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    out.push((*p, g[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::SliceChannels { x, start } => {
                let (_, h, w) = self.nodes[x.0].value.dims3().expect("rank 3");
                let mut dx = vec![T::zero(); self.nodes[x.0].value.len()];
                let off = start * h * w;
                dx[off..off + g.len()].copy_from_slice(g);
                out.push((*x, dx));
            }
            Op::MulChannel { p, x } => {
                let (_, h, w) = self.nodes[x.0].value.dims3().expect("rank 3");
                let plane = h * w;
                let (pv, xv) = (val(*p), val(*x));
                let mut dp = vec![T::zero(); plane];
                let mut dx = vec![T::zero(); xv.len()];
                for (ch, (gp, xp)) in g.chunks(plane).zip(xv.chunks(plane)).enumerate() {
                    for j in 0..plane {
                        dp[j] += gp[j] * xp[j];
                        dx[ch * plane + j] = gp[j] * pv[j];
                    }
                }
                out.push((*p, dp));
                out.push((*x, dx));
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let dx = kernels::softmax_backward(node.value.data(), g, *outer, *len, *inner);
                out.push((*x, dx));
            }
            Op::Unfold { x, patch } => {
                let (d, h, w) = self.nodes[x.0].value.dims3().expect("rank 3");
                out.push((*x, kernels::col2im(g, d, h, w, *patch, *patch, patch / 2)));
            }
            Op::WindowAttention {
                q,
                k,
                v,
                tiles,
                weights,
            } => {
                let (dq, h, w) = self.nodes[q.0].value.dims3().expect("rank 3");
                let dv = self.nodes[v.0].value.shape()[0];
                let (gq, gk, gv) = kernels::window_attention_backward(
                    g,
                    val(*q),
                    val(*k),
                    val(*v),
                    dq,
                    dv,
                    h * w,
                    tiles,
                    weights,
                );
                out.push((*q, gq));
                out.push((*k, gk));
                out.push((*v, gv));
            }
            Op::GatherPixels { x, pixels } => {
                let (c, h, w) = self.nodes[x.0].value.dims3().expect("rank 3");
                let plane = h * w;
                let n = pixels.len();
                let mut dx = vec![T::zero(); c * plane];
                for ch in 0..c {
                    for (j, &p) in pixels.iter().enumerate() {
                        dx[ch * plane + p] += g[ch * n + j];
                    }
                }
                out.push((*x, dx));
            }
            Op::ScatterPixels { parts } => {
                let (c, h, w) = node.value.dims3().expect("rank 3");
                let plane = h * w;
                for (v, px) in parts {
                    let n = px.len();
                    let mut dv = vec![T::zero(); c * n];
                    for ch in 0..c {
                        for (j, &p) in px.iter().enumerate() {
                            dv[ch * n + j] = g[ch * plane + p];
                        }
                    }
                    out.push((*v, dv));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_sum_gradient_is_the_other_factor() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let w = g.parameter(Tensor::new(&[3], vec![0.3, 0.1, 4.0]).unwrap());
        let p = g.mul(w, x).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, -2.0, 0.5]);
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut g = Graph::<f64>::new();
        let w = g.parameter(Tensor::scalar(2.0));
        let l = g.square(w).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[4.0]);
        assert_eq!(g.backward(l), Err(GraphError::BackwardTwice));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let w = g.parameter(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(w), Err(GraphError::NonScalarLoss(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::<f64>::new();
        let w = g.parameter(Tensor::scalar(3.0));
        let a = g.add(w, w).unwrap();
        let l = g.mul(a, w).unwrap();
        g.backward(l).unwrap();
        // d(2w^2)/dw = 4w
        assert_eq!(g.grad(w).unwrap(), &[12.0]);
    }

    #[test]
    fn odd_pool_is_an_error() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4]));
        assert!(matches!(g.avg_pool2(x), Err(GraphError::OddDimension { .. })));
    }

    #[test]
    fn non_finite_values_are_reported() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[2], f32::MAX));
        assert!(matches!(g.scale(x, 10.0), Err(GraphError::NonFinite { op: "scale" })));
    }
}
