use crate::par;
use crate::real::{gemm, Layout, Real};

#[inline]
fn out_extent(n: usize, k: usize, pad: usize) -> usize {
    (n + 2 * pad + 1).saturating_sub(k)
}

/// Unfolds `x[c,h,w]` into `[c*kh*kw, ho*wo]` columns (zero padding, stride 1).
pub fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) -> Vec<T> {
    let ho = out_extent(h, kh, pad);
    let wo = out_extent(w, kw, pad);
    let plane = ho * wo;
    let mut col = vec![T::zero(); c * kh * kw * plane];
    if plane == 0 {
        return col;
    }
    par::for_each_chunk_mut(&mut col, plane, |row, dst| {
        let ci = row / (kh * kw);
        let ki = (row / kw) % kh;
        let kj = row % kw;
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for oy in 0..ho {
            let iy = oy as isize + ki as isize - pad as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let srow = &src[iy as usize * w..(iy as usize + 1) * w];
            let drow = &mut dst[oy * wo..(oy + 1) * wo];
            for (ox, d) in drow.iter_mut().enumerate() {
                let ix = ox as isize + kj as isize - pad as isize;
                if ix >= 0 && ix < w as isize {
                    *d = srow[ix as usize];
                }
            }
        }
    });
    col
}

/// Adjoint of [`im2col`]: scatters columns back onto a `[c,h,w]` image, summing overlaps.
pub fn col2im<T: Real>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) -> Vec<T> {
    let ho = out_extent(h, kh, pad);
    let wo = out_extent(w, kw, pad);
    let plane = ho * wo;
    let mut x = vec![T::zero(); c * h * w];
    if h * w == 0 {
        return x;
    }
    par::for_each_chunk_mut(&mut x, h * w, |ci, dst| {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = oy as isize + ki as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = ox as isize + kj as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[iy as usize * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    });
    x
}

/// Stride-1 cross-correlation with zero padding.
///
/// `x[c,h,w]`, `weight[o,c,kh,kw]`, optional `bias[o]`; returns `[o,ho,wo]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: Option<&[T]>,
    o: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) -> Vec<T> {
    let ho = out_extent(h, kh, pad);
    let wo = out_extent(w, kw, pad);
    let plane = ho * wo;
    let mut out = vec![T::zero(); o * plane];
    let ckk = c * kh * kw;
    if kh == 1 && kw == 1 && pad == 0 {
        gemm(o, ckk, plane, weight, Layout::Normal, x, Layout::Normal, &mut out, false);
    } else {
        let col = im2col(x, c, h, w, kh, kw, pad);
        gemm(o, ckk, plane, weight, Layout::Normal, &col, Layout::Normal, &mut out, false);
    }
    if let Some(b) = bias {
        for (oc, row) in out.chunks_mut(plane.max(1)).enumerate().take(o) {
            let bv = b[oc];
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

/// Gradient of [`conv2d_forward`] with respect to its input only (the adjoint map).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_input<T: Real>(
    grad_out: &[T],
    c: usize,
    h: usize,
    w: usize,
    weight: &[T],
    o: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) -> Vec<T> {
    let plane = out_extent(h, kh, pad) * out_extent(w, kw, pad);
    let ckk = c * kh * kw;
    let mut dcol = vec![T::zero(); ckk * plane];
    gemm(ckk, o, plane, weight, Layout::Transposed, grad_out, Layout::Normal, &mut dcol, false);
    if kh == 1 && kw == 1 && pad == 0 {
        dcol
    } else {
        col2im(&dcol, c, h, w, kh, kw, pad)
    }
}

/// Gradients of [`conv2d_forward`]: `(dx, dweight, dbias)`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    grad_out: &[T],
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    weight: &[T],
    o: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane = out_extent(h, kh, pad) * out_extent(w, kw, pad);
    let ckk = c * kh * kw;
    let mut dw = vec![T::zero(); o * ckk];
    if kh == 1 && kw == 1 && pad == 0 {
        gemm(o, plane, ckk, grad_out, Layout::Normal, x, Layout::Transposed, &mut dw, false);
    } else {
        let col = im2col(x, c, h, w, kh, kw, pad);
        gemm(o, plane, ckk, grad_out, Layout::Normal, &col, Layout::Transposed, &mut dw, false);
    }
    let db: Vec<T> = (0..o)
        .map(|oc| grad_out[oc * plane..(oc + 1) * plane].iter().copied().sum())
        .collect();
    let dx = conv2d_backward_input(grad_out, c, h, w, weight, o, kh, kw, pad);
    (dx, dw, db)
}

/// Channel-wise cross-correlation: `x[c,h,w]`, `weight[c,k,k]`, zero padding.
pub fn depthwise_conv2d_forward<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    weight: &[T],
    k: usize,
    pad: usize,
) -> Vec<T> {
    let ho = out_extent(h, k, pad);
    let wo = out_extent(w, k, pad);
    let mut out = vec![T::zero(); c * ho * wo];
    if ho * wo == 0 {
        return out;
    }
    par::for_each_chunk_mut(&mut out, ho * wo, |ci, dst| {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        let kern = &weight[ci * k * k..(ci + 1) * k * k];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                for ki in 0..k {
                    let iy = oy as isize + ki as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = ox as isize + kj as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            acc += kern[ki * k + kj] * src[iy as usize * w + ix as usize];
                        }
                    }
                }
                dst[oy * wo + ox] = acc;
            }
        }
    });
    out
}

/// Gradients of [`depthwise_conv2d_forward`]: `(dx, dweight)`.
#[allow(clippy::too_many_arguments)]
pub fn depthwise_conv2d_backward<T: Real>(
    grad_out: &[T],
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    weight: &[T],
    k: usize,
    pad: usize,
) -> (Vec<T>, Vec<T>) {
    let ho = out_extent(h, k, pad);
    let wo = out_extent(w, k, pad);
    let per: Vec<(Vec<T>, Vec<T>)> = par::map_indices(c, |ci| {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        let g = &grad_out[ci * ho * wo..(ci + 1) * ho * wo];
        let kern = &weight[ci * k * k..(ci + 1) * k * k];
        let mut dx = vec![T::zero(); h * w];
        let mut dk = vec![T::zero(); k * k];
        for oy in 0..ho {
            for ox in 0..wo {
                let gv = g[oy * wo + ox];
                for ki in 0..k {
                    let iy = oy as isize + ki as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = ox as isize + kj as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            let idx = iy as usize * w + ix as usize;
                            dx[idx] += kern[ki * k + kj] * gv;
                            dk[ki * k + kj] += src[idx] * gv;
                        }
                    }
                }
            }
        }
        (dx, dk)
    });
    let mut dx = Vec::with_capacity(c * h * w);
    let mut dk = Vec::with_capacity(c * k * k);
    for (a, b) in per {
        dx.extend(a);
        dk.extend(b);
    }
    (dx, dk)
}

/// Depthwise stride-2 transposed convolution, `x[c,h,w]` to `[c,2h,2w]`.
///
/// Input pixel `(i, j)` spreads `weight[c,a,b] * x` onto output
/// `(2i - p + a, 2j - p + b)` with `p = (k - 1) / 2`; one extra row/column of
/// output padding makes the result exactly twice the input size.
pub fn transposed_conv_s2_forward<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    weight: &[T],
    k: usize,
) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let p = (k - 1) / 2;
    let mut out = vec![T::zero(); c * oh * ow];
    if oh * ow == 0 {
        return out;
    }
    par::for_each_chunk_mut(&mut out, oh * ow, |ci, dst| {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        let kern = &weight[ci * k * k..(ci + 1) * k * k];
        for i in 0..h {
            for j in 0..w {
                let v = src[i * w + j];
                for a in 0..k {
                    let y = (2 * i + a) as isize - p as isize;
                    if y < 0 || y >= oh as isize {
                        continue;
                    }
                    for b in 0..k {
                        let xx = (2 * j + b) as isize - p as isize;
                        if xx >= 0 && xx < ow as isize {
                            dst[y as usize * ow + xx as usize] += kern[a * k + b] * v;
                        }
                    }
                }
            }
        }
    });
    out
}

/// Depthwise stride-2 convolution, the adjoint of [`transposed_conv_s2_forward`]:
/// `y[c,2h,2w]` to `[c,h,w]`.
pub fn conv_s2_depthwise<T: Real>(
    y: &[T],
    c: usize,
    h: usize,
    w: usize,
    weight: &[T],
    k: usize,
) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let p = (k - 1) / 2;
    let mut out = vec![T::zero(); c * h * w];
    if h * w == 0 {
        return out;
    }
    par::for_each_chunk_mut(&mut out, h * w, |ci, dst| {
        let src = &y[ci * oh * ow..(ci + 1) * oh * ow];
        let kern = &weight[ci * k * k..(ci + 1) * k * k];
        for i in 0..h {
            for j in 0..w {
                let mut acc = T::zero();
                for a in 0..k {
                    let yy = (2 * i + a) as isize - p as isize;
                    if yy < 0 || yy >= oh as isize {
                        continue;
                    }
                    for b in 0..k {
                        let xx = (2 * j + b) as isize - p as isize;
                        if xx >= 0 && xx < ow as isize {
                            acc += kern[a * k + b] * src[yy as usize * ow + xx as usize];
                        }
                    }
                }
                dst[i * w + j] = acc;
            }
        }
    });
    out
}

/// Gradients of [`transposed_conv_s2_forward`]: `(dx, dweight)`.
pub fn transposed_conv_s2_backward<T: Real>(
    grad_out: &[T],
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    weight: &[T],
    k: usize,
) -> (Vec<T>, Vec<T>) {
    let dx = conv_s2_depthwise(grad_out, c, h, w, weight, k);
    let (oh, ow) = (2 * h, 2 * w);
    let p = (k - 1) / 2;
    let dk: Vec<Vec<T>> = par::map_indices(c, |ci| {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        let g = &grad_out[ci * oh * ow..(ci + 1) * oh * ow];
        let mut dk = vec![T::zero(); k * k];
        for i in 0..h {
            for j in 0..w {
                let v = src[i * w + j];
                for a in 0..k {
                    let y = (2 * i + a) as isize - p as isize;
                    if y < 0 || y >= oh as isize {
                        continue;
                    }
                    for b in 0..k {
                        let xx = (2 * j + b) as isize - p as isize;
                        if xx >= 0 && xx < ow as isize {
                            dk[a * k + b] += v * g[y as usize * ow + xx as usize];
                        }
                    }
                }
            }
        }
        dk
    });
    (dx, dk.concat())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_adjoint() {
        let (c, h, w, k, p) = (2, 5, 4, 3, 1);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let col = im2col(&x, c, h, w, k, k, p);
        let y: Vec<f64> = (0..col.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let back = col2im(&y, c, h, w, k, k, p);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn valid_convolution_shrinks() {
        let x = vec![1.0f64; 25];
        let wts = vec![1.0f64; 9];
        let out = conv2d_forward(&x, 1, 5, 5, &wts, None, 1, 3, 3, 0);
        assert_eq!(out, vec![9.0; 9]);
    }
}
