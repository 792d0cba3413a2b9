use crate::par;
use crate::real::Real;

/// 2x2 non-overlapping mean. `h` and `w` must be even (checked by the caller).
pub fn avg_pool2_forward<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = vec![T::zero(); c * oh * ow];
    if oh * ow == 0 {
        return out;
    }
    par::for_each_chunk_mut(&mut out, oh * ow, |ci, dst| {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let a = src[2 * i * w + 2 * j];
                let b = src[2 * i * w + 2 * j + 1];
                let cc = src[(2 * i + 1) * w + 2 * j];
                let d = src[(2 * i + 1) * w + 2 * j + 1];
                dst[i * ow + j] = (a + b + cc + d) * quarter;
            }
        }
    });
    out
}

pub fn avg_pool2_backward<T: Real>(grad_out: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut dx = vec![T::zero(); c * h * w];
    if h * w == 0 {
        return dx;
    }
    par::for_each_chunk_mut(&mut dx, h * w, |ci, dst| {
        let g = &grad_out[ci * oh * ow..(ci + 1) * oh * ow];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = g[(y / 2) * ow + x / 2] * quarter;
            }
        }
    });
    dx
}
