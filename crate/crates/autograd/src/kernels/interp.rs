use crate::par;
use crate::real::Real;

/// Cubic convolution parameter (Catmull-Rom, the common "bicubic" choice).
pub const BICUBIC_A: f64 = -0.5;

/// Keys cubic convolution kernel with parameter [`BICUBIC_A`].
pub fn cubic_weight(d: f64) -> f64 {
    let a = BICUBIC_A;
    let d = d.abs();
    if d <= 1.0 {
        (a + 2.0) * d.powi(3) - (a + 3.0) * d * d + 1.0
    } else if d < 2.0 {
        a * d.powi(3) - 5.0 * a * d * d + 8.0 * a * d - 4.0 * a
    } else {
        0.0
    }
}

/// Mirror an index into `0..n` without repeating the edge sample
/// (`-1 -> 1`, `n -> n - 2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Taps and weights for output sample `o` of a 2x upsampling along one axis
/// (pixel centres aligned, i.e. source coordinate `(o + 0.5) / 2 - 0.5`).
fn taps(o: usize, n: usize) -> [(usize, f64); 4] {
    let x = (o as f64 + 0.5) / 2.0 - 0.5;
    let x0 = x.floor();
    let t = x - x0;
    let x0 = x0 as isize;
    [
        (reflect_index(x0 - 1, n), cubic_weight(t + 1.0)),
        (reflect_index(x0, n), cubic_weight(t)),
        (reflect_index(x0 + 1, n), cubic_weight(1.0 - t)),
        (reflect_index(x0 + 2, n), cubic_weight(2.0 - t)),
    ]
}

/// Separable bicubic 2x upsampling of `x[c,h,w]` with reflect borders.
pub fn bicubic_up2<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let col_taps: Vec<_> = (0..ow).map(|o| taps(o, w)).collect();
    let row_taps: Vec<_> = (0..oh).map(|o| taps(o, h)).collect();
    let mut out = vec![T::zero(); c * oh * ow];
    if oh * ow == 0 {
        return out;
    }
    par::for_each_chunk_mut(&mut out, oh * ow, |ci, dst| {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        // horizontal pass into [h, ow]
        let mut tmp = vec![0.0f64; h * ow];
        for y in 0..h {
            for (ox, tp) in col_taps.iter().enumerate() {
                tmp[y * ow + ox] = tp
                    .iter()
                    .map(|&(ix, wt)| wt * src[y * w + ix].as_f64())
                    .sum();
            }
        }
        for (oy, tp) in row_taps.iter().enumerate() {
            for ox in 0..ow {
                let v: f64 = tp.iter().map(|&(iy, wt)| wt * tmp[iy * ow + ox]).sum();
                dst[oy * ow + ox] = T::of(v);
            }
        }
    });
    out
}
