use crate::real::Real;

/// Softmax over the middle axis of an `[outer, len, inner]` view.
///
/// `softmax_rows` on an `[n, m]` matrix is `(n, m, 1)`; a per-pixel softmax
/// over the channels of `[c, h, w]` is `(1, c, h*w)`. Each slice is shifted by
/// its maximum before exponentiation.
pub fn softmax_forward<T: Real>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let at = |j: usize| base + j * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..len {
                mx = mx.max(x[at(j)]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - mx).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[at(j)] /= sum;
            }
        }
    }
    out
}

/// Vector-Jacobian product of the softmax given its output `y`.
pub fn softmax_backward<T: Real>(
    y: &[T],
    grad_out: &[T],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let at = |j: usize| base + j * inner + i;
            let mut dot = T::zero();
            for j in 0..len {
                dot += y[at(j)] * grad_out[at(j)];
            }
            for j in 0..len {
                dx[at(j)] = y[at(j)] * (grad_out[at(j)] - dot);
            }
        }
    }
    dx
}
