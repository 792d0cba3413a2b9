//! Scalar abstraction over `f32` (training) and `f64` (gradient checks).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::par;

pub trait Real:
    Float
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Raw strided GEMM: `C = alpha * A * B + beta * C`.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing matrices of the
    /// stated sizes (same contract as `matrixmultiply::sgemm`).
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// How an operand of [`gemm`] is laid out in memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Stored row-major with the logical shape.
    Normal,
    /// Stored row-major as the transpose of the logical shape.
    Transposed,
}

const ROW_BLOCK: usize = 16;
const COL_BLOCK: usize = 2048;

struct SendPtr<T>(*mut T);
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}

/// `c[m×n] (+)= a[m×k] · b[k×n]`, `c` contiguous row-major.
///
/// Work is split over fixed-size row (or column) blocks, so the result does
/// not depend on the number of worker threads.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_layout: Layout,
    b: &[T],
    b_layout: Layout,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert_eq!(c.len(), m * n, "gemm: output size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    let ap = SendPtr(a.as_ptr() as *mut T);
    let bp = SendPtr(b.as_ptr() as *mut T);
    let cp = SendPtr(c.as_mut_ptr());

    if m >= 2 * ROW_BLOCK || n <= COL_BLOCK {
        let blocks = m.div_ceil(ROW_BLOCK);
        par::for_each_index(blocks, |blk| {
            let r0 = blk * ROW_BLOCK;
            let rows = ROW_BLOCK.min(m - r0);
            let (ap, bp, cp) = (&ap, &bp, &cp);
            // SAFETY: row blocks of C are disjoint; A and B are only read.
            unsafe {
                T::gemm_raw(
                    rows,
                    k,
                    n,
                    T::one(),
                    ap.0.offset(r0 as isize * rsa),
                    rsa,
                    csa,
                    bp.0,
                    rsb,
                    csb,
                    beta,
                    cp.0.add(r0 * n),
                    n as isize,
                    1,
                )
            }
        });
    } else {
        let blocks = n.div_ceil(COL_BLOCK);
        par::for_each_index(blocks, |blk| {
            let c0 = blk * COL_BLOCK;
            let cols = COL_BLOCK.min(n - c0);
            let (ap, bp, cp) = (&ap, &bp, &cp);
            // SAFETY: column blocks of C are disjoint; A and B are only read.
            unsafe {
                T::gemm_raw(
                    m,
                    k,
                    cols,
                    T::one(),
                    ap.0,
                    rsa,
                    csa,
                    bp.0.offset(c0 as isize * csb),
                    rsb,
                    csb,
                    beta,
                    cp.0.add(c0),
                    n as isize,
                    1,
                )
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn all_layouts_match_naive() {
        for &(m, k, n) in &[(3, 4, 5), (40, 7, 3), (2, 9, 5000), (1, 1, 1)] {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 13 % 7) as f64) * 0.5).collect();
            let want = naive(m, k, n, &a, &b);
            let at = transpose(m, k, &a);
            let bt = transpose(k, n, &b);
            for (aa, al) in [(&a, Layout::Normal), (&at, Layout::Transposed)] {
                for (bb, bl) in [(&b, Layout::Normal), (&bt, Layout::Transposed)] {
                    let mut c = vec![0.0; m * n];
                    gemm(m, k, n, aa, al, bb, bl, &mut c, false);
                    assert_eq!(c, want);
                }
            }
            let mut c = want.clone();
            gemm(m, k, n, &a, Layout::Normal, &b, Layout::Normal, &mut c, true);
            assert!(c.iter().zip(&want).all(|(x, y)| *x == 2.0 * y));
        }
    }
}
