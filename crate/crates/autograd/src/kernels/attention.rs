//! Nonlocal attention restricted to non-overlapping square windows.
//!
//! The image is cut into `window x window` tiles (the last row/column of tiles
//! may be smaller). Inside a tile every pixel attends to every other pixel of
//! the same tile with weights `softmax_j(q_i . k_j)`; pixels never see other
//! tiles. A partial edge tile simply has fewer members, which is the same as
//! padding it and masking the padded scores to minus infinity.

use crate::par;
use crate::real::Real;

/// Pixel indices (row-major, into an `h*w` plane) of one window tile.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tile {
    pub pixels: Vec<usize>,
}

/// Row-major list of tiles covering an `h x w` grid.
pub fn window_tiles(h: usize, w: usize, window: usize) -> Vec<Tile> {
    assert!(window > 0, "window must be positive");
    let mut tiles = Vec::new();
    for ty in (0..h).step_by(window) {
        for tx in (0..w).step_by(window) {
            let mut pixels = Vec::with_capacity(window * window);
            for y in ty..(ty + window).min(h) {
                for x in tx..(tx + window).min(w) {
                    pixels.push(y * w + x);
                }
            }
            tiles.push(Tile { pixels });
        }
    }
    tiles
}

fn gather<T: Real>(src: &[T], dims: usize, plane: usize, pixels: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(pixels.len() * dims);
    for &p in pixels {
        for d in 0..dims {
            out.push(src[d * plane + p]);
        }
    }
    out
}

/// Output per tile: the `n x n` weights and the `n x dv` filtered values.
type TileForward<T> = (Vec<T>, Vec<T>);

/// `q`, `k` are `[dq, plane]`, `v` is `[dv, plane]`. Returns the filtered
/// `[dv, plane]` values and the row-stochastic weight matrix of every tile.
pub fn window_attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    dq: usize,
    dv: usize,
    plane: usize,
    tiles: &[Tile],
) -> (Vec<T>, Vec<Vec<T>>) {
    let per: Vec<TileForward<T>> = par::map_indices(tiles.len(), |ti| {
        let px = &tiles[ti].pixels;
        let n = px.len();
        let qt = gather(q, dq, plane, px);
        let kt = gather(k, dq, plane, px);
        let vt = gather(v, dv, plane, px);
        let mut a = vec![T::zero(); n * n];
        for i in 0..n {
            let qi = &qt[i * dq..(i + 1) * dq];
            let row = &mut a[i * n..(i + 1) * n];
            let mut mx = T::neg_infinity();
            for (j, s) in row.iter_mut().enumerate() {
                let kj = &kt[j * dq..(j + 1) * dq];
                *s = qi.iter().zip(kj).map(|(x, y)| *x * *y).sum();
                mx = mx.max(*s);
            }
            let mut sum = T::zero();
            for s in row.iter_mut() {
                *s = (*s - mx).exp();
                sum += *s;
            }
            for s in row.iter_mut() {
                *s /= sum;
            }
        }
        let mut o = vec![T::zero(); n * dv];
        for i in 0..n {
            let oi = &mut o[i * dv..(i + 1) * dv];
            for j in 0..n {
                let wij = a[i * n + j];
                let vj = &vt[j * dv..(j + 1) * dv];
                for (acc, x) in oi.iter_mut().zip(vj) {
                    *acc += wij * *x;
                }
            }
        }
        (a, o)
    });
    let mut out = vec![T::zero(); dv * plane];
    let mut weights = Vec::with_capacity(tiles.len());
    for (tile, (a, o)) in tiles.iter().zip(per) {
        for (i, &p) in tile.pixels.iter().enumerate() {
            for d in 0..dv {
                out[d * plane + p] = o[i * dv + d];
            }
        }
        weights.push(a);
    }
    (out, weights)
}

/// Gradients `(dq, dk, dv)` of [`window_attention_forward`] given the stored weights.
#[allow(clippy::too_many_arguments)]
pub fn window_attention_backward<T: Real>(
    grad_out: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    dq: usize,
    dv: usize,
    plane: usize,
    tiles: &[Tile],
    weights: &[Vec<T>],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let per: Vec<(Vec<T>, Vec<T>, Vec<T>)> = par::map_indices(tiles.len(), |ti| {
        let px = &tiles[ti].pixels;
        let n = px.len();
        let a = &weights[ti];
        let qt = gather(q, dq, plane, px);
        let kt = gather(k, dq, plane, px);
        let vt = gather(v, dv, plane, px);
        let go = gather(grad_out, dv, plane, px);
        // dA = dO V^T, dV = A^T dO
        let mut da = vec![T::zero(); n * n];
        let mut gv = vec![T::zero(); n * dv];
        for i in 0..n {
            let goi = &go[i * dv..(i + 1) * dv];
            for j in 0..n {
                let vj = &vt[j * dv..(j + 1) * dv];
                da[i * n + j] = goi.iter().zip(vj).map(|(x, y)| *x * *y).sum();
                let wij = a[i * n + j];
                let gvj = &mut gv[j * dv..(j + 1) * dv];
                for (acc, x) in gvj.iter_mut().zip(goi) {
                    *acc += wij * *x;
                }
            }
        }
        // dS = A * (dA - rowdot(A, dA))
        let mut ds = vec![T::zero(); n * n];
        for i in 0..n {
            let row = i * n..(i + 1) * n;
            let dot: T = a[row.clone()].iter().zip(&da[row.clone()]).map(|(x, y)| *x * *y).sum();
            for j in 0..n {
                ds[i * n + j] = a[i * n + j] * (da[i * n + j] - dot);
            }
        }
        // dQ = dS K, dK = dS^T Q
        let mut gq = vec![T::zero(); n * dq];
        let mut gk = vec![T::zero(); n * dq];
        for i in 0..n {
            for j in 0..n {
                let s = ds[i * n + j];
                if s == T::zero() {
                    continue;
                }
                let kj = &kt[j * dq..(j + 1) * dq];
                let qi = &qt[i * dq..(i + 1) * dq];
                let gqi = &mut gq[i * dq..(i + 1) * dq];
                for (acc, x) in gqi.iter_mut().zip(kj) {
                    *acc += s * *x;
                }
                let gkj = &mut gk[j * dq..(j + 1) * dq];
                for (acc, x) in gkj.iter_mut().zip(qi) {
                    *acc += s * *x;
                }
            }
        }
        (gq, gk, gv)
    });
    let mut gq_all = vec![T::zero(); dq * plane];
    let mut gk_all = vec![T::zero(); dq * plane];
    let mut gv_all = vec![T::zero(); dv * plane];
    for (tile, (gq, gk, gv)) in tiles.iter().zip(per) {
        for (i, &p) in tile.pixels.iter().enumerate() {
            for d in 0..dq {
                gq_all[d * plane + p] = gq[i * dq + d];
                gk_all[d * plane + p] = gk[i * dq + d];
            }
            for d in 0..dv {
                gv_all[d * plane + p] = gv[i * dv + d];
            }
        }
    }
    (gq_all, gk_all, gv_all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiles_partition_the_grid() {
        let tiles = window_tiles(7, 12, 5);
        assert_eq!(tiles.len(), 2 * 3);
        let mut seen = vec![0; 7 * 12];
        for t in &tiles {
            for &p in &t.pixels {
                seen[p] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(tiles[0].pixels.len(), 25);
        assert_eq!(tiles[5].pixels.len(), 2 * 2);
    }
}
