//! Dense kernels for the 3D CNN. Activations are laid out `[C][B][D][H][W]`
//! so a convolution is one matrix product over all samples of a batch.
//!
//! Every output element is accumulated in a fixed order that does not
//! depend on the batch size or on how work is split across threads.

use rayon::prelude::*;

use super::Real;

const GEMM_ROWS: usize = 4;
const GEMM_TILE: usize = 512;

/// `c += a * b` with `a: m x k`, `b: k x n`, `c: m x n`, all row-major.
///
/// Each `c[i][j]` accumulates `a[i][p] * b[p][j]` for `p = 0..k` in order.
pub fn gemm_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    c.par_chunks_mut(GEMM_ROWS * n)
        .enumerate()
        .for_each(|(blk, cblk)| {
            let r0 = blk * GEMM_ROWS;
            let rows = cblk.len() / n;
            for j0 in (0..n).step_by(GEMM_TILE) {
                let j1 = (j0 + GEMM_TILE).min(n);
                let len = j1 - j0;
                if rows == GEMM_ROWS {
                    let (c0, rest) = cblk.split_at_mut(n);
                    let (c1, rest) = rest.split_at_mut(n);
                    let (c2, c3) = rest.split_at_mut(n);
                    let c0 = &mut c0[j0..j1];
                    let c1 = &mut c1[j0..j1];
                    let c2 = &mut c2[j0..j1];
                    let c3 = &mut c3[j0..j1];
                    for p in 0..k {
                        let brow = &b[p * n + j0..p * n + j1];
                        let a0 = a[r0 * k + p];
                        let a1 = a[(r0 + 1) * k + p];
                        let a2 = a[(r0 + 2) * k + p];
                        let a3 = a[(r0 + 3) * k + p];
                        for j in 0..len {
                            let bv = brow[j];
                            c0[j] = c0[j] + a0 * bv;
                            c1[j] = c1[j] + a1 * bv;
                            c2[j] = c2[j] + a2 * bv;
                            c3[j] = c3[j] + a3 * bv;
                        }
                    }
                } else {
                    for r in 0..rows {
                        let crow = &mut cblk[r * n + j0..r * n + j1];
                        for p in 0..k {
                            let av = a[(r0 + r) * k + p];
                            let brow = &b[p * n + j0..p * n + j1];
                            for (cv, &bv) in crow.iter_mut().zip(brow) {
                                *cv = *cv + av * bv;
                            }
                        }
                    }
                }
            }
        });
}

/// Row-major transpose of an `rows x cols` matrix.
pub fn transpose<T: Real>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    const BLK: usize = 32;
    for r0 in (0..rows).step_by(BLK) {
        for c0 in (0..cols).step_by(BLK) {
            for r in r0..(r0 + BLK).min(rows) {
                for c in c0..(c0 + BLK).min(cols) {
                    out[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
    out
}

/// Spatial extent `(depth, height, width)` of one activation plane.
pub type Dims = [usize; 3];

pub fn volume(d: Dims) -> usize {
    d[0] * d[1] * d[2]
}

/// Unfolds `[cin][batch][dims]` into `[cin*27][batch*vol]` for a 3x3x3
/// kernel with stride 1 and zero padding 1. Row order is `(ci, kd, kh, kw)`.
pub fn im2col<T: Real>(input: &[T], cin: usize, batch: usize, dims: Dims) -> Vec<T> {
    let [dd, hh, ww] = dims;
    let vol = volume(dims);
    let n = batch * vol;
    let mut cols = vec![T::zero(); cin * 27 * n];
    cols.par_chunks_mut(n).enumerate().for_each(|(row, out)| {
        let ci = row / 27;
        let (kd, kh, kw) = ((row / 9) % 3, (row / 3) % 3, row % 3);
        for b in 0..batch {
            let src = &input[(ci * batch + b) * vol..(ci * batch + b + 1) * vol];
            let dst = &mut out[b * vol..(b + 1) * vol];
            for d in 0..dd {
                let sd = d + kd;
                if sd < 1 || sd > dd {
                    continue;
                }
                let sd = sd - 1;
                for h in 0..hh {
                    let sh = h + kh;
                    if sh < 1 || sh > hh {
                        continue;
                    }
                    let sh = sh - 1;
                    let srow = &src[(sd * hh + sh) * ww..(sd * hh + sh + 1) * ww];
                    let drow = &mut dst[(d * hh + h) * ww..(d * hh + h + 1) * ww];
                    // output column w reads source column w + kw - 1
                    let (lo, hi) = (usize::from(kw == 0), ww - usize::from(kw == 2));
                    for w in lo..hi {
                        drow[w] = srow[w + kw - 1];
                    }
                }
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`]: scatters `[cin*27][batch*vol]` back onto
/// `[cin][batch][dims]`, summing overlapping contributions.
pub fn col2im<T: Real>(cols: &[T], cin: usize, batch: usize, dims: Dims) -> Vec<T> {
    let [dd, hh, ww] = dims;
    let vol = volume(dims);
    let n = batch * vol;
    let mut out = vec![T::zero(); cin * batch * vol];
    out.par_chunks_mut(batch * vol).enumerate().for_each(|(ci, plane)| {
        for tap in 0..27 {
            let (kd, kh, kw) = (tap / 9, (tap / 3) % 3, tap % 3);
            let row = &cols[(ci * 27 + tap) * n..(ci * 27 + tap + 1) * n];
            for b in 0..batch {
                let src = &row[b * vol..(b + 1) * vol];
                let dst = &mut plane[b * vol..(b + 1) * vol];
                for d in 0..dd {
                    let sd = d + kd;
                    if sd < 1 || sd > dd {
                        continue;
                    }
                    let sd = sd - 1;
                    for h in 0..hh {
                        let sh = h + kh;
                        if sh < 1 || sh > hh {
                            continue;
                        }
                        let sh = sh - 1;
                        let (lo, hi) = (usize::from(kw == 0), ww - usize::from(kw == 2));
                        for w in lo..hi {
                            let di = (sd * hh + sh) * ww + w + kw - 1;
                            dst[di] = dst[di] + src[(d * hh + h) * ww + w];
                        }
                    }
                }
            }
        }
    });
    out
}

/// Pool window along one axis: 2, or the whole axis when it is shorter.
pub fn pool_window(n: usize) -> usize {
    n.min(2)
}

pub fn pooled_dims(d: Dims) -> Dims {
    d.map(|n| n / pool_window(n))
}

/// Max pooling with window = stride = [`pool_window`] per axis, floor mode.
/// Returns the pooled tensor and, per output, the flat input index of the
/// first maximum in window order.
pub fn max_pool<T: Real>(input: &[T], planes: usize, dims: Dims) -> (Vec<T>, Vec<u32>) {
    let [_, hh, ww] = dims;
    let [kd, kh, kw] = dims.map(pool_window);
    let od = pooled_dims(dims);
    let (ivol, ovol) = (volume(dims), volume(od));
    let mut out = vec![T::zero(); planes * ovol];
    let mut arg = vec![0u32; planes * ovol];
    for p in 0..planes {
        let base = p * ivol;
        for d in 0..od[0] {
            for h in 0..od[1] {
                for w in 0..od[2] {
                    let first = base + ((d * kd) * hh + h * kh) * ww + w * kw;
                    let (mut best, mut best_i) = (input[first], first);
                    for a in 0..kd {
                        for b in 0..kh {
                            for c in 0..kw {
                                let i = base + ((d * kd + a) * hh + h * kh + b) * ww + w * kw + c;
                                if input[i] > best {
                                    best = input[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    let o = p * ovol + (d * od[1] + h) * od[2] + w;
                    out[o] = best;
                    arg[o] = best_i as u32;
                }
            }
        }
    }
    (out, arg)
}

/// Routes pooled gradients back to the recorded argmax positions.
pub fn max_unpool<T: Real>(grad: &[T], argmax: &[u32], input_len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); input_len];
    for (&g, &i) in grad.iter().zip(argmax) {
        out[i as usize] = out[i as usize] + g;
    }
    out
}
