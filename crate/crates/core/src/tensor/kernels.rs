//! Row-major dense kernels. Each output element is accumulated in a fixed
//! order regardless of how rows are split across threads.

use rayon::prelude::*;

const PAR_THRESHOLD: usize = 1 << 16;

/// `c[m,n] (+)= a[m,k] * b[k,n]`.
pub(crate) fn gemm(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize, acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !acc {
        c.fill(0.0);
    }
    if n < NARROW && k >= n {
        let bt = transpose(b, k, n);
        gemm_dot(a, &bt, c, m, k, n);
        return;
    }
    let row = |(i, c_row): (usize, &mut [f32])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

const NARROW: usize = 32;
const LANES: usize = 8;

/// Dot product with a fixed lane-blocked summation order.
#[inline]
fn dot(x: &[f32], y: &[f32]) -> f32 {
    let mut lanes = [0.0f32; LANES];
    let (xc, yc) = (x.chunks_exact(LANES), y.chunks_exact(LANES));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (xs, ys) in xc.zip(yc) {
        for l in 0..LANES {
            lanes[l] += xs[l] * ys[l];
        }
    }
    let mut tail = 0.0;
    for (a, b) in xr.iter().zip(yr) {
        tail += a * b;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
}

/// `c[m,n] += a[m,k] * bt[n,k]^T` as row-by-row dot products.
fn gemm_dot(a: &[f32], bt: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    let row = |(i, c_row): (usize, &mut [f32])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cv) in c_row.iter_mut().enumerate() {
            *cv += dot(a_row, &bt[j * k..(j + 1) * k]);
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c[m,n] (+)= a[k,m]^T * b[k,n]`.
pub(crate) fn gemm_tn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize, acc: bool) {
    let at = transpose(a, k, m);
    gemm(&at, b, c, m, k, n, acc);
}

/// `c[m,n] (+)= a[m,k] * b[n,k]^T`.
pub(crate) fn gemm_nt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize, acc: bool) {
    if n < NARROW && k >= n {
        if !acc {
            c.fill(0.0);
        }
        gemm_dot(a, b, c, m, k, n);
        return;
    }
    let bt = transpose(b, n, k);
    gemm(a, &bt, c, m, k, n, acc);
}

/// Transpose of a row-major `[rows, cols]` matrix.
pub(crate) fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    debug_assert_eq!(x.len(), rows * cols);
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}
