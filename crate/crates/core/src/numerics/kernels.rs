//! Raw dense kernels on row-major slices. Shapes are the caller's problem.

use rayon::prelude::*;

use super::real::Real;

/// Below this many MACs a kernel stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul_nn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    let row = |(i, c_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    let row = |(i, c_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *cv = dot(a_row, b_row);
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

/// `c[m×n] = a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    let row = |(i, c_row): (usize, &mut [T])| {
        for p in 0..k {
            let av = a[p * m + i];
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // Four independent accumulators so the loop vectorizes.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] = acc[l] + a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s = s + a[i] * b[i];
    }
    s
}

pub fn transpose<T: Real>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut t = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// One axis of a bilinear resize: for every output index the two source
/// indices and their weights (align-corners=false, source clamped at 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap<T> {
    pub i0: usize,
    pub i1: usize,
    pub w0: T,
    pub w1: T,
}

pub fn resize_taps<T: Real>(in_len: usize, out_len: usize) -> Vec<Tap<T>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = if i0 + 1 < in_len { i0 + 1 } else { i0 };
            let lambda = src - i0 as f64;
            Tap {
                i0,
                i1,
                w0: T::lit(1.0 - lambda),
                w1: T::lit(lambda),
            }
        })
        .collect()
}

/// Continuous pixel coordinate for a normalized sampling coordinate, clamped
/// to the border. Returns the clamped coordinate and whether it was inside
/// (only then does the coordinate carry a derivative).
#[inline]
pub fn sample_coord<T: Real>(norm: T, size: usize) -> (T, bool) {
    let pix = norm * T::lit(size as f64) - T::lit(0.5);
    let hi = T::lit((size - 1) as f64);
    // Coordinates within a few ulps of a pixel center snap onto it, so that
    // sampling at (i + 0.5) / size reproduces the stored value exactly.
    let r = pix.round();
    let pix = if (pix - r).abs() <= T::epsilon() * T::lit(4.0) * r.abs().max(T::one()) {
        r
    } else {
        pix
    };
    if pix < T::zero() {
        (T::zero(), false)
    } else if pix > hi {
        (hi, false)
    } else {
        (pix, true)
    }
}

/// Neighbor indices and fraction for a clamped pixel coordinate.
#[inline]
pub fn split_coord<T: Real>(c: T, size: usize) -> (usize, usize, T) {
    let i0 = (c.floor().to_usize().unwrap_or(0)).min(size - 1);
    let i1 = (i0 + 1).min(size - 1);
    (i0, i1, c - T::lit(i0 as f64))
}
