//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use piip::numerics::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

pub fn constant(t: Tensor<f64>) -> Var<f64> {
    Var::constant(t)
}

pub fn resize_ref(img: &[f64], h: usize, w: usize, oh: usize, ow: usize, oy: usize, ox: usize) -> f64 {
    let src = |o: usize, inn: usize, out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * inn as f64 / out as f64 - 0.5).max(0.0);
        let i0 = s.floor() as usize;
        let i0 = i0.min(inn - 1);
        let i1 = (i0 + 1).min(inn - 1);
        (i0, i1, s - i0 as f64)
    };
    let (y0, y1, fy) = src(oy, h, oh);
    let (x0, x1, fx) = src(ox, w, ow);
    let v = |y: usize, x: usize| img[y * w + x];
    (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1))
}

/// Bilinear sample of `v[C,H,W]` at normalized `(px, py)`, border-clamped.
pub fn sample_ref(v: &Tensor<f64>, px: f64, py: f64) -> Vec<f64> {
    let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
    let coord = |p: f64, n: usize| (p * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let (x, y) = (coord(px, w), coord(py, h));
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    (0..c)
        .map(|ch| {
            let at = |yy: usize, xx: usize| v.data()[(ch * h + yy) * w + xx];
            (1.0 - fx) * (1.0 - fy) * at(y0, x0)
                + fx * (1.0 - fy) * at(y0, x1)
                + (1.0 - fx) * fy * at(y1, x0)
                + fx * fy * at(y1, x1)
        })
        .collect()
}

/// Row-major `[m,k] × [k,n]`.
pub fn matmul_ref(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    c
}

/// `x W + b` row by row.
pub fn linear_ref(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut y = matmul_ref(x, w.data(), x.len() / k, k, n);
    for (i, v) in y.iter_mut().enumerate() {
        *v += b.data()[i % n];
    }
    y
}

/// LayerNorm of every `d`-wide row.
pub fn layer_norm_ref(x: &[f64], d: usize, gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|r| {
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            r.iter()
                .enumerate()
                .map(move |(i, v)| (v - mean) * inv * gain[i] + bias[i])
                .collect::<Vec<_>>()
        })
        .collect()
}

/// GroupNorm of `x[C, S]` with `groups` groups.
pub fn group_norm_ref(x: &[f64], c: usize, groups: usize, gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let s = x.len() / c;
    let per = c / groups;
    let mut out = vec![0.0; x.len()];
    for g in 0..groups {
        let seg = &x[g * per * s..(g + 1) * per * s];
        let n = seg.len() as f64;
        let mean = seg.iter().sum::<f64>() / n;
        let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for ch in g * per..(g + 1) * per {
            for i in 0..s {
                out[ch * s + i] = (x[ch * s + i] - mean) * inv * gain[ch] + bias[ch];
            }
        }
    }
    out
}

/// 3×3 stride-1 zero-padded convolution by direct summation.
/// `w` is `[C_out, C_in, 3, 3]` flattened.
pub fn conv3x3_ref(x: &[f64], c_in: usize, h: usize, wd: usize, w: &[f64], b: &[f64], c_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; c_out * h * wd];
    for co in 0..c_out {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = b[co];
                for ci in 0..c_in {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            let sx = xx as isize + kx as isize - 1;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                continue;
                            }
                            acc += w[((co * c_in + ci) * 3 + ky) * 3 + kx]
                                * x[(ci * h + sy as usize) * wd + sx as usize];
                        }
                    }
                }
                out[co * h * wd + y * wd + xx] = acc;
            }
        }
    }
    out
}

pub fn gelu_ref(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn softmax_ref(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let scale = 1f64.max(x.abs()).max(y.abs());
        assert!((x - y).abs() <= tol * scale, "{what}[{i}]: {x} vs {y}");
    }
}
