//! Differentiable primitives.
//!
//! Every op validates shapes, computes its output, records MACs for the
//! matmul-like kernels (see [`counter`](super::counter)), and registers a
//! vector-Jacobian product on the tape.

use std::sync::Arc;

use super::counter;
use super::kernels::{self, Tap};
use super::real::Real;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{bail, Result};

fn t<T: Real>(shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
    Tensor::from_parts(shape, data)
}

fn same_shape<T: Real>(op: &str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        bail!(
            Dimension,
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
    }
    Ok(())
}

fn last_dim<T: Real>(op: &str, x: &Var<T>) -> Result<usize> {
    match x.shape().last() {
        Some(&d) if d > 0 => Ok(d),
        _ => bail!(Dimension, "{op}: empty last dimension in {:?}", x.shape()),
    }
}

fn rank<T: Real>(op: &str, x: &Var<T>, r: usize) -> Result<()> {
    if x.shape().len() != r {
        bail!(
            Dimension,
            "{op}: expected rank {r}, got shape {:?}",
            x.shape()
        );
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var::constant(value)
    }

    /// Matrix product. `a` may carry leading batch dimensions, which are
    /// flattened into rows; `b` is a plain matrix.
    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() < 2 || bsh.len() != 2 || ash[ash.len() - 1] != bsh[0] {
            bail!(Dimension, "matmul: cannot multiply {:?} by {:?}", ash, bsh);
        }
        let k = bsh[0];
        let n = bsh[1];
        let m = a.value().len() / k;
        counter::record((m * k * n) as u64);
        let out = kernels::matmul_nn(a.value().data(), b.value().data(), m, k, n);
        let mut shape = ash.to_vec();
        *shape.last_mut().unwrap() = n;
        let (av, bv) = (a.shared().clone(), b.shared().clone());
        let (a_shape, b_shape) = (ash.to_vec(), bsh.to_vec());
        Ok(self.push(t(shape, out), &[a, b], move |g, need| {
            let da = need[0].then(|| {
                t(
                    a_shape.clone(),
                    kernels::matmul_nt(g.data(), bv.data(), m, n, k),
                )
            });
            let db = need[1].then(|| {
                t(
                    b_shape.clone(),
                    kernels::matmul_tn(av.data(), g.data(), m, k, n),
                )
            });
            vec![da, db]
        }))
    }

    /// Batched product `[B,m,k] × [B,k,n] → [B,m,n]`.
    pub fn bmm(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[1] {
            bail!(Dimension, "bmm: cannot multiply {:?} by {:?}", ash, bsh);
        }
        let (nb, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
        counter::record((nb * m * k * n) as u64);
        let mut out = Vec::with_capacity(nb * m * n);
        for i in 0..nb {
            out.extend(kernels::matmul_nn(
                &a.value().data()[i * m * k..(i + 1) * m * k],
                &b.value().data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let (av, bv) = (a.shared().clone(), b.shared().clone());
        Ok(self.push(t(vec![nb, m, n], out), &[a, b], move |g, need| {
            let mut da = need[0].then(|| Vec::with_capacity(nb * m * k));
            let mut db = need[1].then(|| Vec::with_capacity(nb * k * n));
            for i in 0..nb {
                let gi = &g.data()[i * m * n..(i + 1) * m * n];
                if let Some(da) = da.as_mut() {
                    da.extend(kernels::matmul_nt(
                        gi,
                        &bv.data()[i * k * n..(i + 1) * k * n],
                        m,
                        n,
                        k,
                    ));
                }
                if let Some(db) = db.as_mut() {
                    db.extend(kernels::matmul_tn(
                        &av.data()[i * m * k..(i + 1) * m * k],
                        gi,
                        m,
                        k,
                        n,
                    ));
                }
            }
            vec![
                da.map(|d| t(vec![nb, m, k], d)),
                db.map(|d| t(vec![nb, k, n], d)),
            ]
        }))
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("add", a, b)?;
        let out: Vec<T> = a
            .value()
            .data()
            .iter()
            .zip(b.value().data())
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(t(a.shape().to_vec(), out), &[a, b], |g, need| {
            vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())]
        }))
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("sub", a, b)?;
        let out: Vec<T> = a
            .value()
            .data()
            .iter()
            .zip(b.value().data())
            .map(|(&x, &y)| x - y)
            .collect();
        Ok(self.push(t(a.shape().to_vec(), out), &[a, b], |g, need| {
            vec![
                need[0].then(|| g.clone()),
                need[1].then(|| g.map(|v| -v)),
            ]
        }))
    }

    /// Element-wise product of equally shaped tensors.
    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("mul", a, b)?;
        let out: Vec<T> = a
            .value()
            .data()
            .iter()
            .zip(b.value().data())
            .map(|(&x, &y)| x * y)
            .collect();
        let (av, bv) = (a.shared().clone(), b.shared().clone());
        Ok(self.push(t(a.shape().to_vec(), out), &[a, b], move |g, need| {
            let mk = |other: &Tensor<T>| {
                let d = g
                    .data()
                    .iter()
                    .zip(other.data())
                    .map(|(&x, &y)| x * y)
                    .collect();
                t(g.shape().to_vec(), d)
            };
            vec![need[0].then(|| mk(&bv)), need[1].then(|| mk(&av))]
        }))
    }

    /// `x[..., D] + bias[D]`, broadcast over rows.
    pub fn add_row(&self, x: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
        let d = last_dim("add_row", x)?;
        if bias.value().len() != d {
            bail!(
                Dimension,
                "add_row: bias {:?} does not match {:?}",
                bias.shape(),
                x.shape()
            );
        }
        let b = bias.value().data();
        let out: Vec<T> = x
            .value()
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        let bias_shape = bias.shape().to_vec();
        Ok(self.push(t(x.shape().to_vec(), out), &[x, bias], move |g, need| {
            let db = need[1].then(|| {
                let mut acc = vec![T::zero(); d];
                for row in g.data().chunks(d) {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a = *a + v;
                    }
                }
                t(bias_shape.clone(), acc)
            });
            vec![need[0].then(|| g.clone()), db]
        }))
    }

    /// `x[m, n] + bias[m]`, broadcast over columns.
    pub fn add_col(&self, x: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
        rank("add_col", x, 2)?;
        let (m, n) = (x.shape()[0], x.shape()[1]);
        if bias.value().len() != m {
            bail!(
                Dimension,
                "add_col: bias {:?} does not match {:?}",
                bias.shape(),
                x.shape()
            );
        }
        let b = bias.value().data();
        let out: Vec<T> = x
            .value()
            .data()
            .chunks(n)
            .zip(b)
            .flat_map(|(row, &c)| row.iter().map(move |&v| v + c))
            .collect();
        let bias_shape = bias.shape().to_vec();
        Ok(self.push(t(vec![m, n], out), &[x, bias], move |g, need| {
            let db = need[1].then(|| {
                let acc = g.data().chunks(n).map(|row| row.iter().copied().sum()).collect();
                t(bias_shape.clone(), acc)
            });
            vec![need[0].then(|| g.clone()), db]
        }))
    }

    /// `x[..., D] ⊙ gain`, where `gain` has `D` entries or a single entry.
    pub fn mul_row(&self, x: &Var<T>, gain: &Var<T>) -> Result<Var<T>> {
        let d = last_dim("mul_row", x)?;
        let gl = gain.value().len();
        if gl != d && gl != 1 {
            bail!(
                Dimension,
                "mul_row: gain {:?} does not match {:?}",
                gain.shape(),
                x.shape()
            );
        }
        let gv = gain.value().data();
        let out: Vec<T> = x
            .value()
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gv[if gl == 1 { 0 } else { i % d }])
            .collect();
        let (xv, gainv) = (x.shared().clone(), gain.shared().clone());
        let gain_shape = gain.shape().to_vec();
        Ok(self.push(t(x.shape().to_vec(), out), &[x, gain], move |g, need| {
            let gd = gainv.data();
            let dx = need[0].then(|| {
                let d2 = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v * gd[if gl == 1 { 0 } else { i % d }])
                    .collect();
                t(g.shape().to_vec(), d2)
            });
            let dg = need[1].then(|| {
                let mut acc = vec![T::zero(); gl];
                for (i, (&gv, &xv)) in g.data().iter().zip(xv.data()).enumerate() {
                    let j = if gl == 1 { 0 } else { i % d };
                    acc[j] = acc[j] + gv * xv;
                }
                t(gain_shape.clone(), acc)
            });
            vec![dx, dg]
        }))
    }

    pub fn mul_const(&self, x: &Var<T>, c: T) -> Var<T> {
        let out = x.value().map(|v| v * c);
        self.push(out, &[x], move |g, _| vec![Some(g.map(|v| v * c))])
    }

    /// LayerNorm over the last dimension.
    pub fn layer_norm(&self, x: &Var<T>, gain: &Var<T>, bias: &Var<T>, eps: f64) -> Result<Var<T>> {
        let d = last_dim("layer_norm", x)?;
        let rows = x.value().len() / d;
        self.norm(x, gain, bias, rows, d, d, 1, eps)
    }

    /// GroupNorm on `x[B, C, S]`: statistics per (batch, group) over the
    /// group's `C / groups` channels and all `S` positions, then a per-channel
    /// affine transform.
    pub fn group_norm(
        &self,
        x: &Var<T>,
        groups: usize,
        gain: &Var<T>,
        bias: &Var<T>,
        eps: f64,
    ) -> Result<Var<T>> {
        rank("group_norm", x, 3)?;
        let (b, c, s) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if groups == 0 || c % groups != 0 {
            bail!(Dimension, "group_norm: {groups} groups do not divide {c} channels");
        }
        self.norm(x, gain, bias, b * groups, c / groups * s, c, s, eps)
    }

    /// Shared LayerNorm/GroupNorm kernel. The data is viewed as `groups`
    /// contiguous runs of `len` values, each normalized on its own; the affine
    /// parameters are indexed by channel, a channel spanning `spatial`
    /// consecutive values.
    #[allow(clippy::too_many_arguments)]
    fn norm(
        &self,
        x: &Var<T>,
        gain: &Var<T>,
        bias: &Var<T>,
        groups: usize,
        len: usize,
        channels: usize,
        spatial: usize,
        eps: f64,
    ) -> Result<Var<T>> {
        if gain.value().len() != channels || bias.value().len() != channels {
            bail!(
                Dimension,
                "norm: gain {:?} / bias {:?} do not match {channels} channels",
                gain.shape(),
                bias.shape()
            );
        }
        let eps_t = T::lit(eps);
        let n_t = T::lit(len as f64);
        let xd = x.value().data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); groups];
        for gidx in 0..groups {
            let seg = &xd[gidx * len..(gidx + 1) * len];
            let mean = seg.iter().copied().sum::<T>() / n_t;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n_t;
            let inv = T::one() / (var + eps_t).sqrt();
            inv_std[gidx] = inv;
            for (o, &v) in xhat[gidx * len..(gidx + 1) * len].iter_mut().zip(seg) {
                *o = (v - mean) * inv;
            }
        }
        let channel_of = move |i: usize| (i / spatial) % channels;
        let gd = gain.value().data();
        let bd = bias.value().data();
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * gd[channel_of(i)] + bd[channel_of(i)])
            .collect();
        let gainv = gain.shared().clone();
        let xhat = Arc::new(xhat);
        let (gshape, bshape) = (gain.shape().to_vec(), bias.shape().to_vec());
        Ok(self.push(
            t(x.shape().to_vec(), out),
            &[x, gain, bias],
            move |g, need| {
                let gd = g.data();
                let gain = gainv.data();
                let dx = need[0].then(|| {
                    let mut dx = vec![T::zero(); gd.len()];
                    for (gidx, &istd) in inv_std.iter().enumerate() {
                        let r = gidx * len..(gidx + 1) * len;
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for i in r.clone() {
                            let dh = gd[i] * gain[channel_of(i)];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * xhat[i];
                        }
                        mean_dh = mean_dh / n_t;
                        mean_dh_h = mean_dh_h / n_t;
                        for i in r {
                            let dh = gd[i] * gain[channel_of(i)];
                            dx[i] = istd * (dh - mean_dh - xhat[i] * mean_dh_h);
                        }
                    }
                    t(g.shape().to_vec(), dx)
                });
                let dgain = need[1].then(|| {
                    let mut acc = vec![T::zero(); channels];
                    for (i, (&gv, &h)) in gd.iter().zip(xhat.iter()).enumerate() {
                        acc[channel_of(i)] = acc[channel_of(i)] + gv * h;
                    }
                    t(gshape.clone(), acc)
                });
                let dbias = need[2].then(|| {
                    let mut acc = vec![T::zero(); channels];
                    for (i, &gv) in gd.iter().enumerate() {
                        acc[channel_of(i)] = acc[channel_of(i)] + gv;
                    }
                    t(bshape.clone(), acc)
                });
                vec![dx, dgain, dbias]
            },
        ))
    }

    /// Softmax over the last dimension, max-shifted for stability.
    pub fn softmax(&self, x: &Var<T>) -> Result<Var<T>> {
        let k = last_dim("softmax", x)?;
        let mut out = x.value().data().to_vec();
        for row in out.chunks_mut(k) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let y = Arc::new(out.clone());
        Ok(self.push(t(x.shape().to_vec(), out), &[x], move |g, _| {
            let mut dx = vec![T::zero(); g.len()];
            for ((dxr, gr), yr) in dx.chunks_mut(k).zip(g.data().chunks(k)).zip(y.chunks(k)) {
                let dot = kernels::dot(gr, yr);
                for ((o, &gv), &yv) in dxr.iter_mut().zip(gr).zip(yr) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(t(g.shape().to_vec(), dx))]
        }))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self, x: &Var<T>) -> Var<T> {
        let out = x.value().map(gelu_scalar);
        let xv = x.shared().clone();
        self.push(out, &[x], move |g, _| {
            let d = g
                .data()
                .iter()
                .zip(xv.data())
                .map(|(&gv, &xv)| gv * gelu_grad(xv))
                .collect();
            vec![Some(t(g.shape().to_vec(), d))]
        })
    }

    pub fn reshape(&self, x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let value = x.value().clone().reshape(shape.to_vec())?;
        let orig = x.shape().to_vec();
        Ok(self.push(value, &[x], move |g, _| {
            vec![Some(t(orig.clone(), g.data().to_vec()))]
        }))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose_last2(&self, x: &Var<T>) -> Result<Var<T>> {
        let sh = x.shape();
        let (nb, m, n) = match sh.len() {
            2 => (1, sh[0], sh[1]),
            3 => (sh[0], sh[1], sh[2]),
            _ => bail!(Dimension, "transpose_last2: unsupported shape {:?}", sh),
        };
        let tr = move |d: &[T], m: usize, n: usize| -> Vec<T> {
            let mut out = Vec::with_capacity(d.len());
            for b in 0..nb {
                out.extend(kernels::transpose(&d[b * m * n..(b + 1) * m * n], m, n));
            }
            out
        };
        let mut shape = sh.to_vec();
        let r = shape.len();
        shape.swap(r - 1, r - 2);
        let out = tr(x.value().data(), m, n);
        let orig = sh.to_vec();
        Ok(self.push(t(shape, out), &[x], move |g, _| {
            vec![Some(t(orig.clone(), tr(g.data(), n, m)))]
        }))
    }

    /// `[a, b, c] → [b, a, c]`.
    pub fn swap01(&self, x: &Var<T>) -> Result<Var<T>> {
        rank("swap01", x, 3)?;
        let (a, b, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let perm = move |d: &[T], a: usize, b: usize| -> Vec<T> {
            let mut out = vec![T::zero(); d.len()];
            for i in 0..a {
                for j in 0..b {
                    out[(j * a + i) * c..(j * a + i + 1) * c]
                        .copy_from_slice(&d[(i * b + j) * c..(i * b + j + 1) * c]);
                }
            }
            out
        };
        let out = perm(x.value().data(), a, b);
        Ok(self.push(t(vec![b, a, c], out), &[x], move |g, _| {
            vec![Some(t(vec![a, b, c], perm(g.data(), b, a)))]
        }))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&self, x: &Var<T>, start: usize, end: usize) -> Result<Var<T>> {
        rank("slice_cols", x, 2)?;
        let (m, n) = (x.shape()[0], x.shape()[1]);
        if start >= end || end > n {
            bail!(Dimension, "slice_cols: bad range {start}..{end} of {n} columns");
        }
        let w = end - start;
        let out: Vec<T> = x
            .value()
            .data()
            .chunks(n)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        Ok(self.push(t(vec![m, w], out), &[x], move |g, _| {
            let mut dx = vec![T::zero(); m * n];
            for (dr, gr) in dx.chunks_mut(n).zip(g.data().chunks(w)) {
                dr[start..end].copy_from_slice(gr);
            }
            vec![Some(t(vec![m, n], dx))]
        }))
    }

    pub fn concat_cols(&self, parts: &[&Var<T>]) -> Result<Var<T>> {
        if parts.is_empty() {
            bail!(Dimension, "concat_cols: nothing to concatenate");
        }
        let m = parts[0].shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            rank("concat_cols", p, 2)?;
            if p.shape()[0] != m {
                bail!(Dimension, "concat_cols: row mismatch {:?}", p.shape());
            }
            widths.push(p.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.value().data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(t(vec![m, total], out), parts, move |g, need| {
            let mut offset = 0;
            widths
                .iter()
                .enumerate()
                .map(|(pi, &w)| {
                    let o = offset;
                    offset += w;
                    need[pi].then(|| {
                        let d = g
                            .data()
                            .chunks(total)
                            .flat_map(|row| row[o..o + w].iter().copied())
                            .collect();
                        t(vec![m, w], d)
                    })
                })
                .collect()
        }))
    }

    /// Rows `[start, end)` of a matrix.
    pub fn slice_rows(&self, x: &Var<T>, start: usize, end: usize) -> Result<Var<T>> {
        rank("slice_rows", x, 2)?;
        let (m, n) = (x.shape()[0], x.shape()[1]);
        if start >= end || end > m {
            bail!(Dimension, "slice_rows: bad range {start}..{end} of {m} rows");
        }
        let out = x.value().data()[start * n..end * n].to_vec();
        Ok(self.push(t(vec![end - start, n], out), &[x], move |g, _| {
            let mut dx = vec![T::zero(); m * n];
            dx[start * n..end * n].copy_from_slice(g.data());
            vec![Some(t(vec![m, n], dx))]
        }))
    }

    pub fn concat_rows(&self, parts: &[&Var<T>]) -> Result<Var<T>> {
        if parts.is_empty() {
            bail!(Dimension, "concat_rows: nothing to concatenate");
        }
        let n = parts[0].shape()[1];
        let mut rows = Vec::with_capacity(parts.len());
        let mut out = Vec::new();
        for p in parts {
            rank("concat_rows", p, 2)?;
            if p.shape()[1] != n {
                bail!(Dimension, "concat_rows: column mismatch {:?}", p.shape());
            }
            rows.push(p.shape()[0]);
            out.extend_from_slice(p.value().data());
        }
        let total: usize = rows.iter().sum();
        Ok(self.push(t(vec![total, n], out), parts, move |g, need| {
            let mut offset = 0;
            rows.iter()
                .enumerate()
                .map(|(pi, &r)| {
                    let o = offset;
                    offset += r;
                    need[pi].then(|| t(vec![r, n], g.data()[o * n..(o + r) * n].to_vec()))
                })
                .collect()
        }))
    }

    /// Bilinear resize of `x[C, H, W]` (align-corners=false). Same-size
    /// resizes are a plain copy; otherwise 4 MACs per output element.
    pub fn bilinear_resize(&self, x: &Var<T>, out_h: usize, out_w: usize) -> Result<Var<T>> {
        rank("bilinear_resize", x, 3)?;
        if out_h == 0 || out_w == 0 {
            bail!(Dimension, "bilinear_resize: zero-sized output {out_h}x{out_w}");
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if (h, w) == (out_h, out_w) {
            return Ok(self.push(x.value().clone(), &[x], |g, _| vec![Some(g.clone())]));
        }
        counter::record((4 * c * out_h * out_w) as u64);
        let ty: Arc<Vec<Tap<T>>> = Arc::new(kernels::resize_taps(h, out_h));
        let tx: Arc<Vec<Tap<T>>> = Arc::new(kernels::resize_taps(w, out_w));
        let xd = x.value().data();
        let mut out = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            let plane = &xd[ch * h * w..(ch + 1) * h * w];
            for yt in ty.iter() {
                for xt in tx.iter() {
                    let v = yt.w0 * (xt.w0 * plane[yt.i0 * w + xt.i0] + xt.w1 * plane[yt.i0 * w + xt.i1])
                        + yt.w1
                            * (xt.w0 * plane[yt.i1 * w + xt.i0] + xt.w1 * plane[yt.i1 * w + xt.i1]);
                    out.push(v);
                }
            }
        }
        Ok(self.push(t(vec![c, out_h, out_w], out), &[x], move |g, _| {
            let mut dx = vec![T::zero(); c * h * w];
            let gd = g.data();
            for ch in 0..c {
                let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
                for (oy, yt) in ty.iter().enumerate() {
                    for (ox, xt) in tx.iter().enumerate() {
                        let gv = gd[(ch * out_h + oy) * out_w + ox];
                        plane[yt.i0 * w + xt.i0] = plane[yt.i0 * w + xt.i0] + gv * yt.w0 * xt.w0;
                        plane[yt.i0 * w + xt.i1] = plane[yt.i0 * w + xt.i1] + gv * yt.w0 * xt.w1;
                        plane[yt.i1 * w + xt.i0] = plane[yt.i1 * w + xt.i0] + gv * yt.w1 * xt.w0;
                        plane[yt.i1 * w + xt.i1] = plane[yt.i1 * w + xt.i1] + gv * yt.w1 * xt.w1;
                    }
                }
            }
            vec![Some(t(vec![c, h, w], dx))]
        }))
    }

    /// Samples `value[C, H, W]` at `points[P, 2]` given as normalized `(x, y)`
    /// in `[0, 1]²` (pixel `(i, j)` has its center at `((j+0.5)/W, (i+0.5)/H)`).
    /// Out-of-range points clamp to the border. Output is `[P, C]`; 4 MACs
    /// per point per channel.
    pub fn grid_sample(&self, value: &Var<T>, points: &Var<T>) -> Result<Var<T>> {
        rank("grid_sample", value, 3)?;
        rank("grid_sample", points, 2)?;
        if points.shape()[1] != 2 {
            bail!(Dimension, "grid_sample: points must be [P, 2], got {:?}", points.shape());
        }
        let (c, h, w) = (value.shape()[0], value.shape()[1], value.shape()[2]);
        let np = points.shape()[0];
        counter::record((4 * np * c) as u64);
        let vd = value.value().data();
        let pd = points.value().data();
        let mut out = vec![T::zero(); np * c];
        for p in 0..np {
            let s = Sample::new(pd[2 * p], pd[2 * p + 1], h, w);
            for ch in 0..c {
                out[p * c + ch] = s.eval(&vd[ch * h * w..(ch + 1) * h * w], w);
            }
        }
        let (vv, pv) = (value.shared().clone(), points.shared().clone());
        Ok(self.push(t(vec![np, c], out), &[value, points], move |g, need| {
            let vd = vv.data();
            let pd = pv.data();
            let gd = g.data();
            let mut dv = need[0].then(|| vec![T::zero(); c * h * w]);
            let mut dp = need[1].then(|| vec![T::zero(); np * 2]);
            for p in 0..np {
                let s = Sample::new(pd[2 * p], pd[2 * p + 1], h, w);
                let (mut gx, mut gy) = (T::zero(), T::zero());
                for ch in 0..c {
                    let gv = gd[p * c + ch];
                    if let Some(dv) = dv.as_mut() {
                        s.scatter(&mut dv[ch * h * w..(ch + 1) * h * w], w, gv);
                    }
                    if dp.is_some() {
                        let (sx, sy) = s.slopes(&vd[ch * h * w..(ch + 1) * h * w], w);
                        gx = gx + gv * sx;
                        gy = gy + gv * sy;
                    }
                }
                if let Some(dp) = dp.as_mut() {
                    dp[2 * p] = if s.x_active { gx * T::lit(w as f64) } else { T::zero() };
                    dp[2 * p + 1] = if s.y_active { gy * T::lit(h as f64) } else { T::zero() };
                }
            }
            vec![
                dv.map(|d| t(vec![c, h, w], d)),
                dp.map(|d| t(vec![np, 2], d)),
            ]
        }))
    }

    /// Non-overlapping `p×p` patches of `img[C, H, W]` as rows of
    /// `[(H/p)·(W/p), C·p·p]`, patches in raster order, features ordered
    /// `(channel, dy, dx)`.
    pub fn patchify(&self, img: &Var<T>, p: usize) -> Result<Var<T>> {
        rank("patchify", img, 3)?;
        let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
        if p == 0 || h % p != 0 || w % p != 0 {
            bail!(Dimension, "patchify: {h}x{w} image not divisible by patch {p}");
        }
        let (gh, gw) = (h / p, w / p);
        let feat = c * p * p;
        let index = move |py: usize, px: usize, ch: usize, dy: usize, dx: usize| {
            (ch * h + py * p + dy) * w + px * p + dx
        };
        let d = img.value().data();
        let mut out = Vec::with_capacity(gh * gw * feat);
        for py in 0..gh {
            for px in 0..gw {
                for ch in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            out.push(d[index(py, px, ch, dy, dx)]);
                        }
                    }
                }
            }
        }
        Ok(self.push(t(vec![gh * gw, feat], out), &[img], move |g, _| {
            let mut di = vec![T::zero(); c * h * w];
            let mut k = 0;
            for py in 0..gh {
                for px in 0..gw {
                    for ch in 0..c {
                        for dy in 0..p {
                            for dx in 0..p {
                                di[index(py, px, ch, dy, dx)] = g.data()[k];
                                k += 1;
                            }
                        }
                    }
                }
            }
            vec![Some(t(vec![c, h, w], di))]
        }))
    }

    /// 3×3, stride 1, zero-padding 1 unfold: `x[C, H, W] → [C·9, H·W]`,
    /// row index `c·9 + ky·3 + kx`.
    pub fn im2col3x3(&self, x: &Var<T>) -> Result<Var<T>> {
        rank("im2col3x3", x, 3)?;
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let hw = h * w;
        let src = move |ky: usize, kx: usize, y: usize, xx: usize| -> Option<(usize, usize)> {
            let sy = (y + ky).checked_sub(1)?;
            let sx = (xx + kx).checked_sub(1)?;
            (sy < h && sx < w).then_some((sy, sx))
        };
        let d = x.value().data();
        let mut out = vec![T::zero(); c * 9 * hw];
        for ch in 0..c {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = ch * 9 + ky * 3 + kx;
                    for y in 0..h {
                        for xx in 0..w {
                            if let Some((sy, sx)) = src(ky, kx, y, xx) {
                                out[row * hw + y * w + xx] = d[(ch * h + sy) * w + sx];
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(t(vec![c * 9, hw], out), &[x], move |g, _| {
            let gd = g.data();
            let mut dx = vec![T::zero(); c * hw];
            for ch in 0..c {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let row = ch * 9 + ky * 3 + kx;
                        for y in 0..h {
                            for xx in 0..w {
                                if let Some((sy, sx)) = src(ky, kx, y, xx) {
                                    let i = (ch * h + sy) * w + sx;
                                    dx[i] = dx[i] + gd[row * hw + y * w + xx];
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(t(vec![c, h, w], dx))]
        }))
    }

    pub fn sum(&self, x: &Var<T>) -> Var<T> {
        let s = x.value().sum();
        let shape = x.shape().to_vec();
        self.push(Tensor::scalar(s), &[x], move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.data()[0]))]
        })
    }

    pub fn mean(&self, x: &Var<T>) -> Var<T> {
        let n = T::lit(x.value().len() as f64);
        let s = x.value().sum() / n;
        let shape = x.shape().to_vec();
        self.push(Tensor::scalar(s), &[x], move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.data()[0] / n))]
        })
    }

    /// Mean over the last axis of a matrix: `[m, n] → [m]`.
    pub fn mean_last(&self, x: &Var<T>) -> Result<Var<T>> {
        rank("mean_last", x, 2)?;
        let (m, n) = (x.shape()[0], x.shape()[1]);
        let nt = T::lit(n as f64);
        let out = x
            .value()
            .data()
            .chunks(n)
            .map(|r| r.iter().copied().sum::<T>() / nt)
            .collect();
        Ok(self.push(t(vec![m], out), &[x], move |g, _| {
            let d = g
                .data()
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v / nt, n))
                .collect();
            vec![Some(t(vec![m, n], d))]
        }))
    }

    /// Softmax cross-entropy of a logit vector against a class index.
    pub fn cross_entropy(&self, logits: &Var<T>, label: usize) -> Result<Var<T>> {
        let k = logits.value().len();
        if label >= k {
            bail!(Dimension, "cross_entropy: label {label} out of {k} classes");
        }
        let d = logits.value().data();
        let mx = d.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = d.iter().map(|&v| (v - mx).exp()).sum();
        let lse = mx + z.ln();
        let loss = lse - d[label];
        let probs: Vec<T> = d.iter().map(|&v| (v - lse).exp()).collect();
        let shape = logits.shape().to_vec();
        Ok(self.push(Tensor::scalar(loss), &[logits], move |g, _| {
            let gv = g.data()[0];
            let dl = probs
                .iter()
                .enumerate()
                .map(|(i, &p)| gv * (if i == label { p - T::one() } else { p }))
                .collect();
            vec![Some(t(shape.clone(), dl))]
        }))
    }
}

pub fn gelu_scalar<T: Real>(x: T) -> T {
    T::lit(0.5) * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// One bilinear sampling location on an `h×w` grid.
struct Sample<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: T,
    fy: T,
    x_active: bool,
    y_active: bool,
}

impl<T: Real> Sample<T> {
    fn new(px: T, py: T, h: usize, w: usize) -> Self {
        let (cx, x_active) = kernels::sample_coord(px, w);
        let (cy, y_active) = kernels::sample_coord(py, h);
        let (x0, x1, fx) = kernels::split_coord(cx, w);
        let (y0, y1, fy) = kernels::split_coord(cy, h);
        Self {
            x0,
            x1,
            y0,
            y1,
            fx,
            fy,
            x_active,
            y_active,
        }
    }

    #[inline]
    fn eval(&self, plane: &[T], w: usize) -> T {
        let one = T::one();
        let top = (one - self.fx) * plane[self.y0 * w + self.x0] + self.fx * plane[self.y0 * w + self.x1];
        let bot = (one - self.fx) * plane[self.y1 * w + self.x0] + self.fx * plane[self.y1 * w + self.x1];
        (one - self.fy) * top + self.fy * bot
    }

    #[inline]
    fn scatter(&self, plane: &mut [T], w: usize, g: T) {
        let one = T::one();
        let taps = [
            (self.y0 * w + self.x0, (one - self.fy) * (one - self.fx)),
            (self.y0 * w + self.x1, (one - self.fy) * self.fx),
            (self.y1 * w + self.x0, self.fy * (one - self.fx)),
            (self.y1 * w + self.x1, self.fy * self.fx),
        ];
        for (i, wgt) in taps {
            plane[i] = plane[i] + g * wgt;
        }
    }

    /// Partial derivatives w.r.t. the pixel coordinates.
    #[inline]
    fn slopes(&self, plane: &[T], w: usize) -> (T, T) {
        let one = T::one();
        let v00 = plane[self.y0 * w + self.x0];
        let v01 = plane[self.y0 * w + self.x1];
        let v10 = plane[self.y1 * w + self.x0];
        let v11 = plane[self.y1 * w + self.x1];
        let sx = (one - self.fy) * (v01 - v00) + self.fy * (v11 - v10);
        let sy = (one - self.fx) * (v10 - v00) + self.fx * (v11 - v01);
        (sx, sy)
    }
}
