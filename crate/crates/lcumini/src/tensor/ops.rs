//! Differentiable operations over [`Tensor`].
//!
//! Each op computes its forward value eagerly and registers a backward
//! closure mapping the output gradient to per-parent gradients. Backward
//! closures may skip slots for parents that do not require grad.

use super::kernels;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

fn same_shape_err<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<T: Scalar> Tensor<T> {
    /// Elementwise `self + other`; shapes must match exactly.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != other.shape() {
            return Err(same_shape_err("add", self, other));
        }
        let data = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect()
        };
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, slots| {
                slots[0] = Some(g.to_vec());
                slots[1] = Some(g.to_vec());
            }),
        ))
    }

    /// Elementwise `self - other`; shapes must match exactly.
    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != other.shape() {
            return Err(same_shape_err("sub", self, other));
        }
        let data = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect()
        };
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, slots| {
                slots[0] = Some(g.to_vec());
                slots[1] = Some(g.iter().map(|&v| -v).collect());
            }),
        ))
    }

    /// Elementwise `self * other`; shapes must match exactly.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != other.shape() {
            return Err(same_shape_err("mul", self, other));
        }
        let data = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect()
        };
        let lhs = self.clone();
        let rhs = other.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, slots| {
                if lhs.requires_grad() {
                    let b = rhs.data();
                    slots[0] = Some(g.iter().zip(b.iter()).map(|(&gv, &bv)| gv * bv).collect());
                }
                if rhs.requires_grad() {
                    let a = lhs.data();
                    slots[1] = Some(g.iter().zip(a.iter()).map(|(&gv, &av)| gv * av).collect());
                }
            }),
        ))
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, slots| {
                slots[0] = Some(g.iter().map(|&v| v * c).collect());
            }),
        )
    }

    /// `[n, d] + [d]` row-broadcast bias.
    pub fn add_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape().len() != 2 || bias.shape().len() != 1 || self.shape()[1] != bias.shape()[0]
        {
            return Err(same_shape_err("add_bias", self, bias));
        }
        let (n, d) = (self.shape()[0], self.shape()[1]);
        let data = {
            let a = self.data();
            let b = bias.data();
            let mut out = Vec::with_capacity(n * d);
            for row in a.chunks_exact(d) {
                out.extend(row.iter().zip(b.iter()).map(|(&x, &y)| x + y));
            }
            out
        };
        Ok(Tensor::from_op(
            vec![n, d],
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, slots| {
                slots[0] = Some(g.to_vec());
                let mut gb = vec![T::zero(); d];
                for row in g.chunks_exact(d) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                slots[1] = Some(gb);
            }),
        ))
    }

    /// `[n, d] * [d]` row-broadcast elementwise product.
    pub fn mul_row(&self, row: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape().len() != 2 || row.shape().len() != 1 || self.shape()[1] != row.shape()[0] {
            return Err(same_shape_err("mul_row", self, row));
        }
        let (n, d) = (self.shape()[0], self.shape()[1]);
        let data = {
            let a = self.data();
            let r = row.data();
            let mut out = Vec::with_capacity(n * d);
            for chunk in a.chunks_exact(d) {
                out.extend(chunk.iter().zip(r.iter()).map(|(&x, &y)| x * y));
            }
            out
        };
        let lhs = self.clone();
        let rhs = row.clone();
        Ok(Tensor::from_op(
            vec![n, d],
            data,
            vec![self.clone(), row.clone()],
            Box::new(move |g, slots| {
                if lhs.requires_grad() {
                    let r = rhs.data();
                    let mut gx = Vec::with_capacity(n * d);
                    for chunk in g.chunks_exact(d) {
                        gx.extend(chunk.iter().zip(r.iter()).map(|(&gv, &rv)| gv * rv));
                    }
                    slots[0] = Some(gx);
                }
                if rhs.requires_grad() {
                    let a = lhs.data();
                    let mut gr = vec![T::zero(); d];
                    for (gchunk, achunk) in g.chunks_exact(d).zip(a.chunks_exact(d)) {
                        for ((acc, &gv), &av) in gr.iter_mut().zip(gchunk).zip(achunk) {
                            *acc += gv * av;
                        }
                    }
                    slots[1] = Some(gr);
                }
            }),
        ))
    }

    /// Matrix product `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape().len() != 2 || other.shape().len() != 2 || self.shape()[1] != other.shape()[0]
        {
            return Err(same_shape_err("matmul", self, other));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = other.shape()[1];
        let data = kernels::mm_nn(&self.data(), &other.data(), m, k, n);
        let lhs = self.clone();
        let rhs = other.clone();
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, slots| {
                if lhs.requires_grad() {
                    // dA = G * B^T
                    slots[0] = Some(kernels::mm_nt(g, &rhs.data(), m, n, k));
                }
                if rhs.requires_grad() {
                    // dB[k,n] = A[m,k]^T * G[m,n]; shared extent is m
                    slots[1] = Some(kernels::mm_tn(&lhs.data(), g, k, m, n));
                }
            }),
        ))
    }

    /// `[m, n] -> [n, m]`.
    pub fn transpose2d(&self) -> Result<Tensor<T>> {
        if self.shape().len() != 2 {
            return Err(Error::Contract(format!(
                "transpose2d requires a 2-d tensor, got {:?}",
                self.shape()
            )));
        }
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let a = self.data();
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = a[i * n + j];
            }
        }
        drop(a);
        Ok(Tensor::from_op(
            vec![n, m],
            data,
            vec![self.clone()],
            Box::new(move |g, slots| {
                let mut gx = vec![T::zero(); m * n];
                for j in 0..n {
                    for i in 0..m {
                        gx[i * n + j] = g[j * m + i];
                    }
                }
                slots[0] = Some(gx);
            }),
        ))
    }

    /// Same data, new shape; element count must be preserved.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Contract(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(move |g, slots| {
                slots[0] = Some(g.to_vec());
            }),
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.shape().len() {
            return Err(Error::Contract(format!(
                "slice axis {} out of range for shape {:?}",
                axis,
                self.shape()
            )));
        }
        let axis_len = self.shape()[axis];
        if len == 0 || start + len > axis_len {
            return Err(Error::Contract(format!(
                "slice [{start}, {start}+{len}) out of range for axis {axis} of shape {:?}",
                self.shape()
            )));
        }
        let in_shape = self.shape().to_vec();
        let mut out_shape = in_shape.clone();
        out_shape[axis] = len;
        let data = kernels::slice_axis(&self.data(), &in_shape, axis, start, len);
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g, slots| {
                let numel: usize = in_shape.iter().product();
                let mut gx = vec![T::zero(); numel];
                kernels::scatter_axis_add(&mut gx, &in_shape, axis, start, len, g);
                slots[0] = Some(gx);
            }),
        ))
    }

    /// Concatenate tensors along `axis`; all other extents must match.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        if axis >= first.shape().len() {
            return Err(Error::Contract(format!(
                "concat axis {} out of range for shape {:?}",
                axis,
                first.shape()
            )));
        }
        let mut axis_total = 0;
        for p in parts {
            if p.shape().len() != first.shape().len()
                || p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(same_shape_err("concat", first, p));
            }
            axis_total += p.shape()[axis];
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = axis_total;

        let (outer, _, inner) = kernels::axis_extents(&out_shape, axis);
        let numel: usize = out_shape.iter().product();
        let mut data = vec![T::zero(); numel];
        let mut offset = 0;
        for p in parts {
            let plen = p.shape()[axis];
            let pdata = p.data();
            for o in 0..outer {
                let src = &pdata[o * plen * inner..(o + 1) * plen * inner];
                let dst_start = (o * axis_total + offset) * inner;
                data[dst_start..dst_start + plen * inner].copy_from_slice(src);
            }
            offset += plen;
        }

        let part_lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Ok(Tensor::from_op(
            out_shape,
            data,
            parts.to_vec(),
            Box::new(move |g, slots| {
                let mut offset = 0;
                for (i, &plen) in part_lens.iter().enumerate() {
                    let mut gp = vec![T::zero(); outer * plen * inner];
                    for o in 0..outer {
                        let src_start = (o * axis_total + offset) * inner;
                        gp[o * plen * inner..(o + 1) * plen * inner]
                            .copy_from_slice(&g[src_start..src_start + plen * inner]);
                    }
                    slots[i] = Some(gp);
                    offset += plen;
                }
            }),
        ))
    }

    /// Sum of all elements, as a scalar (shape `[]`).
    pub fn sum_all(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum();
        let numel = self.numel();
        Tensor::from_op(
            Vec::new(),
            vec![s],
            vec![self.clone()],
            Box::new(move |g, slots| {
                slots[0] = Some(vec![g[0]; numel]);
            }),
        )
    }

    /// Mean of all elements, as a scalar (shape `[]`).
    pub fn mean_all(&self) -> Tensor<T> {
        let numel = self.numel();
        let inv = T::one() / T::from_f64(numel as f64);
        let s: T = self.data().iter().copied().sum();
        Tensor::from_op(
            Vec::new(),
            vec![s * inv],
            vec![self.clone()],
            Box::new(move |g, slots| {
                slots[0] = Some(vec![g[0] * inv; numel]);
            }),
        )
    }

    /// Layer normalization over the last axis (no affine part; scale and
    /// shift are separate `mul_row`/`add_bias` ops at the call site).
    pub fn layer_norm(&self, eps: f64) -> Result<Tensor<T>> {
        let ndim = self.shape().len();
        if ndim == 0 {
            return Err(Error::Contract("layer_norm on a scalar".into()));
        }
        let d = self.shape()[ndim - 1];
        let rows = self.numel() / d;
        let epst = T::from_f64(eps);
        let invd = T::one() / T::from_f64(d as f64);

        let x = self.data();
        let mut y = vec![T::zero(); rows * d];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let mean = xr.iter().copied().sum::<T>() * invd;
            let var = xr
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                * invd;
            let istd = T::one() / (var + epst).sqrt();
            inv_std[r] = istd;
            for (o, &v) in y[r * d..(r + 1) * d].iter_mut().zip(xr) {
                *o = (v - mean) * istd;
            }
        }
        drop(x);

        let y_saved = y.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            Box::new(move |g, slots| {
                // dx = inv_std * (g - mean(g) - y * mean(g * y)) per row
                let mut gx = vec![T::zero(); rows * d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let yr = &y_saved[r * d..(r + 1) * d];
                    let mean_g = gr.iter().copied().sum::<T>() * invd;
                    let mean_gy = gr
                        .iter()
                        .zip(yr)
                        .map(|(&gv, &yv)| gv * yv)
                        .sum::<T>()
                        * invd;
                    for ((o, &gv), &yv) in gx[r * d..(r + 1) * d].iter_mut().zip(gr).zip(yr) {
                        *o = inv_std[r] * (gv - mean_g - yv * mean_gy);
                    }
                }
                slots[0] = Some(gx);
            }),
        ))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&self) -> Tensor<T> {
        let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
        let a = T::from_f64(0.044715);
        let half = T::from_f64(0.5);
        let data = self
            .data()
            .iter()
            .map(|&x| {
                let u = c * (x + a * x * x * x);
                half * x * (T::one() + u.tanh())
            })
            .collect();
        let parent = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, slots| {
                let x = parent.data();
                let three = T::from_f64(3.0);
                let gx = g
                    .iter()
                    .zip(x.iter())
                    .map(|(&gv, &xv)| {
                        let u = c * (xv + a * xv * xv * xv);
                        let t = u.tanh();
                        let du = c * (T::one() + three * a * xv * xv);
                        let dy = half * (T::one() + t) + half * xv * (T::one() - t * t) * du;
                        gv * dy
                    })
                    .collect();
                slots[0] = Some(gx);
            }),
        )
    }

    /// Softmax along `axis`, numerically stabilized by max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.shape().len() {
            return Err(Error::Contract(format!(
                "softmax axis {} out of range for shape {:?}",
                axis,
                self.shape()
            )));
        }
        let shape = self.shape().to_vec();
        let (outer, axis_len, inner) = kernels::axis_extents(&shape, axis);
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * axis_len + k) * inner + i;
                let mut mx = x[idx(0)];
                for k in 1..axis_len {
                    if x[idx(k)] > mx {
                        mx = x[idx(k)];
                    }
                }
                let mut denom = T::zero();
                for k in 0..axis_len {
                    let e = (x[idx(k)] - mx).exp();
                    y[idx(k)] = e;
                    denom += e;
                }
                for k in 0..axis_len {
                    y[idx(k)] = y[idx(k)] / denom;
                }
            }
        }
        drop(x);

        let y_saved = y.clone();
        Ok(Tensor::from_op(
            shape,
            y,
            vec![self.clone()],
            Box::new(move |g, slots| {
                // dx = y * (g - sum(g * y)) per lane
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * axis_len + k) * inner + i;
                        let mut dot = T::zero();
                        for k in 0..axis_len {
                            dot += g[idx(k)] * y_saved[idx(k)];
                        }
                        for k in 0..axis_len {
                            gx[idx(k)] = y_saved[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                slots[0] = Some(gx);
            }),
        ))
    }

    /// Row gather from an embedding table `[vocab, d]` -> `[ids.len(), d]`.
    /// Backward scatter-adds into the table gradient.
    pub fn embed_rows(&self, ids: &[usize]) -> Result<Tensor<T>> {
        if self.shape().len() != 2 {
            return Err(Error::Contract(format!(
                "embed_rows requires a 2-d table, got {:?}",
                self.shape()
            )));
        }
        let (vocab, d) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Contract(format!(
                "embedding id {bad} out of range for table with {vocab} rows"
            )));
        }
        let table = self.data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&table[i * d..(i + 1) * d]);
        }
        drop(table);

        let ids = ids.to_vec();
        let n = ids.len();
        Ok(Tensor::from_op(
            vec![n, d],
            data,
            vec![self.clone()],
            Box::new(move |g, slots| {
                let mut gt = vec![T::zero(); vocab * d];
                for (row, &i) in ids.iter().enumerate() {
                    let src = &g[row * d..(row + 1) * d];
                    for (acc, &v) in gt[i * d..(i + 1) * d].iter_mut().zip(src) {
                        *acc += v;
                    }
                }
                slots[0] = Some(gt);
            }),
        ))
    }
}
