//! Differentiable operations. Each op validates shapes, computes its result
//! through the kernel drivers, and registers a backward closure when an input
//! is tracked. Backward closures capture raw storage (never tape handles), so
//! dropping an un-backwarded tape frees everything.

use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{NDTensor, Scalar};
use crate::error::{Error, Result};

fn axpy<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &NDTensor<T>, b: &NDTensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn expect_rank<T: Scalar>(op: &'static str, t: &NDTensor<T>, rank: usize) -> Result<()> {
    if t.shape().len() != rank {
        return Err(Error::BadGeometry {
            op,
            msg: format!("expected rank {rank}"),
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    // Branch on sign so exp never overflows.
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

impl<T: Scalar> NDTensor<T> {
    pub fn add(&self, other: &NDTensor<T>) -> Result<NDTensor<T>> {
        same_shape("add", self, other)?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        let n = data.len();
        let (ia, ib) = (self.id(), other.id());
        let (ta, tb) = (self.is_tracked(), other.is_tracked());
        NDTensor::op_output("add", &[self, other], self.shape().to_vec(), data, move || {
            Box::new(move |gout, grads| {
                if ta {
                    axpy(grads.buf(ia, n), gout);
                }
                if tb {
                    axpy(grads.buf(ib, n), gout);
                }
            })
        })
    }

    pub fn sub(&self, other: &NDTensor<T>) -> Result<NDTensor<T>> {
        same_shape("sub", self, other)?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a - b)
            .collect();
        let n = data.len();
        let (ia, ib) = (self.id(), other.id());
        let (ta, tb) = (self.is_tracked(), other.is_tracked());
        NDTensor::op_output("sub", &[self, other], self.shape().to_vec(), data, move || {
            Box::new(move |gout, grads| {
                if ta {
                    axpy(grads.buf(ia, n), gout);
                }
                if tb {
                    for (g, &go) in grads.buf(ib, n).iter_mut().zip(gout) {
                        *g -= go;
                    }
                }
            })
        })
    }

    /// Elementwise product.
    pub fn mul(&self, other: &NDTensor<T>) -> Result<NDTensor<T>> {
        same_shape("mul", self, other)?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a * b)
            .collect();
        let n = data.len();
        let (ia, ib) = (self.id(), other.id());
        let (ta, tb) = (self.is_tracked(), other.is_tracked());
        let (sa, sb) = (Rc::clone(&self.inner), Rc::clone(&other.inner));
        NDTensor::op_output("mul", &[self, other], self.shape().to_vec(), data, move || {
            Box::new(move |gout, grads| {
                if ta {
                    let b = sb.data();
                    for ((g, &go), &bv) in grads.buf(ia, n).iter_mut().zip(gout).zip(b.iter()) {
                        *g += go * bv;
                    }
                }
                if tb {
                    let a = sa.data();
                    for ((g, &go), &av) in grads.buf(ib, n).iter_mut().zip(gout).zip(a.iter()) {
                        *g += go * av;
                    }
                }
            })
        })
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, c: T) -> Result<NDTensor<T>> {
        let data: Vec<T> = self.data().iter().map(|&a| a * c).collect();
        let n = data.len();
        let (id, tracked) = (self.id(), self.is_tracked());
        NDTensor::op_output("scale", &[self], self.shape().to_vec(), data, move || {
            Box::new(move |gout, grads| {
                if tracked {
                    for (g, &go) in grads.buf(id, n).iter_mut().zip(gout) {
                        *g += go * c;
                    }
                }
            })
        })
    }

    pub fn relu(&self) -> Result<NDTensor<T>> {
        let data: Vec<T> = self.data().iter().map(|&a| a.maximum(T::ZERO)).collect();
        let n = data.len();
        let (id, tracked) = (self.id(), self.is_tracked());
        let saved = Rc::clone(&self.inner);
        NDTensor::op_output("relu", &[self], self.shape().to_vec(), data, move || {
            Box::new(move |gout, grads| {
                if tracked {
                    let x = saved.data();
                    for ((g, &go), &xv) in grads.buf(id, n).iter_mut().zip(gout).zip(x.iter()) {
                        if xv > T::ZERO {
                            *g += go;
                        }
                    }
                }
            })
        })
    }

    pub fn sigmoid(&self) -> Result<NDTensor<T>> {
        let data: Vec<T> = self.data().iter().map(|&a| sigmoid_scalar(a)).collect();
        let n = data.len();
        let (id, tracked) = (self.id(), self.is_tracked());
        // σ'(x) = σ(x)(1−σ(x)); save the output values.
        let saved: Rc<[T]> = data.clone().into();
        NDTensor::op_output("sigmoid", &[self], self.shape().to_vec(), data, move || {
            Box::new(move |gout, grads| {
                if tracked {
                    for ((g, &go), &y) in grads.buf(id, n).iter_mut().zip(gout).zip(saved.iter()) {
                        *g += go * y * (T::ONE - y);
                    }
                }
            })
        })
    }

    pub fn reshape(&self, new_shape: impl Into<Vec<usize>>) -> Result<NDTensor<T>> {
        let new_shape = new_shape.into();
        let new_numel: usize = new_shape.iter().product();
        if new_shape.iter().any(|&e| e == 0) || new_numel != self.numel() {
            return Err(Error::BadGeometry {
                op: "reshape",
                msg: format!("cannot reshape {:?} to {:?}", self.shape(), new_shape),
                shape: self.shape().to_vec(),
            });
        }
        let data = self.to_vec();
        let n = data.len();
        let (id, tracked) = (self.id(), self.is_tracked());
        NDTensor::op_output("reshape", &[self], new_shape, data, move || {
            Box::new(move |gout, grads| {
                if tracked {
                    axpy(grads.buf(id, n), gout);
                }
            })
        })
    }

    /// 2-D transpose.
    pub fn transpose2d(&self) -> Result<NDTensor<T>> {
        expect_rank("transpose2d", self, 2)?;
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let x = self.data();
        let mut data = vec![T::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = x[i * n + j];
            }
        }
        drop(x);
        let (id, tracked) = (self.id(), self.is_tracked());
        NDTensor::op_output("transpose2d", &[self], vec![n, m], data, move || {
            Box::new(move |gout, grads| {
                if tracked {
                    let gx = grads.buf(id, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += gout[j * m + i];
                        }
                    }
                }
            })
        })
    }

    /// Slice `len` indices starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<NDTensor<T>> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::BadGeometry {
                op: "narrow",
                msg: format!("axis {axis}, range {start}..{}", start + len),
                shape: shape.to_vec(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut data = vec![T::ZERO; outer * len * inner];
        for o in 0..outer {
            let src = &x[(o * axis_len + start) * inner..(o * axis_len + start + len) * inner];
            data[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        drop(x);
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let (id, tracked) = (self.id(), self.is_tracked());
        let total = self.numel();
        NDTensor::op_output("narrow", &[self], out_shape, data, move || {
            Box::new(move |gout, grads| {
                if tracked {
                    let gx = grads.buf(id, total);
                    for o in 0..outer {
                        let dst = &mut gx
                            [(o * axis_len + start) * inner..(o * axis_len + start + len) * inner];
                        axpy(dst, &gout[o * len * inner..(o + 1) * len * inner]);
                    }
                }
            })
        })
    }

    /// Sum of all elements, a `[1]` tensor.
    pub fn sum_all(&self) -> Result<NDTensor<T>> {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        let (id, tracked) = (self.id(), self.is_tracked());
        NDTensor::op_output("sum_all", &[self], vec![1], vec![s], move || {
            Box::new(move |gout, grads| {
                if tracked {
                    let g0 = gout[0];
                    for g in grads.buf(id, n).iter_mut() {
                        *g += g0;
                    }
                }
            })
        })
    }

    /// Per-channel spatial mean: `[B,C,h,w] -> [B,C]`.
    pub fn global_avg_pool(&self) -> Result<NDTensor<T>> {
        expect_rank("global_avg_pool", self, 4)?;
        let (b, c, h, w) = {
            let s = self.shape();
            (s[0], s[1], s[2], s[3])
        };
        let hw = h * w;
        let inv = T::ONE / T::from_usize(hw);
        let x = self.data();
        let mut data = vec![T::ZERO; b * c];
        for (i, v) in data.iter_mut().enumerate() {
            let plane = &x[i * hw..(i + 1) * hw];
            let mut s = T::ZERO;
            for &p in plane {
                s += p;
            }
            *v = s * inv;
        }
        drop(x);
        let (id, tracked) = (self.id(), self.is_tracked());
        NDTensor::op_output("global_avg_pool", &[self], vec![b, c], data, move || {
            Box::new(move |gout, grads| {
                if tracked {
                    let gx = grads.buf(id, b * c * hw);
                    for (i, &go) in gout.iter().enumerate() {
                        let spread = go * inv;
                        for g in gx[i * hw..(i + 1) * hw].iter_mut() {
                            *g += spread;
                        }
                    }
                }
            })
        })
    }

    /// Broadcast-add a `[o]` bias onto each row of a `[B,o]` matrix.
    pub fn add_bias2d(&self, bias: &NDTensor<T>) -> Result<NDTensor<T>> {
        expect_rank("add_bias2d", self, 2)?;
        if bias.shape() != [self.shape()[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_bias2d",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        let bvals = bias.to_vec();
        let mut data = self.to_vec();
        for r in 0..rows {
            axpy(&mut data[r * cols..(r + 1) * cols], &bvals);
        }
        let (ix, ib) = (self.id(), bias.id());
        let (tx, tb) = (self.is_tracked(), bias.is_tracked());
        NDTensor::op_output("add_bias2d", &[self, bias], self.shape().to_vec(), data, move || {
            Box::new(move |gout, grads| {
                if tx {
                    axpy(grads.buf(ix, rows * cols), gout);
                }
                if tb {
                    let gb = grads.buf(ib, cols);
                    for r in 0..rows {
                        axpy(gb, &gout[r * cols..(r + 1) * cols]);
                    }
                }
            })
        })
    }

    /// Scale feature map `[B,C,h,w]` by per-sample per-channel gates `[B,C]`.
    pub fn mul_channels(&self, gates: &NDTensor<T>) -> Result<NDTensor<T>> {
        expect_rank("mul_channels", self, 4)?;
        if gates.shape() != [self.shape()[0], self.shape()[1]] {
            return Err(Error::ShapeMismatch {
                op: "mul_channels",
                lhs: self.shape().to_vec(),
                rhs: gates.shape().to_vec(),
            });
        }
        let hw = self.shape()[2] * self.shape()[3];
        let bc = self.shape()[0] * self.shape()[1];
        let x = self.data();
        let g = gates.data();
        let mut data = vec![T::ZERO; bc * hw];
        for i in 0..bc {
            let gv = g[i];
            for (d, &xv) in data[i * hw..(i + 1) * hw].iter_mut().zip(&x[i * hw..(i + 1) * hw]) {
                *d = xv * gv;
            }
        }
        drop(x);
        drop(g);
        let (ix, ig) = (self.id(), gates.id());
        let (tx, tg) = (self.is_tracked(), gates.is_tracked());
        let (sx, sg) = (Rc::clone(&self.inner), Rc::clone(&gates.inner));
        NDTensor::op_output("mul_channels", &[self, gates], self.shape().to_vec(), data, move || {
            Box::new(move |gout, grads| {
                if tx {
                    let g = sg.data();
                    let gx = grads.buf(ix, bc * hw);
                    for i in 0..bc {
                        let gv = g[i];
                        for (d, &go) in gx[i * hw..(i + 1) * hw].iter_mut().zip(&gout[i * hw..(i + 1) * hw]) {
                            *d += go * gv;
                        }
                    }
                }
                if tg {
                    let x = sx.data();
                    let gg = grads.buf(ig, bc);
                    for (i, ggi) in gg.iter_mut().enumerate() {
                        let mut s = T::ZERO;
                        for (&go, &xv) in gout[i * hw..(i + 1) * hw].iter().zip(&x[i * hw..(i + 1) * hw]) {
                            s += go * xv;
                        }
                        *ggi += s;
                    }
                }
            })
        })
    }

    /// Per-channel affine `x*a + b` with constant `[C]` vectors (inference
    /// batch norm).
    pub fn affine_channels(&self, a: &NDTensor<T>, b: &NDTensor<T>) -> Result<NDTensor<T>> {
        expect_rank("affine_channels", self, 4)?;
        let c = self.shape()[1];
        if a.shape() != [c] || b.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "affine_channels",
                lhs: self.shape().to_vec(),
                rhs: a.shape().to_vec(),
            });
        }
        let (batch, hw) = (self.shape()[0], self.shape()[2] * self.shape()[3]);
        let x = self.data();
        let av = a.to_vec();
        let bv = b.to_vec();
        let mut data = vec![T::ZERO; batch * c * hw];
        for bi in 0..batch {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                for (d, &xv) in data[base..base + hw].iter_mut().zip(&x[base..base + hw]) {
                    *d = xv * av[ci] + bv[ci];
                }
            }
        }
        drop(x);
        let (ix, ia, ib) = (self.id(), a.id(), b.id());
        let (tx, ta, tb) = (self.is_tracked(), a.is_tracked(), b.is_tracked());
        let sx = Rc::clone(&self.inner);
        NDTensor::op_output(
            "affine_channels",
            &[self, a, b],
            self.shape().to_vec(),
            data,
            move || {
                Box::new(move |gout, grads| {
                    if tx {
                        let gx = grads.buf(ix, batch * c * hw);
                        for bi in 0..batch {
                            for ci in 0..c {
                                let base = (bi * c + ci) * hw;
                                let scale = av[ci];
                                for (g, &go) in gx[base..base + hw].iter_mut().zip(&gout[base..base + hw]) {
                                    *g += go * scale;
                                }
                            }
                        }
                    }
                    if ta {
                        let x = sx.data();
                        let ga = grads.buf(ia, c);
                        for bi in 0..batch {
                            for (ci, gac) in ga.iter_mut().enumerate() {
                                let base = (bi * c + ci) * hw;
                                let mut s = T::ZERO;
                                for (&go, &xv) in gout[base..base + hw].iter().zip(&x[base..base + hw]) {
                                    s += go * xv;
                                }
                                *gac += s;
                            }
                        }
                    }
                    if tb {
                        let gb = grads.buf(ib, c);
                        for bi in 0..batch {
                            for (ci, gbc) in gb.iter_mut().enumerate() {
                                let base = (bi * c + ci) * hw;
                                let mut s = T::ZERO;
                                for &go in &gout[base..base + hw] {
                                    s += go;
                                }
                                *gbc += s;
                            }
                        }
                    }
                })
            },
        )
    }

    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &NDTensor<T>) -> Result<NDTensor<T>> {
        expect_rank("matmul", self, 2)?;
        expect_rank("matmul", other, 2)?;
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let mut data = vec![T::ZERO; m * n];
        kernels::matmul_into(&self.data(), &other.data(), &mut data, m, k, n);
        let (ia, ib) = (self.id(), other.id());
        let (ta, tb) = (self.is_tracked(), other.is_tracked());
        let (sa, sb) = (Rc::clone(&self.inner), Rc::clone(&other.inner));
        NDTensor::op_output("matmul", &[self, other], vec![m, n], data, move || {
            Box::new(move |gout, grads| {
                if ta {
                    // dA += gout · B^T
                    let b = sb.data();
                    kernels::matmul_nt_acc(gout, &b, grads.buf(ia, m * k), m, n, k);
                }
                if tb {
                    // dB += A^T · gout
                    let a = sa.data();
                    kernels::matmul_tn_acc(&a, gout, grads.buf(ib, k * n), m, k, n);
                }
            })
        })
    }

    /// Grouped 2-D cross-correlation: `[B,Cin,h,w] * [Cout,Cin/g,kh,kw]`.
    pub fn conv2d(
        &self,
        weight: &NDTensor<T>,
        groups: usize,
        stride: usize,
        pad: usize,
    ) -> Result<NDTensor<T>> {
        let geom = conv_geometry(self.shape(), weight.shape(), groups, stride, pad)?;
        let mut data = vec![T::ZERO; geom.batch * geom.c_out * geom.out_positions()];
        kernels::conv2d_into(&self.data(), &weight.data(), &mut data, &geom);
        let out_shape = vec![geom.batch, geom.c_out, geom.h_out, geom.w_out];
        let (ix, iw) = (self.id(), weight.id());
        let (tx, tw) = (self.is_tracked(), weight.is_tracked());
        let (sx, sw) = (Rc::clone(&self.inner), Rc::clone(&weight.inner));
        let (x_len, w_len) = (self.numel(), weight.numel());
        NDTensor::op_output("conv2d", &[self, weight], out_shape, data, move || {
            Box::new(move |gout, grads| {
                if tw {
                    let x = sx.data();
                    kernels::conv2d_dw_acc(&x, gout, grads.buf(iw, w_len), &geom);
                }
                if tx {
                    let w = sw.data();
                    kernels::conv2d_dx_acc(&w, gout, grads.buf(ix, x_len), &geom);
                }
            })
        })
    }

    /// Stable masked cross-entropy over rows of `[B,K]` logits; returns the
    /// mean loss as a `[1]` tensor.
    pub fn cross_entropy_logits(&self, labels: &[usize]) -> Result<NDTensor<T>> {
        expect_rank("cross_entropy_logits", self, 2)?;
        let (b, k) = (self.shape()[0], self.shape()[1]);
        if labels.len() != b {
            return Err(Error::Usage(format!(
                "cross_entropy_logits: {} labels for batch {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Usage(format!(
                "cross_entropy_logits: label {bad} out of range for {k} classes"
            )));
        }
        let x = self.data();
        let mut probs = vec![T::ZERO; b * k];
        let mut loss = T::ZERO;
        for (r, &label) in labels.iter().enumerate() {
            let row = &x[r * k..(r + 1) * k];
            let mut m = row[0];
            for &v in row {
                m = m.maximum(v);
            }
            let mut denom = T::ZERO;
            for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - m).exp();
                denom += *p;
            }
            for p in probs[r * k..(r + 1) * k].iter_mut() {
                *p = *p / denom;
            }
            loss += denom.ln() + m - row[label];
        }
        drop(x);
        let inv_b = T::ONE / T::from_usize(b);
        loss *= inv_b;
        let (id, tracked) = (self.id(), self.is_tracked());
        let labels: Vec<usize> = labels.to_vec();
        NDTensor::op_output("cross_entropy_logits", &[self], vec![1], vec![loss], move || {
            Box::new(move |gout, grads| {
                if tracked {
                    let g0 = gout[0] * inv_b;
                    let gx = grads.buf(id, b * k);
                    for (r, &label) in labels.iter().enumerate() {
                        for (j, (g, &p)) in gx[r * k..(r + 1) * k]
                            .iter_mut()
                            .zip(&probs[r * k..(r + 1) * k])
                            .enumerate()
                        {
                            let delta = if j == label { T::ONE } else { T::ZERO };
                            *g += g0 * (p - delta);
                        }
                    }
                }
            })
        })
    }

    /// Replicate along a new leading batch axis: `[d...] -> [batch, d...]`.
    pub fn broadcast_batch(&self, batch: usize) -> Result<NDTensor<T>> {
        if batch == 0 {
            return Err(Error::BadGeometry {
                op: "broadcast_batch",
                msg: "batch must be >= 1".into(),
                shape: self.shape().to_vec(),
            });
        }
        let n = self.numel();
        let x = self.data();
        let mut data = vec![T::ZERO; batch * n];
        for b in 0..batch {
            data[b * n..(b + 1) * n].copy_from_slice(&x);
        }
        drop(x);
        let mut out_shape = Vec::with_capacity(self.shape().len() + 1);
        out_shape.push(batch);
        out_shape.extend_from_slice(self.shape());
        let (id, tracked) = (self.id(), self.is_tracked());
        NDTensor::op_output("broadcast_batch", &[self], out_shape, data, move || {
            Box::new(move |gout, grads| {
                if tracked {
                    let gx = grads.buf(id, n);
                    for b in 0..batch {
                        axpy(gx, &gout[b * n..(b + 1) * n]);
                    }
                }
            })
        })
    }

    /// Row-wise argmax of a `[B,K]` matrix; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        expect_rank("argmax_rows", self, 2)?;
        let (b, k) = (self.shape()[0], self.shape()[1]);
        let x = self.data();
        Ok((0..b)
            .map(|r| {
                let row = &x[r * k..(r + 1) * k];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

/// Batch-norm training forward. Returns the normalized output plus the
/// detached per-channel batch mean and (biased) variance for running-stat
/// updates.
pub fn batch_norm_train<T: Scalar>(
    x: &NDTensor<T>,
    gamma: &NDTensor<T>,
    beta: &NDTensor<T>,
    eps: T,
) -> Result<(NDTensor<T>, NDTensor<T>, NDTensor<T>)> {
    expect_rank("batch_norm", x, 4)?;
    let (b, c, h, w) = {
        let s = x.shape();
        (s[0], s[1], s[2], s[3])
    };
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let hw = h * w;
    let n_per_c = b * hw;
    let inv_n = T::ONE / T::from_usize(n_per_c);
    let xv = x.data();
    let mut mean = vec![T::ZERO; c];
    let mut var = vec![T::ZERO; c];
    for ci in 0..c {
        let mut s = T::ZERO;
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for &v in &xv[base..base + hw] {
                s += v;
            }
        }
        mean[ci] = s * inv_n;
        let mut sq = T::ZERO;
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for &v in &xv[base..base + hw] {
                let d = v - mean[ci];
                sq += d * d;
            }
        }
        var[ci] = sq * inv_n;
    }
    let sigma: Vec<T> = var.iter().map(|&v| (v + eps).sqrt()).collect();
    let gv = gamma.to_vec();
    let bv = beta.to_vec();
    let mut xhat = vec![T::ZERO; b * c * hw];
    let mut data = vec![T::ZERO; b * c * hw];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            let inv_sigma = T::ONE / sigma[ci];
            for i in base..base + hw {
                let xh = (xv[i] - mean[ci]) * inv_sigma;
                xhat[i] = xh;
                data[i] = gv[ci] * xh + bv[ci];
            }
        }
    }
    drop(xv);
    let (ix, ig, ib2) = (x.id(), gamma.id(), beta.id());
    let (tx, tg, tb) = (x.is_tracked(), gamma.is_tracked(), beta.is_tracked());
    let sigma_bw = sigma.clone();
    let y = NDTensor::op_output(
        "batch_norm",
        &[x, gamma, beta],
        x.shape().to_vec(),
        data,
        move || {
            Box::new(move |gout, grads| {
                // Per channel: sum_g = Σ dy, sum_gx = Σ dy·x̂.
                let mut sum_g = vec![T::ZERO; c];
                let mut sum_gx = vec![T::ZERO; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        for i in base..base + hw {
                            sum_g[ci] += gout[i];
                            sum_gx[ci] += gout[i] * xhat[i];
                        }
                    }
                }
                if tg {
                    axpy(grads.buf(ig, c), &sum_gx);
                }
                if tb {
                    axpy(grads.buf(ib2, c), &sum_g);
                }
                if tx {
                    let n_t = T::from_usize(n_per_c);
                    let gx = grads.buf(ix, b * c * hw);
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            let coef = gv[ci] / (n_t * sigma_bw[ci]);
                            for i in base..base + hw {
                                gx[i] += coef * (n_t * gout[i] - sum_g[ci] - xhat[i] * sum_gx[ci]);
                            }
                        }
                    }
                }
            })
        },
    )?;
    let mean_t = NDTensor::from_vec(vec![c], mean)?;
    let var_t = NDTensor::from_vec(vec![c], var)?;
    Ok((y, mean_t, var_t))
}

/// Concatenate along `axis`. All other extents must agree.
pub fn concat<T: Scalar>(parts: &[&NDTensor<T>], axis: usize) -> Result<NDTensor<T>> {
    if parts.is_empty() {
        return Err(Error::Usage("concat of zero tensors".into()));
    }
    let rank = parts[0].shape().len();
    if axis >= rank {
        return Err(Error::BadGeometry {
            op: "concat",
            msg: format!("axis {axis} out of range"),
            shape: parts[0].shape().to_vec(),
        });
    }
    let mut axis_total = 0;
    for p in parts {
        if p.shape().len() != rank
            || p.shape()[..axis] != parts[0].shape()[..axis]
            || p.shape()[axis + 1..] != parts[0].shape()[axis + 1..]
        {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        axis_total += p.shape()[axis];
    }
    let outer: usize = parts[0].shape()[..axis].iter().product();
    let inner: usize = parts[0].shape()[axis + 1..].iter().product();
    let mut out_shape = parts[0].shape().to_vec();
    out_shape[axis] = axis_total;
    let mut data = vec![T::ZERO; outer * axis_total * inner];
    let mut offset = 0;
    for p in parts {
        let alen = p.shape()[axis];
        let pd = p.data();
        for o in 0..outer {
            let dst_base = (o * axis_total + offset) * inner;
            let src_base = o * alen * inner;
            data[dst_base..dst_base + alen * inner]
                .copy_from_slice(&pd[src_base..src_base + alen * inner]);
        }
        offset += alen;
    }
    // (id, tracked, axis extent, numel) per part, for the scatter backward.
    let meta: Vec<(u64, bool, usize, usize)> = parts
        .iter()
        .map(|p| (p.id(), p.is_tracked(), p.shape()[axis], p.numel()))
        .collect();
    NDTensor::op_output("concat", parts, out_shape, data, move || {
        Box::new(move |gout, grads| {
            let mut offset = 0;
            for &(id, tracked, alen, numel) in &meta {
                if tracked {
                    let gp = grads.buf(id, numel);
                    for o in 0..outer {
                        let src_base = (o * axis_total + offset) * inner;
                        let dst_base = o * alen * inner;
                        axpy(
                            &mut gp[dst_base..dst_base + alen * inner],
                            &gout[src_base..src_base + alen * inner],
                        );
                    }
                }
                offset += alen;
            }
        })
    })
}

fn conv_geometry(
    x_shape: &[usize],
    w_shape: &[usize],
    groups: usize,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    if x_shape.len() != 4 || w_shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x_shape.to_vec(),
            rhs: w_shape.to_vec(),
        });
    }
    let (batch, c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (c_out, c_w, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    if groups == 0 || stride == 0 {
        return Err(Error::BadGeometry {
            op: "conv2d",
            msg: format!("groups ({groups}) and stride ({stride}) must be >= 1"),
            shape: x_shape.to_vec(),
        });
    }
    if c_in % groups != 0 || c_out % groups != 0 {
        return Err(Error::BadGeometry {
            op: "conv2d",
            msg: format!("groups {groups} must divide c_in {c_in} and c_out {c_out}"),
            shape: x_shape.to_vec(),
        });
    }
    if c_w != c_in / groups {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x_shape.to_vec(),
            rhs: w_shape.to_vec(),
        });
    }
    let span_h = h + 2 * pad;
    let span_w = w + 2 * pad;
    if kh == 0 || kw == 0 || kh > span_h || kw > span_w {
        return Err(Error::BadGeometry {
            op: "conv2d",
            msg: format!("kernel {kh}x{kw} does not fit padded input {span_h}x{span_w}"),
            shape: w_shape.to_vec(),
        });
    }
    if (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0 {
        return Err(Error::BadGeometry {
            op: "conv2d",
            msg: format!("stride {stride} does not evenly tile the padded input"),
            shape: x_shape.to_vec(),
        });
    }
    Ok(ConvGeom {
        batch,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        groups,
        stride,
        pad,
        h_out: (span_h - kh) / stride + 1,
        w_out: (span_w - kw) / stride + 1,
    })
}
