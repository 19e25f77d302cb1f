//! Differentiable primitives recorded on a [`Tape`].

use rand::{Rng, RngCore};

use super::tape::{Tape, Var};
use super::{NeighborIndices, Tensor};
use crate::error::{Error, Result};
use crate::par;
use crate::real::{gemm, sum_f64, sum_sq_dev, MatRef, Real};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<S = f32> {
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
}

impl<S: Real> BatchNormState<S> {
    pub fn new(channels: usize) -> Self {
        BatchNormState { running_mean: vec![S::zero(); channels], running_var: vec![S::one(); channels] }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Momentum update with the unbiased batch variance.
    pub(crate) fn update(&mut self, mean: &[f64], biased_var: &[f64], count: usize) {
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        for c in 0..self.channels() {
            let rm = self.running_mean[c].f64();
            let rv = self.running_var[c].f64();
            self.running_mean[c] = S::lit((1.0 - BN_MOMENTUM) * rm + BN_MOMENTUM * mean[c]);
            self.running_var[c] = S::lit((1.0 - BN_MOMENTUM) * rv + BN_MOMENTUM * biased_var[c] * unbias);
        }
    }
}

/// How dropout behaves on a forward pass.
pub enum DropoutMode<'a> {
    /// Identity.
    Eval,
    /// Training-mode plumbing with every unit kept (test hook).
    KeepAll,
    /// Inverted dropout with masks drawn from the given generator.
    Train(&'a mut dyn RngCore),
}

/// `(outer, extent, inner)` split of a shape around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize, op: &str) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(format!("{op}: axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

fn same_shape(a: &[usize], b: &[usize], op: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

impl<S: Real> Tape<S> {
    /// `[m, k] · [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul: cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        gemm(
            S::one(),
            MatRef::row_major(self.value(a).data(), m, k),
            MatRef::row_major(self.value(b).data(), k, n),
            S::zero(),
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            value,
            &[a, b],
            Box::new(move |ctx| {
                let g = MatRef::row_major(ctx.grad, m, n);
                let da = ctx.needs(0).then(|| {
                    let mut da = vec![S::zero(); m * k];
                    gemm(S::one(), g, MatRef::row_major(ctx.inputs[1].data(), k, n).t(), S::zero(), &mut da);
                    da
                });
                let db = ctx.needs(1).then(|| {
                    let mut db = vec![S::zero(); k * n];
                    gemm(S::one(), MatRef::row_major(ctx.inputs[0].data(), m, k).t(), g, S::zero(), &mut db);
                    db
                });
                vec![da, db]
            }),
        ))
    }

    /// 1×1 convolution: `x [B, Cin, ...]`, `w [Cout, Cin]` → `[B, Cout, ...]`.
    pub fn pointwise_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() < 2 || sw.len() != 2 || sw[1] != sx[1] {
            return Err(Error::shape(format!("pointwise_conv: input {sx:?} incompatible with weight {sw:?}")));
        }
        let (batch, cin, cout) = (sx[0], sx[1], sw[0]);
        let spatial: usize = sx[2..].iter().product();
        let mut out_shape = sx.clone();
        out_shape[1] = cout;
        let mut out = vec![S::zero(); batch * cout * spatial];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            par::for_each_chunk(&mut out, cout * spatial, |b, y| {
                let xb = &xd[b * cin * spatial..(b + 1) * cin * spatial];
                gemm(
                    S::one(),
                    MatRef::row_major(wd, cout, cin),
                    MatRef::row_major(xb, cin, spatial),
                    S::zero(),
                    y,
                );
            });
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            &[x, w],
            Box::new(move |ctx| {
                let xd = ctx.inputs[0].data();
                let wd = ctx.inputs[1].data();
                let g = ctx.grad;
                let dx = ctx.needs(0).then(|| {
                    let mut dx = vec![S::zero(); batch * cin * spatial];
                    par::for_each_chunk(&mut dx, cin * spatial, |b, dxb| {
                        let gb = &g[b * cout * spatial..(b + 1) * cout * spatial];
                        gemm(
                            S::one(),
                            MatRef::row_major(wd, cout, cin).t(),
                            MatRef::row_major(gb, cout, spatial),
                            S::zero(),
                            dxb,
                        );
                    });
                    dx
                });
                let dw = ctx.needs(1).then(|| {
                    let mut dw = vec![S::zero(); cout * cin];
                    for b in 0..batch {
                        let gb = &g[b * cout * spatial..(b + 1) * cout * spatial];
                        let xb = &xd[b * cin * spatial..(b + 1) * cin * spatial];
                        gemm(
                            S::one(),
                            MatRef::row_major(gb, cout, spatial),
                            MatRef::row_major(xb, cin, spatial).t(),
                            S::one(),
                            &mut dw,
                        );
                    }
                    dw
                });
                vec![dx, dw]
            }),
        ))
    }

    /// Neighbor gather: `x [B, C, N]`, `idx [B, N, k]` → `[B, C, N, k]` with
    /// `out[b, c, i, j] = x[b, c, idx[b, i, j]]`.
    pub fn gather_last_axis(&mut self, x: Var, idx: &NeighborIndices) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || sx[0] != idx.batch() || sx[2] != idx.points() {
            return Err(Error::shape(format!(
                "gather_last_axis: input {sx:?} incompatible with indices {:?}",
                idx.shape()
            )));
        }
        let (batch, c, n, k) = (sx[0], sx[1], sx[2], idx.k());
        let mut out = vec![S::zero(); batch * c * n * k];
        {
            let xd = self.value(x).data();
            let id = idx.data();
            par::for_each_chunk(&mut out, c * n * k, |b, ob| {
                let rows = &id[b * n * k..(b + 1) * n * k];
                for ch in 0..c {
                    let src = &xd[(b * c + ch) * n..(b * c + ch + 1) * n];
                    let dst = &mut ob[ch * n * k..(ch + 1) * n * k];
                    for (d, &j) in dst.iter_mut().zip(rows) {
                        *d = src[j as usize];
                    }
                }
            });
        }
        let value = Tensor::new(vec![batch, c, n, k], out)?;
        let idx = idx.clone();
        Ok(self.push(
            value,
            &[x],
            Box::new(move |ctx| {
                let g = ctx.grad;
                let mut dx = vec![S::zero(); batch * c * n];
                let id = idx.data();
                par::for_each_chunk(&mut dx, c * n, |b, dxb| {
                    let rows = &id[b * n * k..(b + 1) * n * k];
                    for ch in 0..c {
                        let gs = &g[(b * c + ch) * n * k..(b * c + ch + 1) * n * k];
                        let dst = &mut dxb[ch * n..(ch + 1) * n];
                        for (&gv, &j) in gs.iter().zip(rows) {
                            dst[j as usize] += gv;
                        }
                    }
                });
                vec![Some(dx)]
            }),
        ))
    }

    /// Appends a trailing axis of extent `k` by replication.
    pub fn repeat_last_axis(&mut self, x: Var, k: usize) -> Result<Var> {
        if k == 0 {
            return Err(Error::shape("repeat_last_axis: k must be positive"));
        }
        let mut shape = self.shape(x).to_vec();
        shape.push(k);
        let data: Vec<S> = self
            .value(x)
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, k))
            .collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            &[x],
            Box::new(move |ctx| {
                let dx = ctx.grad.chunks(k).map(|row| row.iter().copied().sum::<S>()).collect();
                vec![Some(dx)]
            }),
        ))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        check_axis(&base, axis, "concat")?;
        let mut extents = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!("concat along {axis}: {s:?} does not match {base:?}")));
            }
            extents.push(s[axis]);
        }
        let total: usize = extents.iter().sum();
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &e) in xs.iter().zip(&extents) {
                let d = self.value(x).data();
                out.extend_from_slice(&d[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            xs,
            Box::new(move |ctx| {
                let g = ctx.grad;
                let mut offset = 0;
                extents
                    .iter()
                    .enumerate()
                    .map(|(p, &e)| {
                        let start = offset;
                        offset += e;
                        ctx.needs(p).then(|| {
                            let mut dx = Vec::with_capacity(outer * e * inner);
                            for o in 0..outer {
                                let row = (o * total + start) * inner;
                                dx.extend_from_slice(&g[row..row + e * inner]);
                            }
                            dx
                        })
                    })
                    .collect()
            }),
        ))
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        check_axis(&sx, axis, "slice_axis")?;
        if start + len > sx[axis] || len == 0 {
            return Err(Error::shape(format!(
                "slice_axis: [{start}, {}) outside extent {} of axis {axis}",
                start + len,
                sx[axis]
            )));
        }
        let (outer, n, inner) = axis_split(&sx, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let row = (o * n + start) * inner;
            out.extend_from_slice(&d[row..row + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            &[x],
            Box::new(move |ctx| {
                let mut dx = vec![S::zero(); outer * n * inner];
                for o in 0..outer {
                    let row = (o * n + start) * inner;
                    dx[row..row + len * inner].copy_from_slice(&ctx.grad[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Maximum along `axis` (removed). The gradient goes to the first maximal
    /// entry only.
    pub fn max_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        check_axis(&sx, axis, "max_over_axis")?;
        let (outer, n, inner) = axis_split(&sx, axis);
        if n == 0 {
            return Err(Error::shape("max_over_axis over an empty axis"));
        }
        let d = self.value(x).data();
        let mut out = vec![S::zero(); outer * inner];
        let mut arg = vec![0u32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = d[o * n * inner + i];
                let mut best_a = 0;
                for a in 1..n {
                    let v = d[(o * n + a) * inner + i];
                    if v > best {
                        best = v;
                        best_a = a;
                    }
                }
                out[o * inner + i] = best;
                arg[o * inner + i] = best_a as u32;
            }
        }
        let mut shape = sx;
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            &[x],
            Box::new(move |ctx| {
                let mut dx = vec![S::zero(); outer * n * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let a = arg[o * inner + i] as usize;
                        dx[(o * n + a) * inner + i] = ctx.grad[o * inner + i];
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Mean along `axis` (removed), accumulated in 64-bit.
    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        check_axis(&sx, axis, "mean_over_axis")?;
        let (outer, n, inner) = axis_split(&sx, axis);
        if n == 0 {
            return Err(Error::shape("mean_over_axis over an empty axis"));
        }
        let d = self.value(x).data();
        let mut acc = vec![0.0f64; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let row = &d[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (s, v) in acc[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *s += v.f64();
                }
            }
        }
        let out = acc.into_iter().map(|s| S::lit(s / n as f64)).collect();
        let mut shape = sx;
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            &[x],
            Box::new(move |ctx| {
                let scale = S::lit(1.0 / n as f64);
                let mut dx = vec![S::zero(); outer * n * inner];
                for o in 0..outer {
                    let g = &ctx.grad[o * inner..(o + 1) * inner];
                    for a in 0..n {
                        let row = &mut dx[(o * n + a) * inner..(o * n + a + 1) * inner];
                        for (r, &gv) in row.iter_mut().zip(g) {
                            *r = gv * scale;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: S) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| if v > S::zero() { v } else { v * slope }).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            &[x],
            Box::new(move |ctx| {
                let dx = ctx
                    .grad
                    .iter()
                    .zip(ctx.inputs[0].data())
                    .map(|(&g, &v)| if v > S::zero() { g } else { g * slope })
                    .collect();
                vec![Some(dx)]
            }),
        ))
    }

    /// Batch normalization over every axis except the channel axis 1.
    ///
    /// Training mode normalizes with biased batch statistics and folds the
    /// unbiased variance into `state`; eval mode applies the frozen running
    /// statistics as a fixed affine map.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<S>,
        training: bool,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::shape(format!("batch_norm needs [B, C, ...], got {sx:?}")));
        }
        let (batch, c) = (sx[0], sx[1]);
        let spatial: usize = sx[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || state.channels() != c {
            return Err(Error::shape(format!("batch_norm: affine parameters do not match {c} channels")));
        }
        let count = batch * spatial;
        if count == 0 {
            return Err(Error::shape("batch_norm over an empty batch"));
        }
        let d = self.value(x).data();
        let (mean, var) = if training {
            let (mean, var) = channel_moments(d, batch, c, spatial);
            state.update(&mean, &var, count);
            (mean, var)
        } else {
            (
                state.running_mean.iter().map(|v| v.f64()).collect(),
                state.running_var.iter().map(|v| v.f64()).collect(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![S::zero(); d.len()];
        let mut out = vec![S::zero(); d.len()];
        for b in 0..batch {
            for ch in 0..c {
                let off = (b * c + ch) * spatial;
                let (m, s) = (mean[ch], inv_std[ch]);
                let (g, be) = (gd[ch].f64(), bd[ch].f64());
                for l in off..off + spatial {
                    let h = (d[l].f64() - m) * s;
                    xhat[l] = S::lit(h);
                    out[l] = S::lit(g * h + be);
                }
            }
        }
        let value = Tensor::new(sx, out)?;
        Ok(self.push(
            value,
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let g = ctx.grad;
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for b in 0..batch {
                    for ch in 0..c {
                        let off = (b * c + ch) * spatial;
                        for l in off..off + spatial {
                            dgamma[ch] += g[l].f64() * xhat[l].f64();
                            dbeta[ch] += g[l].f64();
                        }
                    }
                }
                let dx = ctx.needs(0).then(|| {
                    let gd = ctx.inputs[1].data();
                    let mut dx = vec![S::zero(); g.len()];
                    let inv_count = 1.0 / count as f64;
                    for b in 0..batch {
                        for ch in 0..c {
                            let scale = gd[ch].f64() * inv_std[ch];
                            let off = (b * c + ch) * spatial;
                            for l in off..off + spatial {
                                let v = if training {
                                    g[l].f64() - dbeta[ch] * inv_count - xhat[l].f64() * dgamma[ch] * inv_count
                                } else {
                                    g[l].f64()
                                };
                                dx[l] = S::lit(scale * v);
                            }
                        }
                    }
                    dx
                });
                vec![
                    dx,
                    Some(dgamma.into_iter().map(S::lit).collect()),
                    Some(dbeta.into_iter().map(S::lit).collect()),
                ]
            }),
        ))
    }

    /// Inverted dropout with drop probability `p ∈ [0, 1)`.
    pub fn dropout(&mut self, x: Var, p: f64, mode: &mut DropoutMode<'_>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} outside [0, 1)")));
        }
        let n = self.value(x).len();
        let mask: Vec<S> = match mode {
            DropoutMode::Eval | DropoutMode::KeepAll => vec![S::one(); n],
            DropoutMode::Train(rng) => {
                let keep = S::lit(1.0 / (1.0 - p));
                (0..n).map(|_| if rng.random::<f64>() >= p { keep } else { S::zero() }).collect()
            }
        };
        let out = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            &[x],
            Box::new(move |ctx| vec![Some(ctx.grad.iter().zip(&mask).map(|(&g, &m)| g * m).collect())]),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, |g, _, _| (g, g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, |g, _, _| (g, -g))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, |g, x, y| (g * y, g * x))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &str,
        f: impl Fn(S, S) -> S,
        df: impl Fn(S, S, S) -> (S, S) + 'static,
    ) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), op)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(
            value,
            &[a, b],
            Box::new(move |ctx| {
                let (xa, xb) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut da = Vec::with_capacity(xa.len());
                let mut db = Vec::with_capacity(xa.len());
                for ((&g, &x), &y) in ctx.grad.iter().zip(xa).zip(xb) {
                    let (p, q) = df(g, x, y);
                    da.push(p);
                    db.push(q);
                }
                vec![ctx.needs(0).then_some(da), ctx.needs(1).then_some(db)]
            }),
        ))
    }

    pub fn mul_scalar(&mut self, x: Var, s: S) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| v * s).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, &[x], Box::new(move |ctx| vec![Some(ctx.grad.iter().map(|&g| g * s).collect())])))
    }

    /// Adds a per-channel bias along axis 1.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || self.shape(bias) != [sx[1]] {
            return Err(Error::shape(format!("add_bias: bias {:?} does not match {sx:?}", self.shape(bias))));
        }
        let (batch, c) = (sx[0], sx[1]);
        let spatial: usize = sx[2..].iter().product();
        let bd = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (r, row) in out.chunks_mut(spatial).enumerate() {
            let bv = bd[r % c];
            row.iter_mut().for_each(|v| *v += bv);
        }
        let value = Tensor::new(sx, out)?;
        Ok(self.push(
            value,
            &[x, bias],
            Box::new(move |ctx| {
                let mut db = vec![S::zero(); c];
                for (r, row) in ctx.grad.chunks(spatial).enumerate() {
                    db[r % c] += row.iter().copied().sum::<S>();
                }
                let _ = batch;
                vec![ctx.needs(0).then(|| ctx.grad.to_vec()), Some(db)]
            }),
        ))
    }

    /// Euclidean norm along `axis`, kept as an extent-1 axis. The gradient at a
    /// zero vector is taken as zero.
    pub fn l2_norm_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        check_axis(&sx, axis, "l2_norm_axis")?;
        let (outer, n, inner) = axis_split(&sx, axis);
        let d = self.value(x).data();
        let norms = vector_norms(d, outer, n, inner);
        let out = norms.iter().map(|&v| S::lit(v)).collect();
        let mut shape = sx;
        shape[axis] = 1;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            &[x],
            Box::new(move |ctx| {
                let d = ctx.inputs[0].data();
                let mut dx = vec![S::zero(); d.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let nv = norms[o * inner + i];
                        if nv == 0.0 {
                            continue;
                        }
                        let g = ctx.grad[o * inner + i].f64() / nv;
                        for a in 0..n {
                            let l = (o * n + a) * inner + i;
                            dx[l] = S::lit(g * d[l].f64());
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// `x / (‖x‖ + eps)` along `axis`.
    pub fn normalize_axis(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        check_axis(&sx, axis, "normalize_axis")?;
        let (outer, n, inner) = axis_split(&sx, axis);
        let d = self.value(x).data();
        let norms = vector_norms(d, outer, n, inner);
        let mut out = vec![S::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let denom = norms[o * inner + i] + eps;
                for a in 0..n {
                    let l = (o * n + a) * inner + i;
                    out[l] = S::lit(d[l].f64() / denom);
                }
            }
        }
        let value = Tensor::new(sx, out)?;
        Ok(self.push(
            value,
            &[x],
            Box::new(move |ctx| {
                // d/dx [x / (r + eps)] = I/(r+eps) - x xᵀ / (r (r+eps)²)
                let d = ctx.inputs[0].data();
                let g = ctx.grad;
                let mut dx = vec![S::zero(); d.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let r = norms[o * inner + i];
                        let denom = r + eps;
                        let mut dot = 0.0;
                        for a in 0..n {
                            let l = (o * n + a) * inner + i;
                            dot += g[l].f64() * d[l].f64();
                        }
                        let radial = if r > 0.0 { dot / (r * denom * denom) } else { 0.0 };
                        for a in 0..n {
                            let l = (o * n + a) * inner + i;
                            dx[l] = S::lit(g[l].f64() / denom - radial * d[l].f64());
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Sum of all entries as a shape-`[]` scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = sum_f64(self.value(x).data());
        let n = self.value(x).len();
        Ok(self.push(Tensor::scalar(S::lit(s)), &[x], Box::new(move |ctx| vec![Some(vec![ctx.grad[0]; n])])))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, &[x], Box::new(|ctx| vec![Some(ctx.grad.to_vec())])))
    }
}

/// Per-channel biased mean and variance of `[B, C, L]` data, two-pass in 64-bit.
pub(crate) fn channel_moments<S: Real>(d: &[S], batch: usize, c: usize, spatial: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (batch * spatial) as f64;
    let mut mean = vec![0.0; c];
    for b in 0..batch {
        for (ch, m) in mean.iter_mut().enumerate() {
            let off = (b * c + ch) * spatial;
            *m += sum_f64(&d[off..off + spatial]);
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for b in 0..batch {
        for (ch, v) in var.iter_mut().enumerate() {
            let off = (b * c + ch) * spatial;
            let m = mean[ch];
            *v += sum_sq_dev(&d[off..off + spatial], m);
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

fn vector_norms<S: Real>(d: &[S], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut norms = vec![0.0f64; outer * inner];
    for o in 0..outer {
        for a in 0..n {
            let row = &d[(o * n + a) * inner..(o * n + a + 1) * inner];
            for (s, v) in norms[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                *s += v.f64() * v.f64();
            }
        }
    }
    norms.iter_mut().for_each(|s| *s = s.sqrt());
    norms
}
