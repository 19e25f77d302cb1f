//! Fused edge aggregation: edge value → batch norm → leaky ReLU → max over
//! neighbors, without materializing the `[B, C, N, k]` edge tensor for the
//! whole batch.
//!
//! Batch norm is a per-channel affine map `a·e + b` and leaky ReLU is
//! non-decreasing, so the maximum over neighbors of the activated value is the
//! activation of the extreme raw edge value: the maximum when `a > 0`, the
//! minimum when `a < 0`. Edge values are built one batch item at a time;
//! batch statistics are merged across items with Chan's update. The backward
//! pass rebuilds each item's edges and reproduces the exact gradient of the
//! composed `batch_norm` / `leaky_relu` / `max_over_axis` chain.

use super::ops::{BatchNormState, BN_EPS};
use super::tape::{Tape, Var};
use super::{NeighborIndices, Tensor};
use crate::error::{Error, Result};
use crate::par;
use crate::real::{gemm, sum_f64, sum_sq_dev, MatRef, Real};

#[derive(Clone, Copy, Debug)]
pub(crate) struct EdgeDims {
    pub batch: usize,
    pub points: usize,
    pub k: usize,
    pub channels: usize,
}

/// Produces one batch item's raw edge values and routes their gradients back.
pub(crate) trait EdgeSource<S: Real>: Send + Sync + 'static {
    type Grad: Send;

    fn dims(&self) -> EdgeDims;
    /// Edge values of item `b` for channels `ch0..ch0 + nch`, laid out
    /// neighbor-major as `[nch, k, N]` so per-point reductions over `j` vectorize.
    fn fill(&self, b: usize, ch0: usize, nch: usize, out: &mut [S]);
    fn new_grad(&self, needs: [bool; 2]) -> Self::Grad;
    /// Adds the contribution of `de [nch, k, N]` for item `b` to `grad`.
    fn route(&self, b: usize, ch0: usize, nch: usize, de: &[S], grad: &mut Self::Grad);
}

/// Channels per block, sized so a block of edge values stays cache resident.
fn block_channels(nk: usize, c: usize) -> usize {
    (32_768 / nk.max(1)).clamp(1, c.max(1))
}

/// `e[c, i, j] = center[c, i] + neighbor[c, idx(i, j)]`.
struct SumSource<S> {
    center: Vec<S>,
    nbr: Vec<S>,
    idx: NeighborIndices,
    /// Indices transposed to `[B, k, N]`.
    idx_t: Vec<u32>,
    channels: usize,
}

impl<S: Real> EdgeSource<S> for SumSource<S> {
    type Grad = (Vec<S>, Vec<S>);

    fn dims(&self) -> EdgeDims {
        EdgeDims { batch: self.idx.batch(), points: self.idx.points(), k: self.idx.k(), channels: self.channels }
    }

    fn fill(&self, b: usize, ch0: usize, nch: usize, out: &mut [S]) {
        let (n, k, c) = (self.idx.points(), self.idx.k(), self.channels);
        let idx = &self.idx_t[b * n * k..(b + 1) * n * k];
        for (cb, block) in out.chunks_mut(n * k).take(nch).enumerate() {
            let base = (b * c + ch0 + cb) * n;
            let ctr = &self.center[base..base + n];
            let nbr = &self.nbr[base..base + n];
            for (row, ids) in block.chunks_mut(n).zip(idx.chunks(n)) {
                for ((o, &x), &j) in row.iter_mut().zip(ctr).zip(ids) {
                    *o = x + nbr[j as usize];
                }
            }
        }
    }

    fn new_grad(&self, needs: [bool; 2]) -> Self::Grad {
        let len = self.channels * self.idx.points();
        (vec![S::zero(); if needs[0] { len } else { 0 }], vec![S::zero(); if needs[1] { len } else { 0 }])
    }

    fn route(&self, b: usize, ch0: usize, nch: usize, de: &[S], grad: &mut Self::Grad) {
        let (n, k) = (self.idx.points(), self.idx.k());
        let idx = &self.idx_t[b * n * k..(b + 1) * n * k];
        let (dc, dn) = grad;
        for (cb, block) in de.chunks(n * k).take(nch).enumerate() {
            let ch = ch0 + cb;
            if !dc.is_empty() {
                let dst = &mut dc[ch * n..(ch + 1) * n];
                for row in block.chunks(n) {
                    dst.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                }
            }
            if !dn.is_empty() {
                let dst = &mut dn[ch * n..(ch + 1) * n];
                for (&g, &j) in block.iter().zip(idx) {
                    dst[j as usize] += g;
                }
            }
        }
    }
}

/// `e[:, i, j] = W · feats[:, i, j]` for explicit per-edge features.
struct ConvSource<S> {
    /// Features transposed to `[B, D, k, N]`.
    feats: Vec<S>,
    w: Vec<S>,
    dims: EdgeDims,
    depth: usize,
}

impl<S: Real> EdgeSource<S> for ConvSource<S> {
    type Grad = (Vec<S>, Vec<S>);

    fn dims(&self) -> EdgeDims {
        self.dims
    }

    fn fill(&self, b: usize, ch0: usize, nch: usize, out: &mut [S]) {
        let EdgeDims { points, k, .. } = self.dims;
        let (nk, d) = (points * k, self.depth);
        let f = &self.feats[b * d * nk..(b + 1) * d * nk];
        gemm(
            S::one(),
            MatRef::row_major(&self.w[ch0 * d..(ch0 + nch) * d], nch, d),
            MatRef::row_major(f, d, nk),
            S::zero(),
            &mut out[..nch * nk],
        );
    }

    fn new_grad(&self, needs: [bool; 2]) -> Self::Grad {
        let EdgeDims { points, k, channels, .. } = self.dims;
        let d = self.depth;
        (
            vec![S::zero(); if needs[0] { d * points * k } else { 0 }],
            vec![S::zero(); if needs[1] { channels * d } else { 0 }],
        )
    }

    fn route(&self, b: usize, ch0: usize, nch: usize, de: &[S], grad: &mut Self::Grad) {
        let EdgeDims { points, k, .. } = self.dims;
        let (nk, d) = (points * k, self.depth);
        let f = &self.feats[b * d * nk..(b + 1) * d * nk];
        let de = MatRef::row_major(&de[..nch * nk], nch, nk);
        let (df, dw) = grad;
        if !df.is_empty() {
            let w = MatRef::row_major(&self.w[ch0 * d..(ch0 + nch) * d], nch, d);
            gemm(S::one(), w.t(), de, S::one(), df);
        }
        if !dw.is_empty() {
            gemm(S::one(), de, MatRef::row_major(f, d, nk).t(), S::zero(), &mut dw[ch0 * d..(ch0 + nch) * d]);
        }
    }
}

/// Everything the backward pass needs from the forward pass; `[B, C, N]` layouts.
struct Saved<S> {
    sel: Vec<u32>,
    pre: Vec<S>,
    xhat: Vec<S>,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    scale: Vec<f64>,
    training: bool,
}

struct ItemPass<S> {
    mean: Vec<f64>,
    m2: Vec<f64>,
    sel: Vec<u32>,
    ext: Vec<S>,
}

fn forward<S: Real, E: EdgeSource<S>>(
    src: &E,
    gamma: &[S],
    beta: &[S],
    state: &mut BatchNormState<S>,
    training: bool,
    slope: S,
) -> (Vec<S>, Saved<S>) {
    let EdgeDims { batch, points: n, k, channels: c } = src.dims();
    let nk = n * k;
    // Sign of the batch-norm scale decides max vs min; inv_std > 0.
    let dir: Vec<i8> = gamma
        .iter()
        .map(|g| if *g > S::zero() { 1 } else if *g < S::zero() { -1 } else { 0 })
        .collect();

    let cb = block_channels(nk, c);
    let items: Vec<ItemPass<S>> = par::map_range_init(batch, || vec![S::zero(); cb * nk], |e, b| {
        let mut pass = ItemPass { mean: vec![0.0; c], m2: vec![0.0; c], sel: vec![0; c * n], ext: vec![S::zero(); c * n] };
        for ch0 in (0..c).step_by(cb) {
            let nch = cb.min(c - ch0);
            src.fill(b, ch0, nch, e);
            for (off, row) in e.chunks(nk).take(nch).enumerate() {
                let ch = ch0 + off;
                if training {
                    let mean = sum_f64(row) / nk as f64;
                    pass.mean[ch] = mean;
                    pass.m2[ch] = sum_sq_dev(row, mean);
                }
                let sel = &mut pass.sel[ch * n..(ch + 1) * n];
                let ext = &mut pass.ext[ch * n..(ch + 1) * n];
                ext.copy_from_slice(&row[..n]);
                sel.iter_mut().for_each(|s| *s = 0);
                // strict comparisons keep the lowest neighbor slot on ties
                for (j, edges) in row.chunks(n).enumerate().skip(1) {
                    let j = j as u32;
                    match dir[ch] {
                        1 => {
                            for ((x, s), &v) in ext.iter_mut().zip(sel.iter_mut()).zip(edges) {
                                let better = v > *x;
                                *x = if better { v } else { *x };
                                *s = if better { j } else { *s };
                            }
                        }
                        -1 => {
                            for ((x, s), &v) in ext.iter_mut().zip(sel.iter_mut()).zip(edges) {
                                let better = v < *x;
                                *x = if better { v } else { *x };
                                *s = if better { j } else { *s };
                            }
                        }
                        _ => break,
                    }
                }
            }
        }
        pass
    });

    let (mean, var) = if training {
        // Chan's merge of equally sized per-item moments.
        let nb = nk as f64;
        let total = nb * batch as f64;
        let mut mean = vec![0.0f64; c];
        for it in &items {
            mean.iter_mut().zip(&it.mean).for_each(|(m, v)| *m += v * nb);
        }
        mean.iter_mut().for_each(|m| *m /= total);
        let mut var = vec![0.0f64; c];
        for it in &items {
            for ch in 0..c {
                var[ch] += it.m2[ch] + nb * (it.mean[ch] - mean[ch]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= total);
        state.update(&mean, &var, batch * nk);
        (mean, var)
    } else {
        (
            state.running_mean.iter().map(|v| v.f64()).collect(),
            state.running_var.iter().map(|v| v.f64()).collect(),
        )
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let scale: Vec<f64> = gamma.iter().zip(&inv_std).map(|(g, s)| g.f64() * s).collect();

    let len = batch * c * n;
    let (mut out, mut sel, mut pre, mut xhat) =
        (vec![S::zero(); len], Vec::with_capacity(len), vec![S::zero(); len], vec![S::zero(); len]);
    for (b, it) in items.into_iter().enumerate() {
        for ch in 0..c {
            let (g, bt) = (gamma[ch].f64(), beta[ch].f64());
            for i in 0..n {
                let l = ch * n + i;
                let h = (it.ext[l].f64() - mean[ch]) * inv_std[ch];
                let y = S::lit(g * h + bt);
                let o = b * c * n + l;
                pre[o] = y;
                xhat[o] = S::lit(h);
                out[o] = if y > S::zero() { y } else { y * slope };
            }
        }
        sel.extend_from_slice(&it.sel);
    }
    (out, Saved { sel, pre, xhat, mean, inv_std, scale, training })
}

/// Per-item source gradients (when any source input needs one), dγ and dβ.
fn backward<S: Real, E: EdgeSource<S>>(
    src: &E,
    saved: &Saved<S>,
    grad: &[S],
    slope: S,
    needs: [bool; 2],
) -> (Option<Vec<E::Grad>>, Vec<S>, Vec<S>) {
    let EdgeDims { batch, points: n, k, channels: c } = src.dims();
    let nk = n * k;
    let count = (batch * nk) as f64;
    let mut dy = vec![S::zero(); batch * c * n];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for (l, d) in dy.iter_mut().enumerate() {
        let ch = (l / n) % c;
        let g = grad[l];
        *d = if saved.pre[l] > S::zero() { g } else { g * slope };
        dgamma[ch] += d.f64() * saved.xhat[l].f64();
        dbeta[ch] += d.f64();
    }
    let grads = (needs[0] || needs[1]).then(|| {
        let scale: Vec<S> = saved.scale.iter().map(|&v| S::lit(v)).collect();
        let mean: Vec<S> = saved.mean.iter().map(|&v| S::lit(v)).collect();
        let coef_mean: Vec<S> = dbeta.iter().map(|&v| S::lit(v / count)).collect();
        let coef_xhat: Vec<S> = dgamma.iter().zip(&saved.inv_std).map(|(&v, &s)| S::lit(v / count * s)).collect();
        let cb = block_channels(nk, c);
        par::map_range_init(batch, || vec![S::zero(); cb * nk], |de, b| {
            let mut grad = src.new_grad(needs);
            for ch0 in (0..c).step_by(cb) {
                let nch = cb.min(c - ch0);
                if saved.training {
                    src.fill(b, ch0, nch, de);
                } else {
                    de.iter_mut().for_each(|v| *v = S::zero());
                }
                for (off, row) in de.chunks_mut(nk).take(nch).enumerate() {
                    let ch = ch0 + off;
                    let base = (b * c + ch) * n;
                    let sel = &saved.sel[base..base + n];
                    let dyc = &dy[base..base + n];
                    let a = scale[ch];
                    if saved.training {
                        let (cm, cx, m) = (coef_mean[ch], coef_xhat[ch], mean[ch]);
                        for v in row.iter_mut() {
                            *v = -a * (cm + (*v - m) * cx);
                        }
                    }
                    for i in 0..n {
                        row[sel[i] as usize * n + i] += a * dyc[i];
                    }
                }
                src.route(b, ch0, nch, de, &mut grad);
            }
            grad
        })
    });
    (grads, dgamma.into_iter().map(S::lit).collect(), dbeta.into_iter().map(S::lit).collect())
}

fn check_affine<S: Real>(tape: &Tape<S>, gamma: Var, beta: Var, state: &BatchNormState<S>, c: usize) -> Result<()> {
    if tape.shape(gamma) != [c] || tape.shape(beta) != [c] || state.channels() != c {
        return Err(Error::shape(format!("edge aggregation: batch-norm parameters do not match {c} channels")));
    }
    Ok(())
}

/// `[outer, a, b]` → `[outer, b, a]`.
fn transpose_last2<T: Copy + Default>(d: &[T], outer: usize, a: usize, b: usize) -> Vec<T> {
    let mut out = vec![T::default(); d.len()];
    for o in 0..outer {
        let (src, dst) = (&d[o * a * b..(o + 1) * a * b], &mut out[o * a * b..(o + 1) * a * b]);
        for x in 0..a {
            for y in 0..b {
                dst[y * a + x] = src[x * b + y];
            }
        }
    }
    out
}

fn concat_parts<S: Real>(parts: impl Iterator<Item = Vec<S>>) -> Vec<S> {
    parts.flatten().collect()
}

impl<S: Real> Tape<S> {
    /// Fused EdgeConv aggregation over neighbor sums:
    /// `out[b, :, i] = max_j lrelu(bn(center[b, :, i] + neighbor[b, :, idx[b, i, j]]))`.
    ///
    /// Equal to `gather`/`repeat`/`add` → `batch_norm` → `leaky_relu` →
    /// `max_over_axis(3)`, with batch statistics taken over all `B·N·k` edges.
    #[allow(clippy::too_many_arguments)]
    pub fn edge_sum_bn_lrelu_max(
        &mut self,
        center: Var,
        neighbor: Var,
        idx: &NeighborIndices,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<S>,
        training: bool,
        slope: S,
    ) -> Result<Var> {
        let sc = self.shape(center).to_vec();
        if sc.len() != 3 || self.shape(neighbor) != sc.as_slice() || sc[0] != idx.batch() || sc[2] != idx.points() {
            return Err(Error::shape(format!(
                "edge_sum_bn_lrelu_max: center {sc:?}, neighbor {:?}, indices {:?}",
                self.shape(neighbor),
                idx.shape()
            )));
        }
        let (batch, c, n) = (sc[0], sc[1], sc[2]);
        check_affine(self, gamma, beta, state, c)?;
        let src = SumSource {
            center: self.value(center).data().to_vec(),
            nbr: self.value(neighbor).data().to_vec(),
            idx: idx.clone(),
            idx_t: transpose_last2(idx.data(), batch, n, idx.k()),
            channels: c,
        };
        let (out, saved) = forward(&src, self.value(gamma).data(), self.value(beta).data(), state, training, slope);
        let value = Tensor::new(vec![batch, c, n], out)?;
        Ok(self.push(
            value,
            &[center, neighbor, gamma, beta],
            Box::new(move |ctx| {
                let needs = [ctx.needs(0), ctx.needs(1)];
                let (grads, dgamma, dbeta) = backward(&src, &saved, ctx.grad, slope, needs);
                let (dc, dn) = match grads {
                    Some(g) => {
                        let (cs, ns): (Vec<_>, Vec<_>) = g.into_iter().unzip();
                        (needs[0].then(|| concat_parts(cs.into_iter())), needs[1].then(|| concat_parts(ns.into_iter())))
                    }
                    None => (None, None),
                };
                vec![dc, dn, Some(dgamma), Some(dbeta)]
            }),
        ))
    }

    /// Fused per-edge convolution and aggregation:
    /// `out[b, :, i] = max_j lrelu(bn(W · feats[b, :, i, j]))` for
    /// `feats [B, D, N, k]` and `W [C, D]`.
    ///
    /// Equal to `pointwise_conv` → `batch_norm` → `leaky_relu` → `max_over_axis(3)`.
    #[allow(clippy::too_many_arguments)]
    pub fn edge_conv_bn_lrelu_max(
        &mut self,
        feats: Var,
        weight: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<S>,
        training: bool,
        slope: S,
    ) -> Result<Var> {
        let sf = self.shape(feats).to_vec();
        let sw = self.shape(weight).to_vec();
        if sf.len() != 4 || sw.len() != 2 || sw[1] != sf[1] {
            return Err(Error::shape(format!("edge_conv_bn_lrelu_max: features {sf:?}, weight {sw:?}")));
        }
        let (batch, depth, n, k) = (sf[0], sf[1], sf[2], sf[3]);
        let c = sw[0];
        check_affine(self, gamma, beta, state, c)?;
        let src = ConvSource {
            feats: transpose_last2(self.value(feats).data(), batch * depth, n, k),
            w: self.value(weight).data().to_vec(),
            dims: EdgeDims { batch, points: n, k, channels: c },
            depth,
        };
        let (out, saved) = forward(&src, self.value(gamma).data(), self.value(beta).data(), state, training, slope);
        let value = Tensor::new(vec![batch, c, n], out)?;
        Ok(self.push(
            value,
            &[feats, weight, gamma, beta],
            Box::new(move |ctx| {
                let needs = [ctx.needs(0), ctx.needs(1)];
                let (grads, dgamma, dbeta) = backward(&src, &saved, ctx.grad, slope, needs);
                let (df, dw) = match grads {
                    Some(g) => {
                        let (fs, ws): (Vec<_>, Vec<_>) = g.into_iter().unzip();
                        let dw = needs[1].then(|| {
                            let mut dw = vec![S::zero(); c * depth];
                            for part in &ws {
                                dw.iter_mut().zip(part).for_each(|(a, v)| *a += *v);
                            }
                            dw
                        });
                        let df = needs[0].then(|| transpose_last2(&concat_parts(fs.into_iter()), batch * depth, k, n));
                        (df, dw)
                    }
                    None => (None, None),
                };
                vec![df, dw, Some(dgamma), Some(dbeta)]
            }),
        ))
    }
}
