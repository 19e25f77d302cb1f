//! Multi-scale k-NN graphs, scale-specific edge features and EdgeConv.

use std::collections::BinaryHeap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::par;
use crate::real::{gemm, MatRef, Real};
use crate::tensor::{BatchNormState, NeighborIndices, ParamId, ParamStore, Tape, Tensor, Var};

/// Neighborhood sizes for the local, branch and canopy scales.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ScaleTriple {
    pub k_local: usize,
    pub k_branch: usize,
    pub k_canopy: usize,
}

impl ScaleTriple {
    /// A hierarchical triple; rejects anything but `1 ≤ k1 < k2 < k3`.
    pub fn new(k_local: usize, k_branch: usize, k_canopy: usize) -> Result<Self> {
        let t = ScaleTriple { k_local, k_branch, k_canopy };
        t.validate_strict()?;
        Ok(t)
    }

    /// All three scales share one `k`; used by ablations where the graphs coincide.
    pub fn uniform(k: usize) -> Self {
        ScaleTriple { k_local: k, k_branch: k, k_canopy: k }
    }

    pub fn validate_strict(&self) -> Result<()> {
        if !(1 <= self.k_local && self.k_local < self.k_branch && self.k_branch < self.k_canopy) {
            return Err(Error::config(format!(
                "scales ({}, {}, {}) must satisfy 1 <= k1 < k2 < k3",
                self.k_local, self.k_branch, self.k_canopy
            )));
        }
        Ok(())
    }

    /// Weak ordering `1 ≤ k1 ≤ k2 ≤ k3 ≤ points`, the requirement of graph construction.
    pub fn validate_for(&self, points: usize) -> Result<()> {
        if !(1 <= self.k_local && self.k_local <= self.k_branch && self.k_branch <= self.k_canopy) {
            return Err(Error::config(format!(
                "scales ({}, {}, {}) are not ordered",
                self.k_local, self.k_branch, self.k_canopy
            )));
        }
        if self.k_canopy > points {
            return Err(Error::contract(format!("k_canopy {} exceeds {points} points", self.k_canopy)));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.k_local, self.k_branch, self.k_canopy]
    }
}

impl std::fmt::Display for ScaleTriple {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.k_local, self.k_branch, self.k_canopy)
    }
}

impl std::str::FromStr for ScaleTriple {
    type Err = Error;

    /// Parses `k1,k2,k3` (parentheses optional) and enforces the strict ordering.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().trim_start_matches('(').trim_end_matches(')').split(',').collect();
        if parts.len() != 3 {
            return Err(Error::config(format!("scale triple `{s}` needs three values")));
        }
        let mut ks = [0usize; 3];
        for (k, p) in ks.iter_mut().zip(&parts) {
            *k = p.trim().parse().map_err(|_| Error::config(format!("bad neighbor count `{p}` in `{s}`")))?;
        }
        ScaleTriple::new(ks[0], ks[1], ks[2])
    }
}

/// Per-scale neighbor indices; each row is sorted nearest first with the point itself leading.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndexSet {
    pub local: NeighborIndices,
    pub branch: NeighborIndices,
    pub canopy: NeighborIndices,
}

impl NeighborIndexSet {
    pub fn scales(&self) -> [&NeighborIndices; 3] {
        [&self.local, &self.branch, &self.canopy]
    }
}

/// Above this width distances come from a Gram matrix instead of direct differences.
const DIRECT_MAX_DIM: usize = 8;

/// Writes `i` followed by the `out.len() − 1` nearest other entries of `row`,
/// ordered by (distance, index). Distances must be non-negative so their bit
/// patterns order like their values.
fn select_row(i: usize, row: &[f64], heap: &mut BinaryHeap<(u64, u32)>, out: &mut [u32]) {
    let want = out.len() - 1;
    out[0] = i as u32;
    if want == 0 {
        return;
    }
    heap.clear();
    for (j, &d) in row.iter().enumerate() {
        if j == i {
            continue;
        }
        let key = (d.to_bits(), j as u32);
        if heap.len() < want {
            heap.push(key);
        } else if key.0 < heap.peek().expect("non-empty").0 {
            // later indices never win ties, so only a strictly smaller distance displaces
            heap.pop();
            heap.push(key);
        }
    }
    let start = out.len() - heap.len();
    for (o, (_, j)) in out[start..].iter_mut().rev().zip(std::iter::from_fn(|| heap.pop())) {
        *o = j;
    }
}

/// k nearest neighbors of every point under squared Euclidean distance in the
/// `D`-dimensional feature space of `features [B, D, N]`. The point itself is
/// always first; the rest are ordered by (distance, index).
pub fn knn<S: Real>(features: &Tensor<S>, k: usize) -> Result<NeighborIndices> {
    if features.ndim() != 3 {
        return Err(Error::shape(format!("knn expects [B, D, N], got {:?}", features.shape())));
    }
    let (batch, d, n) = (features.dim(0), features.dim(1), features.dim(2));
    if k == 0 || k > n {
        return Err(Error::contract(format!("k = {k} invalid for {n} points")));
    }
    let src = features.data();
    let mut out = vec![0u32; batch * n * k];
    par::for_each_chunk(&mut out, n * k, |b, rows| {
        let xb = &src[b * d * n..(b + 1) * d * n];
        let mut heap = BinaryHeap::with_capacity(k);
        let mut drow = vec![0.0f64; n];
        if d <= DIRECT_MAX_DIM {
            let cols: Vec<Vec<f64>> = (0..d).map(|c| xb[c * n..(c + 1) * n].iter().map(|v| v.f64()).collect()).collect();
            for (i, row) in rows.chunks_mut(k).enumerate() {
                drow.iter_mut().for_each(|v| *v = 0.0);
                for col in &cols {
                    let xi = col[i];
                    for (acc, &xj) in drow.iter_mut().zip(col) {
                        let t = xi - xj;
                        *acc += t * t;
                    }
                }
                select_row(i, &drow, &mut heap, row);
            }
        } else {
            let mut gram = vec![S::zero(); n * n];
            let x = MatRef::row_major(xb, d, n);
            gemm(S::one(), x.t(), x, S::zero(), &mut gram);
            let sq: Vec<f64> = (0..n).map(|i| gram[i * n + i].f64()).collect();
            for (i, row) in rows.chunks_mut(k).enumerate() {
                let g = &gram[i * n..(i + 1) * n];
                for ((v, &s), &gv) in drow.iter_mut().zip(&sq).zip(g) {
                    *v = (sq[i] + s - 2.0 * gv.f64()).max(0.0);
                }
                select_row(i, &drow, &mut heap, row);
            }
        }
    });
    NeighborIndices::new(batch, n, k, out)
}

/// Neighbor sets for all three scales from one sort at the canopy size.
pub fn knn_multiscale<S: Real>(features: &Tensor<S>, scales: ScaleTriple) -> Result<NeighborIndexSet> {
    if features.ndim() != 3 {
        return Err(Error::shape(format!("knn expects [B, D, N], got {:?}", features.shape())));
    }
    scales.validate_for(features.dim(2))?;
    let canopy = knn(features, scales.k_canopy)?;
    Ok(NeighborIndexSet {
        local: canopy.prefix(scales.k_local)?,
        branch: canopy.prefix(scales.k_branch)?,
        canopy,
    })
}

/// Default denominator guard for normalized directions.
pub const DIRECTION_EPS: f64 = 1e-8;

/// Channel counts of the local, branch and canopy edge features.
pub const SCALE_CHANNELS: [usize; 3] = [6, 9, 7];

/// Scale-specific edge features on the tape for `points [B, 3, N]`:
/// local `[R, X_ctr]`, branch `[R, R/(‖R‖+eps), X_ctr]`, canopy
/// `[R, X_ctr, ‖R‖]`, where `R = X_nbr − X_ctr`.
pub fn scale_features<S: Real>(tape: &mut Tape<S>, points: Var, idx: &NeighborIndexSet, eps: f64) -> Result<[Var; 3]> {
    let s = tape.shape(points).to_vec();
    if s.len() != 3 || s[1] != 3 {
        return Err(Error::shape(format!("scale features need [B, 3, N], got {s:?}")));
    }
    let rel_ctr = |tape: &mut Tape<S>, nb: &NeighborIndices| -> Result<(Var, Var)> {
        let nbr = tape.gather_last_axis(points, nb)?;
        let ctr = tape.repeat_last_axis(points, nb.k())?;
        Ok((tape.sub(nbr, ctr)?, ctr))
    };
    let (r1, c1) = rel_ctr(tape, &idx.local)?;
    let f1 = tape.concat(&[r1, c1], 1)?;
    let (r2, c2) = rel_ctr(tape, &idx.branch)?;
    let u2 = tape.normalize_axis(r2, 1, eps)?;
    let f2 = tape.concat(&[r2, u2, c2], 1)?;
    let (r3, c3) = rel_ctr(tape, &idx.canopy)?;
    let d3 = tape.l2_norm_axis(r3, 1)?;
    let f3 = tape.concat(&[r3, c3, d3], 1)?;
    Ok([f1, f2, f3])
}

/// Materialized scale features, mainly for inspection and tests.
#[derive(Clone, Debug)]
pub struct ScaleFeatures<S = f32> {
    pub f1: Tensor<S>,
    pub f2: Tensor<S>,
    pub f3: Tensor<S>,
}

pub fn build_scale_features<S: Real>(points: &Tensor<S>, idx: &NeighborIndexSet, eps: f64) -> Result<ScaleFeatures<S>> {
    if eps <= 0.0 {
        return Err(Error::config(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let p = tape.constant(points.clone());
    let [f1, f2, f3] = scale_features(&mut tape, p, idx, eps)?;
    Ok(ScaleFeatures { f1: tape.value(f1).clone(), f2: tape.value(f2).clone(), f3: tape.value(f3).clone() })
}

/// `U(−1/√fan_in, 1/√fan_in)` initialization.
pub(crate) fn uniform_init<S: Real>(shape: Vec<usize>, fan_in: usize, rng: &mut dyn rand::RngCore) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| S::lit(rng.random_range(-bound..bound)))
}

/// Batch norm parameters plus running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm<S = f32> {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: BatchNormState<S>,
}

impl<S: Real> BatchNorm<S> {
    pub fn new(store: &mut ParamStore<S>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            name: name.to_string(),
            gamma: store.register(format!("{name}.gamma"), Tensor::full(vec![channels], S::one()))?,
            beta: store.register(format!("{name}.beta"), Tensor::zeros(vec![channels]))?,
            state: BatchNormState::new(channels),
        })
    }

    pub fn forward(&mut self, tape: &mut Tape<S>, params: &[Var], x: Var, training: bool) -> Result<Var> {
        tape.batch_norm(x, params[self.gamma.index()], params[self.beta.index()], &mut self.state, training)
    }
}

/// Dynamic-graph edge convolution: k-NN recomputed on the input features,
/// edge MLP on `[x_i, x_j − x_i]`, batch norm, leaky ReLU, max over neighbors.
#[derive(Clone, Debug)]
pub struct EdgeConv<S = f32> {
    pub weight: ParamId,
    pub bn: BatchNorm<S>,
    pub k: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl<S: Real> EdgeConv<S> {
    pub fn new(
        store: &mut ParamStore<S>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        k: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Self> {
        let weight = store.register(
            format!("{name}.weight"),
            uniform_init(vec![out_channels, 2 * in_channels], 2 * in_channels, rng),
        )?;
        Ok(EdgeConv { weight, bn: BatchNorm::new(store, &format!("{name}.bn"), out_channels)?, k, in_channels, out_channels })
    }

    fn check(&self, tape: &Tape<S>, x: Var) -> Result<()> {
        let s = tape.shape(x);
        if s.len() != 3 || s[1] != self.in_channels {
            return Err(Error::shape(format!("edgeconv expects [B, {}, N], got {s:?}", self.in_channels)));
        }
        if self.k > s[2] {
            return Err(Error::contract(format!("edgeconv k = {} exceeds {} points", self.k, s[2])));
        }
        Ok(())
    }

    /// Fused path: `W·[x_i, x_j − x_i] = (W_a − W_b)·x_i + W_b·x_j`, so the
    /// two halves are applied per point and combined inside the aggregation kernel.
    pub fn forward(&mut self, tape: &mut Tape<S>, params: &[Var], x: Var, training: bool, slope: S) -> Result<Var> {
        self.check(tape, x)?;
        let idx = knn(tape.value(x), self.k)?;
        self.forward_with(tape, params, x, &idx, training, slope)
    }

    pub fn forward_with(
        &mut self,
        tape: &mut Tape<S>,
        params: &[Var],
        x: Var,
        idx: &NeighborIndices,
        training: bool,
        slope: S,
    ) -> Result<Var> {
        let w = params[self.weight.index()];
        let c = self.in_channels;
        let w_self = tape.slice_axis(w, 1, 0, c)?;
        let w_nbr = tape.slice_axis(w, 1, c, c)?;
        let w_ctr = tape.sub(w_self, w_nbr)?;
        let center = tape.pointwise_conv(x, w_ctr)?;
        let nbr = tape.pointwise_conv(x, w_nbr)?;
        let (g, b) = (params[self.bn.gamma.index()], params[self.bn.beta.index()]);
        tape.edge_sum_bn_lrelu_max(center, nbr, idx, g, b, &mut self.bn.state, training, slope)
    }

    /// Unfused composition of generic primitives; same values and gradients.
    pub fn forward_reference(
        &mut self,
        tape: &mut Tape<S>,
        params: &[Var],
        x: Var,
        training: bool,
        slope: S,
    ) -> Result<Var> {
        self.check(tape, x)?;
        let idx = knn(tape.value(x), self.k)?;
        let e = edge_features(tape, x, &idx)?;
        let h = tape.pointwise_conv(e, params[self.weight.index()])?;
        let h = self.bn.forward(tape, params, h, training)?;
        let h = tape.leaky_relu(h, slope)?;
        tape.max_over_axis(h, 3)
    }
}

/// `[x_i, x_j − x_i]` stacked on the channel axis: `[B, 2C, N, k]`.
pub fn edge_features<S: Real>(tape: &mut Tape<S>, x: Var, idx: &NeighborIndices) -> Result<Var> {
    let nbr = tape.gather_last_axis(x, idx)?;
    let ctr = tape.repeat_last_axis(x, idx.k())?;
    let rel = tape.sub(nbr, ctr)?;
    tape.concat(&[ctr, rel], 1)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rank(a: &(f64, u32), b: &(f64, u32)) -> std::cmp::Ordering {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
    }

    fn cloud(b: usize, d: usize, n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![b, d, n], |_| rng.random_range(-1.0..1.0))
    }

    fn line(xs: &[f64]) -> Tensor<f64> {
        let n = xs.len();
        Tensor::from_fn(vec![1, 3, n], |e| if e < n { xs[e] } else { 0.0 })
    }

    #[test]
    fn collinear_neighbors() {
        let idx = knn(&line(&[0.0, 1.0, 2.0, 4.0]), 2).unwrap();
        assert_eq!(idx.row(0, 0), &[0, 1]);
        assert_eq!(idx.row(0, 3), &[3, 2]);
        let one = knn(&cloud(2, 5, 9, 1), 1).unwrap();
        for b in 0..2 {
            for i in 0..9 {
                assert_eq!(one.row(b, i), &[i as u32]);
            }
        }
        assert!(knn(&line(&[0.0, 1.0]), 3).is_err());
    }

    #[test]
    fn self_leads_even_among_duplicates() {
        let idx = knn(&line(&[0.0, 0.0, 0.0, 5.0]), 3).unwrap();
        assert_eq!(idx.row(0, 2), &[2, 0, 1]);
    }

    #[test]
    fn gram_and_direct_paths_agree() {
        let x = cloud(2, 12, 40, 3);
        let gram = knn(&x, 7).unwrap();
        for b in 0..2 {
            for i in 0..40 {
                let mut all: Vec<(f64, u32)> = (0..40)
                    .filter(|&j| j != i)
                    .map(|j| ((0..12).map(|c| (x.at(&[b, c, i]) - x.at(&[b, c, j])).powi(2)).sum(), j as u32))
                    .collect();
                all.sort_by(rank);
                let want: Vec<u32> = std::iter::once(i as u32).chain(all.iter().take(6).map(|p| p.1)).collect();
                assert_eq!(gram.row(b, i), want.as_slice());
            }
        }
    }

    #[test]
    fn equal_scales_give_identical_sets() {
        let s = knn_multiscale(&cloud(1, 3, 30, 2), ScaleTriple::uniform(6)).unwrap();
        assert_eq!(s.local, s.branch);
        assert_eq!(s.branch, s.canopy);
    }

    #[test]
    fn triples_are_gated() {
        assert!(ScaleTriple::new(5, 20, 50).is_ok());
        assert!(ScaleTriple::new(20, 20, 50).is_err());
        assert!(ScaleTriple::new(0, 2, 3).is_err());
        assert_eq!("(5,20,30)".parse::<ScaleTriple>().unwrap(), ScaleTriple::new(5, 20, 30).unwrap());
        assert!("5,20".parse::<ScaleTriple>().is_err());
        assert!(knn_multiscale(&cloud(1, 3, 10, 0), ScaleTriple::new(2, 4, 11).unwrap()).is_err());
    }

    #[test]
    fn feature_values_on_a_3_4_5_edge() {
        let mut pts = Tensor::<f64>::zeros(vec![1, 3, 4]);
        // point 1 at (3, 4, 0), others far away on z
        for (c, v) in [3.0, 4.0, 0.0].into_iter().enumerate() {
            pts.data_mut()[c * 4 + 1] = v;
        }
        pts.data_mut()[2 * 4 + 2] = 50.0;
        pts.data_mut()[2 * 4 + 3] = -50.0;
        let idx = knn_multiscale(&pts, ScaleTriple::new(1, 2, 3).unwrap()).unwrap();
        let f = build_scale_features(&pts, &idx, DIRECTION_EPS).unwrap();
        assert_eq!(f.f1.shape(), &[1, 6, 4, 1]);
        assert_eq!(f.f2.shape(), &[1, 9, 4, 2]);
        assert_eq!(f.f3.shape(), &[1, 7, 4, 3]);
        // self edges are all zero in the relative blocks
        for c in 0..6 {
            assert_eq!(f.f2.at(&[0, c, 0, 0]), 0.0);
        }
        assert_eq!(f.f3.at(&[0, 6, 0, 0]), 0.0);
        // second neighbor of point 0 is point 1
        let got: Vec<f64> = (0..9).map(|c| f.f2.at(&[0, c, 0, 1])).collect();
        let want = [3.0, 4.0, 0.0, 0.6, 0.8, 0.0, 0.0, 0.0, 0.0];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-7, "{got:?}");
        }
        assert!((f.f3.at(&[0, 6, 0, 1]) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn translation_only_moves_center_channels() {
        let pts = cloud(1, 3, 20, 5);
        let mut moved = pts.clone();
        for c in 0..3 {
            for i in 0..20 {
                moved.data_mut()[c * 20 + i] += [1.5, -2.0, 0.25][c];
            }
        }
        let scales = ScaleTriple::new(2, 5, 9).unwrap();
        let idx = knn_multiscale(&pts, scales).unwrap();
        assert_eq!(idx, knn_multiscale(&moved, scales).unwrap());
        let a = build_scale_features(&pts, &idx, DIRECTION_EPS).unwrap();
        let b = build_scale_features(&moved, &idx, DIRECTION_EPS).unwrap();
        let same = |x: &Tensor<f64>, y: &Tensor<f64>, chans: &[usize]| {
            let k = x.dim(3);
            for &c in chans {
                for e in 0..20 * k {
                    let (u, v) = (x.data()[c * 20 * k + e], y.data()[c * 20 * k + e]);
                    assert!((u - v).abs() < 1e-12);
                }
            }
        };
        same(&a.f1, &b.f1, &[0, 1, 2]);
        same(&a.f2, &b.f2, &[0, 1, 2, 3, 4, 5]);
        same(&a.f3, &b.f3, &[0, 1, 2, 6]);
    }

    #[test]
    fn max_relative_displacement_is_non_positive_at_a_peak() {
        // single channel, h(x_i, x_j) = x_j − x_i
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(vec![1, 1, 4], vec![9.0, 1.0, 2.0, 3.0]).unwrap());
        let idx = knn(t.value(x), 3).unwrap();
        let e = edge_features(&mut t, x, &idx).unwrap();
        let w = t.constant(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap());
        let h = t.pointwise_conv(e, w).unwrap();
        let m = t.max_over_axis(h, 3).unwrap();
        assert!(t.value(m).data()[0] <= 0.0);
    }

    #[test]
    fn fused_edgeconv_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::<f64>::new();
        let mut layer = EdgeConv::new(&mut store, "ec", 4, 5, 3, &mut rng).unwrap();
        let mut twin = layer.clone();
        let x = cloud(2, 4, 12, 9);
        let mut results = Vec::new();
        for fused in [true, false] {
            let mut t = Tape::new();
            let params = store.bind(&mut t, true);
            let xv = t.leaf(x.clone());
            let l = if fused { &mut layer } else { &mut twin };
            let y = if fused {
                l.forward(&mut t, &params, xv, true, 0.2).unwrap()
            } else {
                l.forward_reference(&mut t, &params, xv, true, 0.2).unwrap()
            };
            assert_eq!(t.shape(y), &[2, 5, 12]);
            let out = t.value(y).clone();
            let s = t.sum_all(y).unwrap();
            t.backward(s).unwrap();
            let mut grads = store.collect_grads(&mut t, &params);
            grads.push(t.grad(xv).unwrap().to_vec());
            results.push((out, grads));
        }
        for (a, b) in results[0].0.data().iter().zip(results[1].0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (ga, gb) in results[0].1.iter().zip(&results[1].1) {
            for (a, b) in ga.iter().zip(gb) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
        let (sa, sb) = (&layer.bn.state, &twin.bn.state);
        for (a, b) in sa.running_mean.iter().chain(&sa.running_var).zip(sb.running_mean.iter().chain(&sb.running_var)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
