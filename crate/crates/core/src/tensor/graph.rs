use std::cell::RefCell;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gemm, Gradients, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Consecutive row ranges, one per sequence, for ops over ragged batches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Groups {
    offsets: Vec<usize>,
}

impl Groups {
    pub fn from_lengths(lengths: &[usize]) -> Result<Self> {
        if lengths.iter().any(|&l| l == 0) {
            return Err(Error::Invalid("empty sequence in batch".into()));
        }
        let mut offsets = Vec::with_capacity(lengths.len() + 1);
        offsets.push(0);
        for &l in lengths {
            offsets.push(offsets.last().unwrap() + l);
        }
        Ok(Self { offsets })
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, g: usize) -> Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }

    pub fn lengths(&self) -> impl Iterator<Item = usize> + '_ {
        self.offsets.windows(2).map(|w| w[1] - w[0])
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Output columns whose input column `ow·stride + kj − pad` lies inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > kj { (self.pad - kj).div_ceil(s) } else { 0 }.min(self.wo);
        let hi = if self.w + self.pad > kj {
            ((self.w - 1 + self.pad - kj) / s + 1).min(self.wo)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn chunk(&self) -> usize {
        const COL_LIMIT: usize = 1 << 21;
        (COL_LIMIT / (self.ckk() * self.ho * self.wo).max(1)).clamp(1, self.n.max(1))
    }
}

enum Data<T> {
    Owned(Vec<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        x: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax {
        x: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        groups: Groups,
        probs: Vec<T>,
        scale: T,
    },
    GroupSoftmax {
        x: usize,
        groups: Groups,
    },
    GroupWeightedSum {
        x: usize,
        w: usize,
        groups: Groups,
    },
    Dropout {
        x: usize,
        mask: Vec<T>,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: T,
    },
    Mse {
        pred: usize,
        target: usize,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    len: usize,
    data: Data<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of operations for one forward pass.
///
/// In training mode batch norm uses batch statistics and queues running
/// statistic updates (see [`Graph::take_buffer_updates`]) and dropout is
/// active. In evaluation mode both are deterministic.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    train: bool,
    rng: ChaCha8Rng,
    buffer_updates: Vec<BatchStats>,
    // conv2d im2col, gradient-column and output staging buffers, reused across calls
    scratch: RefCell<[Vec<T>; 3]>,
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl BatchStats {
    /// `running ← (1 − momentum)·running + momentum·batch`
    pub fn apply<T: Scalar>(&self, params: &mut ParamStore<T>) {
        let m = self.momentum;
        for (id, batch) in [(self.running_mean, &self.mean), (self.running_var, &self.var)] {
            for (r, &b) in params.get_mut(id).data.iter_mut().zip(batch) {
                *r = T::from_f64((1.0 - m) * r.as_f64() + m * b);
            }
        }
    }
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let d = *shape.last().unwrap_or(&1);
    let n: usize = shape.iter().product();
    (if d == 0 { 0 } else { n / d }, d)
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// dx = y ⊙ (dy − Σ dy⊙y)
fn softmax_backward<T: Scalar>(y: &[T], gy: &[T], gx: &mut [T]) {
    let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
    for i in 0..y.len() {
        gx[i] += y[i] * (gy[i] - dot);
    }
}

// Contents are stale; callers overwrite every element they read.
fn sized<T: Scalar>(v: &mut Vec<T>, len: usize) {
    if v.len() < len {
        v.resize(len, T::zero());
    }
}

fn slot<'a, T: Scalar>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    j: usize,
) -> Option<&'a mut [T]> {
    if !nodes[j].requires_grad {
        return None;
    }
    let len = nodes[j].len;
    Some(grads[j].get_or_insert_with(|| vec![T::zero(); len]))
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, n0: usize, nb: usize, col: &mut [T]) {
    let cols = nb * g.ho * g.wo;
    let hw = g.h * g.w;
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                let (ow_lo, ow_hi) = g.valid_cols(kj);
                for b in 0..nb {
                    let xs = &x[((n0 + b) * g.c + c) * hw..][..hw];
                    for oh in 0..g.ho {
                        let d = &mut dst[(b * g.ho + oh) * g.wo..][..g.wo];
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            d.fill(T::zero());
                            continue;
                        }
                        let base = ih as usize * g.w + kj;
                        if g.stride == 1 {
                            // rows are short in the deep layers, so a select loop beats
                            // separate fill and copy calls
                            let r = &xs[ih as usize * g.w..][..g.w];
                            for (ow, v) in d.iter_mut().enumerate() {
                                let iw = (ow + kj).wrapping_sub(g.pad);
                                *v = if iw < g.w { r[iw] } else { T::zero() };
                            }
                        } else {
                            d[..ow_lo].fill(T::zero());
                            d[ow_hi..].fill(T::zero());
                            for ow in ow_lo..ow_hi {
                                d[ow] = xs[base + ow * g.stride - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeom, n0: usize, nb: usize, dx: &mut [T]) {
    let cols = nb * g.ho * g.wo;
    let hw = g.h * g.w;
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                let (ow_lo, ow_hi) = g.valid_cols(kj);
                for b in 0..nb {
                    let xs = &mut dx[((n0 + b) * g.c + c) * hw..][..hw];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let s = &src[(b * g.ho + oh) * g.wo..][..g.wo];
                        let base = ih as usize * g.w + kj;
                        if g.stride == 1 {
                            let dst = &mut xs[base + ow_lo - g.pad..base + ow_hi - g.pad];
                            for (d, &v) in dst.iter_mut().zip(&s[ow_lo..ow_hi]) {
                                *d += v;
                            }
                        } else {
                            for ow in ow_lo..ow_hi {
                                xs[base + ow * g.stride - g.pad] += s[ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>, train: bool, seed: u64) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            buffer_updates: Vec::new(),
            scratch: RefCell::new([Vec::new(), Vec::new(), Vec::new()]),
        }
    }

    /// Drops the tape but keeps scratch buffers for the next pass.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.buffer_updates.clear();
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        self.val(id.0)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn tensor(&self, id: NodeId) -> Tensor<T> {
        Tensor {
            shape: self.nodes[id.0].shape.clone(),
            data: self.val(id.0).to_vec(),
        }
    }

    /// Hash of every ReLU sign pattern and max-pool selection on the tape.
    ///
    /// The loss is smooth between two parameter settings with equal
    /// signatures, which finite-difference checks rely on.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for n in &self.nodes {
            match &n.op {
                Op::Relu { x } => {
                    for v in self.val(*x) {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Statistics from every training-mode batch norm, in execution order.
    pub fn take_buffer_updates(&mut self) -> Vec<BatchStats> {
        std::mem::take(&mut self.buffer_updates)
    }

    fn val(&self, i: usize) -> &[T] {
        match &self.nodes[i].data {
            Data::Owned(v) => v,
            Data::Param(p) => &self.params.get(*p).data,
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        let len = data.len();
        debug_assert_eq!(len, shape.iter().product::<usize>());
        self.nodes.push(Node {
            shape,
            len,
            data: Data::Owned(data),
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let entry = self.params.entry(id);
        self.nodes.push(Node {
            shape: entry.tensor.shape.clone(),
            len: entry.tensor.len(),
            data: Data::Param(id),
            op: Op::Param(id),
            requires_grad: entry.trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// `x (R, in) · w (in, out) + b (out)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape("linear", &xs, &ws));
        }
        let (r, din, dout) = (xs[0], xs[1], ws[1]);
        let mut y = vec![T::zero(); r * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != dout {
                return Err(Error::shape("linear bias", &ws, self.shape(b)));
            }
            for row in y.chunks_mut(dout) {
                row.copy_from_slice(bv);
            }
        }
        gemm(r, din, dout, T::one(), self.value(x), (din, 1), self.value(w), (dout, 1), T::one(), &mut y, (dout, 1));
        let mut ids = vec![x.0, w.0];
        ids.extend(b.map(|b| b.0));
        let rg = self.rg(&ids);
        Ok(self.push(vec![r, dout], y, Op::Linear { x: x.0, w: w.0, b: b.map(|b| b.0) }, rg))
    }

    /// Convolution of `x (N, C, H, W)` with `w (O, C, k, k)`, zero padding `pad`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let k = ws[2];
        if stride == 0 || xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            k,
            stride,
            pad,
            ho: (xs[2] + 2 * pad - k) / stride + 1,
            wo: (xs[3] + 2 * pad - k) / stride + 1,
        };
        if let Some(b) = b {
            if self.shape(b).iter().product::<usize>() != geom.o {
                return Err(Error::shape("conv2d bias", &ws, self.shape(b)));
            }
        }
        let hw = geom.ho * geom.wo;
        let ckk = geom.ckk();
        let chunk = geom.chunk();
        let mut y = Vec::with_capacity(geom.n * geom.o * hw);
        let mut scratch = self.scratch.borrow_mut();
        let [col, _, buf] = &mut *scratch;
        sized(col, ckk * chunk * hw);
        sized(buf, geom.o * chunk * hw);
        let (xv, wv) = (self.value(x), self.value(w));
        let bias = b.map(|b| self.value(b));
        let mut n0 = 0;
        while n0 < geom.n {
            let nb = chunk.min(geom.n - n0);
            let cols = nb * hw;
            im2col(xv, &geom, n0, nb, col);
            gemm(geom.o, ckk, cols, T::one(), wv, (ckk, 1), col, (cols, 1), T::zero(), buf, (cols, 1));
            for bi in 0..nb {
                for o in 0..geom.o {
                    let src = &buf[o * cols + bi * hw..][..hw];
                    match bias {
                        Some(b) => y.extend(src.iter().map(|&s| s + b[o])),
                        None => y.extend_from_slice(src),
                    }
                }
            }
            n0 += nb;
        }
        drop(scratch);
        let mut ids = vec![x.0, w.0];
        ids.extend(b.map(|b| b.0));
        let rg = self.rg(&ids);
        Ok(self.push(
            vec![geom.n, geom.o, geom.ho, geom.wo],
            y,
            Op::Conv2d { x: x.0, w: w.0, b: b.map(|b| b.0), geom },
            rg,
        ))
    }

    /// Per-channel normalisation over all axes except axis 1.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: ParamId,
        running_var: ParamId,
        momentum: f64,
        eps: f64,
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape("batch_norm", &xs, self.shape(gamma)));
        }
        let (n, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        for p in [gamma, beta] {
            if self.value(p).len() != c {
                return Err(Error::shape("batch_norm", &xs, self.shape(p)));
            }
        }
        let m = n * inner;
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        let batch_stats = self.train;
        if batch_stats {
            if m == 0 {
                return Err(Error::Empty("batch_norm over empty batch".into()));
            }
            for ni in 0..n {
                for ci in 0..c {
                    let s = &xv[(ni * c + ci) * inner..][..inner];
                    mean[ci] += s.iter().map(|v| v.as_f64()).sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            for ni in 0..n {
                for ci in 0..c {
                    let s = &xv[(ni * c + ci) * inner..][..inner];
                    var[ci] += s.iter().map(|v| (v.as_f64() - mean[ci]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= m as f64);
        } else {
            let rm = &self.params.get(running_mean).data;
            let rv = &self.params.get(running_var).data;
            for ci in 0..c {
                mean[ci] = rm[ci].as_f64();
                var[ci] = rv[ci].as_f64();
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut y = vec![T::zero(); xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * inner;
                let mu = T::from_f64(mean[ci]);
                for j in off..off + inner {
                    xhat[j] = (xv[j] - mu) * inv_std[ci];
                    y[j] = gv[ci] * xhat[j] + bv[ci];
                }
            }
        }
        if batch_stats {
            let unbias = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
            self.buffer_updates.push(BatchStats {
                running_mean,
                running_var,
                mean,
                var: var.iter().map(|v| v * unbias).collect(),
                momentum,
            });
        }
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            xs,
            y,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let rg = self.rg(&[x.0]);
        self.push(self.shape(x).to_vec(), y, Op::Relu { x: x.0 }, rg)
    }

    /// 2×2 max pooling with stride 2 over the last two axes; odd edges are dropped.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(Error::shape("max_pool2", &xs, &[2, 2]));
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x);
        let mut y = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = base + 2 * oh * w + 2 * ow;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oh + di) * w + 2 * ow + dj;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    y.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(vec![xs[0], xs[1], ho, wo], y, Op::MaxPool { x: x.0, argmax }, rg))
    }

    /// `(N, C, H, W) → (N, C)` mean over the spatial axes.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool", &xs, &[4]));
        }
        let hw = xs[2] * xs[3];
        let inv = T::from_f64(1.0 / hw as f64);
        let y = self.value(x).chunks(hw).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        let rg = self.rg(&[x.0]);
        Ok(self.push(vec![xs[0], xs[1]], y, Op::GlobalAvgPool { x: x.0 }, rg))
    }

    /// Normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let (r, d) = rows_of(&xs);
        for p in [gamma, beta] {
            if self.value(p).len() != d {
                return Err(Error::shape("layer_norm", &xs, self.shape(p)));
            }
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); xv.len()];
        let mut y = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let is = T::from_f64(1.0 / (var + eps).sqrt());
            let mu = T::from_f64(mean);
            for j in 0..d {
                let h = (row[j] - mu) * is;
                xhat[i * d + j] = h;
                y[i * d + j] = gv[j] * h + bv[j];
            }
            inv_std.push(is);
        }
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            xs,
            y,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let xs = self.shape(x).to_vec();
        let (_, d) = rows_of(&xs);
        let mut y = self.value(x).to_vec();
        if d > 0 {
            y.chunks_mut(d).for_each(softmax_in_place);
        }
        let rg = self.rg(&[x.0]);
        self.push(xs, y, Op::Softmax { x: x.0 }, rg)
    }

    /// Scaled dot-product attention restricted to each group of rows.
    pub fn grouped_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, groups: &Groups) -> Result<NodeId> {
        let qs = self.shape(q).to_vec();
        if qs.len() != 2 || self.shape(k) != qs.as_slice() || self.shape(v) != qs.as_slice() {
            return Err(Error::shape("attention", &qs, self.shape(k)));
        }
        if groups.total() != qs[0] {
            return Err(Error::shape("attention groups", &qs, &[groups.total()]));
        }
        let d = qs[1];
        let scale = T::from_f64(1.0 / (d as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![T::zero(); qv.len()];
        let mut probs = Vec::with_capacity(groups.lengths().map(|l| l * l).sum());
        for g in 0..groups.len() {
            let r = groups.range(g);
            let l = r.len();
            let (a, b) = (r.start * d, r.end * d);
            let start = probs.len();
            probs.resize(start + l * l, T::zero());
            let p = &mut probs[start..];
            gemm(l, d, l, scale, &qv[a..b], (d, 1), &kv[a..b], (1, d), T::zero(), p, (l, 1));
            p.chunks_mut(l).for_each(softmax_in_place);
            gemm(l, l, d, T::one(), p, (l, 1), &vv[a..b], (d, 1), T::zero(), &mut out[a..b], (d, 1));
        }
        let rg = self.rg(&[q.0, k.0, v.0]);
        Ok(self.push(
            qs,
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                groups: groups.clone(),
                probs,
                scale,
            },
            rg,
        ))
    }

    /// Softmax of a per-row score within each group.
    pub fn group_softmax(&mut self, x: NodeId, groups: &Groups) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if self.nodes[x.0].len != groups.total() {
            return Err(Error::shape("group_softmax", &xs, &[groups.total()]));
        }
        let mut y = self.value(x).to_vec();
        for g in 0..groups.len() {
            softmax_in_place(&mut y[groups.range(g)]);
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(xs, y, Op::GroupSoftmax { x: x.0, groups: groups.clone() }, rg))
    }

    /// `out[g] = Σ_{r ∈ g} w[r] · x[r]`, mapping `(R, d)` to `(G, d)`.
    pub fn group_weighted_sum(&mut self, x: NodeId, w: NodeId, groups: &Groups) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] != groups.total() || self.nodes[w.0].len != groups.total() {
            return Err(Error::shape("group_weighted_sum", &xs, self.shape(w)));
        }
        let d = xs[1];
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = vec![T::zero(); groups.len() * d];
        for g in 0..groups.len() {
            let o = &mut out[g * d..(g + 1) * d];
            for r in groups.range(g) {
                for j in 0..d {
                    o[j] += wv[r] * xv[r * d + j];
                }
            }
        }
        let rg = self.rg(&[x.0, w.0]);
        Ok(self.push(
            vec![groups.len(), d],
            out,
            Op::GroupWeightedSum {
                x: x.0,
                w: w.0,
                groups: groups.clone(),
            },
            rg,
        ))
    }

    /// Inverted dropout; the identity in evaluation mode or for `p == 0`.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> NodeId {
        if !self.train || p <= 0.0 {
            return x;
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let n = self.nodes[x.0].len;
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let y = self.value(x).iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let rg = self.rg(&[x.0]);
        self.push(self.shape(x).to_vec(), y, Op::Dropout { x: x.0, mask }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let y = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(self.shape(a).to_vec(), y, Op::Add { a: a.0, b: b.0 }, rg))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let c = T::from_f64(c);
        let y = self.value(x).iter().map(|&v| v * c).collect();
        let rg = self.rg(&[x.0]);
        self.push(self.shape(x).to_vec(), y, Op::Scale { x: x.0, c }, rg)
    }

    /// Mean squared error, a one-element node.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        if self.nodes[pred.0].len != self.nodes[target.0].len || self.nodes[pred.0].len == 0 {
            return Err(Error::shape("mse", self.shape(pred), self.shape(target)));
        }
        let n = self.nodes[pred.0].len as f64;
        let s: f64 = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(&p, &t)| (p.as_f64() - t.as_f64()).powi(2))
            .sum();
        let rg = self.rg(&[pred.0, target.0]);
        Ok(self.push(
            vec![1],
            vec![T::from_f64(s / n)],
            Op::Mse {
                pred: pred.0,
                target: target.0,
            },
            rg,
        ))
    }

    /// Reverse pass from a one-element node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.nodes[loss.0].len != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::new(self.params.len());
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !nodes[i].requires_grad {
                continue;
            }
            match &nodes[i].op {
                Op::Leaf => {}
                Op::Param(p) => out.accumulate(*p, &gy),
                Op::Linear { x, w, b } => {
                    let (r, dout) = (nodes[i].shape[0], nodes[i].shape[1]);
                    let din = nodes[*x].shape[1];
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gemm(r, dout, din, T::one(), &gy, (dout, 1), self.val(*w), (1, dout), T::one(), gx, (din, 1));
                    }
                    if let Some(gw) = slot(&mut grads, nodes, *w) {
                        gemm(din, r, dout, T::one(), self.val(*x), (1, din), &gy, (dout, 1), T::one(), gw, (dout, 1));
                    }
                    if let Some(gb) = b.and_then(|b| slot(&mut grads, nodes, b)) {
                        for row in gy.chunks(dout) {
                            gb.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                        }
                    }
                }
                Op::Conv2d { x, w, b, geom } => self.conv2d_backward(&mut grads, *x, *w, *b, geom, &gy),
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let xs = &nodes[*x].shape;
                    let (n, c) = (xs[0], xs[1]);
                    let inner: usize = xs[2..].iter().product();
                    let m = T::from_f64((n * inner) as f64);
                    let mut sum_dy = vec![T::zero(); c];
                    let mut sum_dy_xhat = vec![T::zero(); c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * inner;
                            for j in off..off + inner {
                                sum_dy[ci] += gy[j];
                                sum_dy_xhat[ci] += gy[j] * xhat[j];
                            }
                        }
                    }
                    let gv = self.val(*gamma).to_vec();
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for ni in 0..n {
                            for ci in 0..c {
                                let off = (ni * c + ci) * inner;
                                let k = gv[ci] * inv_std[ci];
                                for j in off..off + inner {
                                    gx[j] += if *batch_stats {
                                        k / m * (m * gy[j] - sum_dy[ci] - xhat[j] * sum_dy_xhat[ci])
                                    } else {
                                        k * gy[j]
                                    };
                                }
                            }
                        }
                    }
                    if let Some(gg) = slot(&mut grads, nodes, *gamma) {
                        gg.iter_mut().zip(&sum_dy_xhat).for_each(|(a, &s)| *a += s);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *beta) {
                        gb.iter_mut().zip(&sum_dy).for_each(|(a, &s)| *a += s);
                    }
                }
                Op::Relu { x } => {
                    let y = self.val(i);
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for j in 0..y.len() {
                            if y[j] > T::zero() {
                                gx[j] += gy[j];
                            }
                        }
                    }
                }
                Op::MaxPool { x, argmax } => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (&a, &g) in argmax.iter().zip(&gy) {
                            gx[a] += g;
                        }
                    }
                }
                Op::GlobalAvgPool { x } => {
                    let xs = &nodes[*x].shape;
                    let hw = xs[2] * xs[3];
                    let inv = T::from_f64(1.0 / hw as f64);
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (plane, &g) in gx.chunks_mut(hw).zip(&gy) {
                            plane.iter_mut().for_each(|v| *v += g * inv);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (r, d) = rows_of(&nodes[*x].shape);
                    let gv = self.val(*gamma).to_vec();
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let dn = T::from_f64(d as f64);
                        for ri in 0..r {
                            let row = ri * d..(ri + 1) * d;
                            let mut s1 = T::zero();
                            let mut s2 = T::zero();
                            for j in row.clone() {
                                let dxh = gy[j] * gv[j - ri * d];
                                s1 += dxh;
                                s2 += dxh * xhat[j];
                            }
                            for j in row {
                                let dxh = gy[j] * gv[j - ri * d];
                                gx[j] += inv_std[ri] / dn * (dn * dxh - s1 - xhat[j] * s2);
                            }
                        }
                    }
                    if let Some(gg) = slot(&mut grads, nodes, *gamma) {
                        for j in 0..gy.len() {
                            gg[j % d] += gy[j] * xhat[j];
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *beta) {
                        for j in 0..gy.len() {
                            gb[j % d] += gy[j];
                        }
                    }
                }
                Op::Softmax { x } => {
                    let (_, d) = rows_of(&nodes[i].shape);
                    let y = self.val(i);
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for ((yr, gr), xr) in y.chunks(d).zip(gy.chunks(d)).zip(gx.chunks_mut(d)) {
                            softmax_backward(yr, gr, xr);
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    groups,
                    probs,
                    scale,
                } => self.attention_backward(&mut grads, [*q, *k, *v], groups, probs, *scale, &gy),
                Op::GroupSoftmax { x, groups } => {
                    let y = self.val(i);
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for g in 0..groups.len() {
                            let r = groups.range(g);
                            softmax_backward(&y[r.clone()], &gy[r.clone()], &mut gx[r]);
                        }
                    }
                }
                Op::GroupWeightedSum { x, w, groups } => {
                    let d = nodes[*x].shape[1];
                    let (xv, wv) = (self.val(*x), self.val(*w));
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for g in 0..groups.len() {
                            for r in groups.range(g) {
                                for j in 0..d {
                                    gx[r * d + j] += wv[r] * gy[g * d + j];
                                }
                            }
                        }
                    }
                    if let Some(gw) = slot(&mut grads, nodes, *w) {
                        for g in 0..groups.len() {
                            for r in groups.range(g) {
                                gw[r] += (0..d).map(|j| gy[g * d + j] * xv[r * d + j]).sum::<T>();
                            }
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for j in 0..gy.len() {
                            gx[j] += gy[j] * mask[j];
                        }
                    }
                }
                Op::Add { a, b } => {
                    for j in [*a, *b] {
                        if let Some(gx) = slot(&mut grads, nodes, j) {
                            gx.iter_mut().zip(&gy).for_each(|(a, &g)| *a += g);
                        }
                    }
                }
                Op::Scale { x, c } => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.iter_mut().zip(&gy).for_each(|(a, &g)| *a += g * *c);
                    }
                }
                Op::Mse { pred, target } => {
                    let n = T::from_f64(nodes[*pred].len as f64);
                    let two = T::from_f64(2.0) * gy[0] / n;
                    let (pv, tv) = (self.val(*pred), self.val(*target));
                    if let Some(gp) = slot(&mut grads, nodes, *pred) {
                        for j in 0..pv.len() {
                            gp[j] += two * (pv[j] - tv[j]);
                        }
                    }
                    if let Some(gt) = slot(&mut grads, nodes, *target) {
                        for j in 0..pv.len() {
                            gt[j] -= two * (pv[j] - tv[j]);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn conv2d_backward(
        &self,
        grads: &mut [Option<Vec<T>>],
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: &ConvGeom,
        gy: &[T],
    ) {
        let nodes = &self.nodes;
        let hw = geom.ho * geom.wo;
        let ckk = geom.ckk();
        let chunk = geom.chunk();
        let (xv, wv) = (self.val(x), self.val(w));
        let need_x = nodes[x].requires_grad;
        let need_w = nodes[w].requires_grad;
        let mut scratch = self.scratch.borrow_mut();
        let [col, dcol, buf] = &mut *scratch;
        sized(col, if need_w { ckk * chunk * hw } else { 0 });
        sized(dcol, if need_x { ckk * chunk * hw } else { 0 });
        sized(buf, geom.o * chunk * hw);
        let mut n0 = 0;
        while n0 < geom.n {
            let nb = chunk.min(geom.n - n0);
            let cols = nb * hw;
            for bi in 0..nb {
                for o in 0..geom.o {
                    buf[o * cols + bi * hw..][..hw].copy_from_slice(&gy[((n0 + bi) * geom.o + o) * hw..][..hw]);
                }
            }
            if let Some(gb) = b.and_then(|b| slot(grads, nodes, b)) {
                for o in 0..geom.o {
                    gb[o] += buf[o * cols..(o + 1) * cols].iter().copied().sum::<T>();
                }
            }
            if need_w {
                im2col(xv, geom, n0, nb, col);
                let gw = slot(grads, nodes, w).unwrap();
                gemm(geom.o, cols, ckk, T::one(), buf, (cols, 1), col, (1, cols), T::one(), gw, (ckk, 1));
            }
            if need_x {
                gemm(ckk, geom.o, cols, T::one(), wv, (1, ckk), buf, (cols, 1), T::zero(), dcol, (cols, 1));
                let gx = slot(grads, nodes, x).unwrap();
                col2im_add(dcol, geom, n0, nb, gx);
            }
            n0 += nb;
        }
    }

    fn attention_backward(
        &self,
        grads: &mut [Option<Vec<T>>],
        [q, k, v]: [usize; 3],
        groups: &Groups,
        probs: &[T],
        scale: T,
        gy: &[T],
    ) {
        let nodes = &self.nodes;
        let d = nodes[q].shape[1];
        let (qv, kv, vv) = (self.val(q), self.val(k), self.val(v));
        let n = qv.len();
        let mut dq = vec![T::zero(); n];
        let mut dk = vec![T::zero(); n];
        let mut dv = vec![T::zero(); n];
        let mut p_off = 0;
        for g in 0..groups.len() {
            let r = groups.range(g);
            let l = r.len();
            let (a, b) = (r.start * d, r.end * d);
            let p = &probs[p_off..p_off + l * l];
            p_off += l * l;
            let go = &gy[a..b];
            let mut dp = vec![T::zero(); l * l];
            gemm(l, d, l, T::one(), go, (d, 1), &vv[a..b], (1, d), T::zero(), &mut dp, (l, 1));
            gemm(l, l, d, T::one(), p, (1, l), go, (d, 1), T::one(), &mut dv[a..b], (d, 1));
            let mut ds = vec![T::zero(); l * l];
            for row in 0..l {
                let s = row * l..(row + 1) * l;
                softmax_backward(&p[s.clone()], &dp[s.clone()], &mut ds[s]);
            }
            gemm(l, l, d, scale, &ds, (l, 1), &kv[a..b], (d, 1), T::one(), &mut dq[a..b], (d, 1));
            gemm(l, l, d, scale, &ds, (1, l), &qv[a..b], (d, 1), T::one(), &mut dk[a..b], (d, 1));
        }
        for (j, g) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(gx) = slot(grads, nodes, j) {
                gx.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
            }
        }
    }
}
