//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are either
//! trainable (`param`) or constant; every op records what it needs for the
//! backward sweep. Ops are restricted to what the backbone, generators,
//! discriminators and losses use.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dOpts {
    pub fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            pad: kernel / 2,
        }
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    WeightedSum(Vec<(Var, T)>),
    Relu(Var),
    LeakyRelu(Var, T),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        opts: Conv2dOpts,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    /// Output element i copies input element index[i].
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    InstanceNorm {
        x: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Reshape(Var),
    ConcatChannels(Var, Var),
    Gram(Var),
    MeanBatch(Var),
    MeanAbsDiff(Var, Var),
    MeanSqToTarget(Var, T),
    BceWithLogits(Var, T),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    CosineDistance(Var, Var),
    RowKl {
        gen: Var,
        target: Var,
        eps: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    opts: Conv2dOpts,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let hw = ho * wo;
    let pad = opts.pad as isize;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * opts.stride + ky) as isize - pad;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * opts.stride + kx) as isize - pad;
                        *o = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    opts: Conv2dOpts,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let hw = ho * wo;
    let pad = opts.pad as isize;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * opts.stride + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * opts.stride + kx) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_out(size: usize, k: usize, opts: Conv2dOpts) -> Option<usize> {
    let padded = size + 2 * opts.pad;
    if padded < k || opts.stride == 0 {
        return None;
    }
    Some((padded - k) / opts.stride + 1)
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow.
fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let t = Tensor::from_vec(self.shape(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x - *y)
            .collect();
        let t = Tensor::from_vec(self.shape(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// `Σ wᵢ·xᵢ` over same-shaped inputs (typically scalar loss terms).
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| shape_err("weighted_sum of nothing".into()))?;
        let shape = self.shape(first).to_vec();
        let mut out = Tensor::zeros(&shape);
        let mut rg = false;
        for &(v, w) in terms {
            if self.shape(v) != shape.as_slice() {
                return Err(shape_err(format!(
                    "weighted_sum: {:?} vs {:?}",
                    self.shape(v),
                    shape
                )));
            }
            rg |= self.rg(v);
            for (o, x) in out.data_mut().iter_mut().zip(self.value(v).data()) {
                *o += w * *x;
            }
        }
        Ok(self.push(out, Op::WeightedSum(terms.to_vec()), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let t = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x * slope });
        let rg = self.rg(a);
        self.push(t, Op::LeakyRelu(a, slope), rg)
    }

    /// Cross-correlation of `x` (N,C,H,W) with `w` (O,C,K,K) plus optional
    /// per-output-channel bias, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, opts: Conv2dOpts) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, ci, k, k2) = self.value(w).dims4()?;
        if ci != c || k != k2 {
            return Err(shape_err(format!(
                "conv2d: input {:?} vs weight {:?}",
                self.shape(x),
                self.shape(w)
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape_err(format!("conv2d bias {:?}", self.shape(b))));
            }
        }
        let (ho, wo) = match (conv_out(h, k, opts), conv_out(wd, k, opts)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(shape_err(format!(
                    "conv2d: kernel {k} does not fit {h}x{wd}"
                )))
            }
        };
        let ckk = c * k * k;
        let hw = ho * wo;
        let mut cols = vec![T::zero(); ckk * hw];
        let mut out = vec![T::zero(); n * o * hw];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for s in 0..n {
            im2col(&xv[s * c * h * wd..(s + 1) * c * h * wd], c, h, wd, k, opts, ho, wo, &mut cols);
            T::gemm(o, ckk, hw, wv, false, &cols, false, &mut out[s * o * hw..(s + 1) * o * hw], false);
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for s in 0..n {
                for oc in 0..o {
                    let bias = bv[oc];
                    for y in &mut out[(s * o + oc) * hw..(s * o + oc + 1) * hw] {
                        *y += bias;
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[n, o, ho, wo], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::Conv2d { x, w, b, opts }, rg))
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(shape_err(format!("max_pool2 on {h}x{w}")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    argmax.push(best);
                    out.push(xv[best]);
                }
            }
        }
        let t = Tensor::from_vec(&[n, c, ho, wo], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let xv = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for p in 0..n * c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[p * h2 * w2 + y * w2 + xx] = xv[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::from_vec(&[n, c, h2, w2], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Upsample2(x), rg))
    }

    /// Mirror padding by `pad` on each spatial side (edge not repeated).
    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if pad == 0 {
            return Ok(x);
        }
        if pad >= h || pad >= w {
            return Err(shape_err(format!("reflect pad {pad} on {h}x{w}")));
        }
        let mirror = |i: isize, len: usize| -> usize {
            let len = len as isize;
            let r = if i < 0 { -i } else if i >= len { 2 * (len - 1) - i } else { i };
            r as usize
        };
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let mut index = Vec::with_capacity(n * c * hp * wp);
        for plane in 0..n * c {
            for y in 0..hp {
                let sy = mirror(y as isize - pad as isize, h);
                for xx in 0..wp {
                    let sx = mirror(xx as isize - pad as isize, w);
                    index.push(plane * h * w + sy * w + sx);
                }
            }
        }
        let xv = self.value(x).data();
        let out: Vec<T> = index.iter().map(|&i| xv[i]).collect();
        let t = Tensor::from_vec(&[n, c, hp, wp], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Gather { x, index }, rg))
    }

    /// Per-sample, per-channel normalization to zero mean and unit variance.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let hw_t = T::from_usize(hw).unwrap();
        let xv = self.value(x).data();
        let mut xhat = vec![T::zero(); n * c * hw];
        let mut inv_std = Vec::with_capacity(n * c);
        for p in 0..n * c {
            let plane = &xv[p * hw..(p + 1) * hw];
            let mean = plane.iter().copied().sum::<T>() / hw_t;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / hw_t;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (o, &v) in xhat[p * hw..(p + 1) * hw].iter_mut().zip(plane) {
                *o = (v - mean) * is;
            }
        }
        let t = Tensor::from_vec(&[n, c, h, w], xhat.clone())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::InstanceNorm { x, xhat, inv_std }, rg))
    }

    /// (N,C,H,W) → (N,C) spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).unwrap();
        let xv = self.value(x).data();
        let out = (0..n * c)
            .map(|p| xv[p * hw..(p + 1) * hw].iter().copied().sum::<T>() * inv)
            .collect();
        let t = Tensor::from_vec(&[n, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::GlobalAvgPool(x), rg))
    }

    /// `x` (N,I) times `wᵀ` for `w` (O,I), plus optional bias (O).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err(format!("linear: {xs:?} x {ws:?}")));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * o];
        T::gemm(n, i, o, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape_err(format!("linear bias {:?}", self.shape(b))));
            }
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                for (y, bb) in row.iter_mut().zip(bv) {
                    *y += *bb;
                }
            }
        }
        let t = Tensor::from_vec(&[n, o], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(shape_err(format!(
                "concat_channels: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let hw = h * w;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            out.extend_from_slice(&av[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&bv[s * cb * hw..(s + 1) * cb * hw]);
        }
        let t = Tensor::from_vec(&[n, ca + cb, h, w], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::ConcatChannels(a, b), rg))
    }

    /// Per-sample channel Gram matrix: (N,C,H,W) → (N,C,C) with entry
    /// (i,j) the inner product of channel maps i and j.
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * c];
        for s in 0..n {
            let f = &xv[s * c * hw..(s + 1) * c * hw];
            T::gemm(c, hw, c, f, false, f, true, &mut out[s * c * c..(s + 1) * c * c], false);
            // gemm need not return an exactly symmetric product
            let g = &mut out[s * c * c..(s + 1) * c * c];
            for i in 0..c {
                for j in i + 1..c {
                    g[j * c + i] = g[i * c + j];
                }
            }
        }
        let t = Tensor::from_vec(&[n, c, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Gram(x), rg))
    }

    /// Mean over the leading axis: (N, ...) → (...).
    pub fn mean_batch(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .first()
            .ok_or_else(|| shape_err("mean_batch on scalar".into()))?;
        let per = self.value(x).len() / n.max(1);
        let inv = T::one() / T::from_usize(n).unwrap();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); per];
        for s in 0..n {
            for (o, v) in out.iter_mut().zip(&xv[s * per..(s + 1) * per]) {
                *o += *v;
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
        let t = Tensor::from_vec(&shape[1..], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MeanBatch(x), rg))
    }

    fn broadcast_ok(&self, a: Var, b: Var) -> bool {
        let (sa, sb) = (self.shape(a), self.shape(b));
        sa == sb || (sa.len() > sb.len() && sa[sa.len() - sb.len()..] == *sb)
    }

    /// `mean |a − b|` as a scalar. `b` may omit leading axes of `a`, in
    /// which case it is broadcast over them.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        if !self.broadcast_ok(a, b) {
            return Err(shape_err(format!(
                "mean_abs_diff: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let bv = self.value(b).data();
        let per = bv.len();
        let sum: T = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| (*x - bv[i % per]).abs())
            .sum();
        let t = Tensor::scalar(sum / T::from_usize(self.value(a).len()).unwrap());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MeanAbsDiff(a, b), rg))
    }

    /// `mean (x − target)²`.
    pub fn mean_sq_to(&mut self, x: Var, target: T) -> Var {
        let v = self.value(x);
        let sum: T = v.data().iter().map(|y| (*y - target) * (*y - target)).sum();
        let t = Tensor::scalar(sum / T::from_usize(v.len()).unwrap());
        let rg = self.rg(x);
        self.push(t, Op::MeanSqToTarget(x, target), rg)
    }

    /// Binary cross-entropy of logits against a constant label:
    /// `mean[−t·log σ(x) − (1−t)·log(1−σ(x))]`.
    pub fn bce_with_logits(&mut self, x: Var, target: T) -> Var {
        let v = self.value(x);
        let sum: T = v
            .data()
            .iter()
            .map(|&y| softplus(y) - target * y)
            .sum();
        let t = Tensor::scalar(sum / T::from_usize(v.len()).unwrap());
        let rg = self.rg(x);
        self.push(t, Op::BceWithLogits(x, target), rg)
    }

    /// Mean softmax cross-entropy of (N,K) logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err(format!(
                "cross entropy: logits {s:?}, {} labels",
                labels.len()
            )));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Invalid(format!("label {bad} outside {k} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for i in 0..n {
            let row = &lv[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - m).exp() / z;
            }
            loss += z.ln() + m - row[labels[i]];
        }
        let t = Tensor::scalar(loss / T::from_usize(n).unwrap());
        let rg = self.rg(logits);
        Ok(self.push(
            t,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean over samples of `1 − cos(aₙ, b)`; `b` broadcast like
    /// [`Graph::mean_abs_diff`].
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        if !self.broadcast_ok(a, b) {
            return Err(shape_err(format!(
                "cosine_distance: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let bv = self.value(b).data();
        let per = bv.len();
        let av = self.value(a).data();
        let n = av.len() / per;
        let eps = T::lit(1e-12);
        let nb = bv.iter().map(|x| *x * *x).sum::<T>().sqrt();
        let mut total = T::zero();
        for s in 0..n {
            let row = &av[s * per..(s + 1) * per];
            let dot: T = row.iter().zip(bv).map(|(x, y)| *x * *y).sum();
            let na = row.iter().map(|x| *x * *x).sum::<T>().sqrt();
            total += T::one() - dot / (na * nb + eps);
        }
        let t = Tensor::scalar(total / T::from_usize(n).unwrap());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::CosineDistance(a, b), rg))
    }

    /// Row-wise KL(p‖q) averaged over rows and samples, where p and q are
    /// the rows of `|target|` and `|gen|` normalized to sum to one. The
    /// target is treated as a constant. Matrices are the trailing two axes.
    pub fn row_kl(&mut self, gen: Var, target: Var, eps: T) -> Result<Var> {
        if !self.broadcast_ok(gen, target) || self.shape(target).len() < 2 {
            return Err(shape_err(format!(
                "row_kl: {:?} vs {:?}",
                self.shape(gen),
                self.shape(target)
            )));
        }
        let ts = self.shape(target);
        let cols = ts[ts.len() - 1];
        let tv = self.value(target).data();
        let gv = self.value(gen).data();
        let per = tv.len();
        let rows_total = gv.len() / cols;
        let mut total = T::zero();
        for r in 0..rows_total {
            let g = &gv[r * cols..(r + 1) * cols];
            let off = (r * cols) % per;
            let t = &tv[off..off + cols];
            let gs: T = g.iter().map(|x| x.abs() + eps).sum();
            let ts: T = t.iter().map(|x| x.abs() + eps).sum();
            for j in 0..cols {
                let p = (t[j].abs() + eps) / ts;
                let q = (g[j].abs() + eps) / gs;
                total += p * (p / q).ln();
            }
        }
        let t = Tensor::scalar(total / T::from_usize(rows_total).unwrap());
        let rg = self.rg(gen);
        Ok(self.push(t, Op::RowKl { gen, target, eps }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(shape_err(format!(
                "backward from non-scalar {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout, &mut grads)?;
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += *x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let go = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, gout.clone());
                self.accum(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, gout.clone());
                self.accum(grads, *b, gout.map(|x| -x));
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accum(grads, *a, gout.map(|x| x * s));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.accum(grads, v, gout.map(|x| x * w));
                }
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                let data = go
                    .iter()
                    .zip(xv)
                    .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
                    .collect();
                self.accum(grads, *a, Tensor::from_vec(gout.shape(), data)?);
            }
            Op::LeakyRelu(a, slope) => {
                let xv = self.value(*a).data();
                let data = go
                    .iter()
                    .zip(xv)
                    .map(|(g, x)| if *x > T::zero() { *g } else { *g * *slope })
                    .collect();
                self.accum(grads, *a, Tensor::from_vec(gout.shape(), data)?);
            }
            Op::Conv2d { x, w, b, opts } => {
                let (n, c, h, wd) = self.value(*x).dims4()?;
                let (o, _, k, _) = self.value(*w).dims4()?;
                let (_, _, ho, wo) = node.value.dims4()?;
                let (ckk, hw) = (c * k * k, ho * wo);
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut gb = vec![T::zero(); o];
                        for s in 0..n {
                            for (oc, g) in gb.iter_mut().enumerate() {
                                *g += go[(s * o + oc) * hw..(s * o + oc + 1) * hw]
                                    .iter()
                                    .copied()
                                    .sum::<T>();
                            }
                        }
                        self.accum(grads, *b, Tensor::from_vec(&[o], gb)?);
                    }
                }
                let need_w = self.rg(*w);
                let need_x = self.rg(*x);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut cols = vec![T::zero(); ckk * hw];
                let mut gw = if need_w { vec![T::zero(); o * ckk] } else { Vec::new() };
                let mut gx = if need_x {
                    vec![T::zero(); n * c * h * wd]
                } else {
                    Vec::new()
                };
                let mut dcols = if need_x { vec![T::zero(); ckk * hw] } else { Vec::new() };
                for s in 0..n {
                    let gs = &go[s * o * hw..(s + 1) * o * hw];
                    if need_w {
                        im2col(&xv[s * c * h * wd..(s + 1) * c * h * wd], c, h, wd, k, *opts, ho, wo, &mut cols);
                        T::gemm(o, hw, ckk, gs, false, &cols, true, &mut gw, true);
                    }
                    if need_x {
                        T::gemm(ckk, o, hw, wv, true, gs, false, &mut dcols, false);
                        col2im(&dcols, c, h, wd, k, *opts, ho, wo, &mut gx[s * c * h * wd..(s + 1) * c * h * wd]);
                    }
                }
                if need_w {
                    self.accum(grads, *w, Tensor::from_vec(self.shape(*w), gw)?);
                }
                if need_x {
                    self.accum(grads, *x, Tensor::from_vec(self.shape(*x), gx)?);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (g, &idx) in go.iter().zip(argmax) {
                    gx[idx] += *g;
                }
                self.accum(grads, *x, Tensor::from_vec(self.shape(*x), gx)?);
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (h2, w2) = (2 * h, 2 * w);
                let mut gx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            gx[p * h * w + (y / 2) * w + xx / 2] += go[p * h2 * w2 + y * w2 + xx];
                        }
                    }
                }
                self.accum(grads, *x, Tensor::from_vec(self.shape(*x), gx)?);
            }
            Op::Gather { x, index } => {
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (g, &i) in go.iter().zip(index) {
                    gx[i] += *g;
                }
                self.accum(grads, *x, Tensor::from_vec(self.shape(*x), gx)?);
            }
            Op::InstanceNorm { x, xhat, inv_std } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let hw_t = T::from_usize(hw).unwrap();
                let mut gx = vec![T::zero(); n * c * hw];
                for p in 0..n * c {
                    let r = p * hw..(p + 1) * hw;
                    let g = &go[r.clone()];
                    let xh = &xhat[r.clone()];
                    let sum_g: T = g.iter().copied().sum();
                    let sum_gx: T = g.iter().zip(xh).map(|(a, b)| *a * *b).sum();
                    let scale = inv_std[p] / hw_t;
                    for ((o, gi), xi) in gx[r].iter_mut().zip(g).zip(xh) {
                        *o = scale * (hw_t * *gi - sum_g - *xi * sum_gx);
                    }
                }
                self.accum(grads, *x, Tensor::from_vec(self.shape(*x), gx)?);
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let inv = T::one() / T::from_usize(hw).unwrap();
                let mut gx = vec![T::zero(); n * c * hw];
                for p in 0..n * c {
                    gx[p * hw..(p + 1) * hw].fill(go[p] * inv);
                }
                self.accum(grads, *x, Tensor::from_vec(self.shape(*x), gx)?);
            }
            Op::Linear { x, w, b } => {
                let (n, i_dim) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                if self.rg(*x) {
                    let mut gx = vec![T::zero(); n * i_dim];
                    T::gemm(n, o, i_dim, go, false, self.value(*w).data(), false, &mut gx, false);
                    self.accum(grads, *x, Tensor::from_vec(&[n, i_dim], gx)?);
                }
                if self.rg(*w) {
                    let mut gw = vec![T::zero(); o * i_dim];
                    T::gemm(o, n, i_dim, go, true, self.value(*x).data(), false, &mut gw, false);
                    self.accum(grads, *w, Tensor::from_vec(&[o, i_dim], gw)?);
                }
                if let Some(b) = b {
                    let mut gb = vec![T::zero(); o];
                    for row in go.chunks(o) {
                        for (g, v) in gb.iter_mut().zip(row) {
                            *g += *v;
                        }
                    }
                    self.accum(grads, *b, Tensor::from_vec(&[o], gb)?);
                }
            }
            Op::Reshape(x) => {
                let g = gout.clone().reshape(self.shape(*x))?;
                self.accum(grads, *x, g);
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4()?;
                let cb = self.shape(*b)[1];
                let hw = h * w;
                let mut ga = Vec::with_capacity(n * ca * hw);
                let mut gb = Vec::with_capacity(n * cb * hw);
                for s in 0..n {
                    let base = s * (ca + cb) * hw;
                    ga.extend_from_slice(&go[base..base + ca * hw]);
                    gb.extend_from_slice(&go[base + ca * hw..base + (ca + cb) * hw]);
                }
                self.accum(grads, *a, Tensor::from_vec(self.shape(*a), ga)?);
                self.accum(grads, *b, Tensor::from_vec(self.shape(*b), gb)?);
            }
            Op::Gram(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let xv = self.value(*x).data();
                let mut gx = vec![T::zero(); n * c * hw];
                let mut sym = vec![T::zero(); c * c];
                for s in 0..n {
                    let gg = &go[s * c * c..(s + 1) * c * c];
                    for i in 0..c {
                        for j in 0..c {
                            sym[i * c + j] = gg[i * c + j] + gg[j * c + i];
                        }
                    }
                    T::gemm(c, c, hw, &sym, false, &xv[s * c * hw..(s + 1) * c * hw], false, &mut gx[s * c * hw..(s + 1) * c * hw], false);
                }
                self.accum(grads, *x, Tensor::from_vec(self.shape(*x), gx)?);
            }
            Op::MeanBatch(x) => {
                let n = self.shape(*x)[0];
                let inv = T::one() / T::from_usize(n).unwrap();
                let mut gx = Vec::with_capacity(self.value(*x).len());
                for _ in 0..n {
                    gx.extend(go.iter().map(|g| *g * inv));
                }
                self.accum(grads, *x, Tensor::from_vec(self.shape(*x), gx)?);
            }
            Op::MeanAbsDiff(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let per = bv.len();
                let scale = go[0] / T::from_usize(av.len()).unwrap();
                let signs: Vec<T> = av
                    .iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let d = *x - bv[i % per];
                        if d > T::zero() {
                            scale
                        } else if d < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); per];
                    for (i, s) in signs.iter().enumerate() {
                        gb[i % per] -= *s;
                    }
                    self.accum(grads, *b, Tensor::from_vec(self.shape(*b), gb)?);
                }
                self.accum(grads, *a, Tensor::from_vec(self.shape(*a), signs)?);
            }
            Op::MeanSqToTarget(x, t) => {
                let xv = self.value(*x);
                let scale = go[0] * T::lit(2.0) / T::from_usize(xv.len()).unwrap();
                let t = *t;
                self.accum(grads, *x, xv.map(|y| (y - t) * scale));
            }
            Op::BceWithLogits(x, t) => {
                let xv = self.value(*x);
                let scale = go[0] / T::from_usize(xv.len()).unwrap();
                let t = *t;
                self.accum(grads, *x, xv.map(|y| (sigmoid(y) - t) * scale));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let scale = go[0] / T::from_usize(labels.len()).unwrap();
                let mut g = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    g[i * k + l] -= T::one();
                }
                g.iter_mut().for_each(|v| *v *= scale);
                self.accum(grads, *logits, Tensor::from_vec(self.shape(*logits), g)?);
            }
            Op::CosineDistance(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let per = bv.len();
                let n = av.len() / per;
                let eps = T::lit(1e-12);
                let scale = -go[0] / T::from_usize(n).unwrap();
                let nb = bv.iter().map(|x| *x * *x).sum::<T>().sqrt();
                let mut ga = vec![T::zero(); av.len()];
                let mut gb = vec![T::zero(); per];
                for s in 0..n {
                    let row = &av[s * per..(s + 1) * per];
                    let dot: T = row.iter().zip(bv).map(|(x, y)| *x * *y).sum();
                    let na = row.iter().map(|x| *x * *x).sum::<T>().sqrt();
                    let denom = na * nb + eps;
                    let cos = dot / denom;
                    for j in 0..per {
                        // d cos / d a_j and d cos / d b_j
                        let da = bv[j] / denom - cos * row[j] * nb / (na * denom);
                        let db = row[j] / denom - cos * bv[j] * na / (nb * denom);
                        ga[s * per + j] = scale * da;
                        gb[j] += scale * db;
                    }
                }
                self.accum(grads, *a, Tensor::from_vec(self.shape(*a), ga)?);
                self.accum(grads, *b, Tensor::from_vec(self.shape(*b), gb)?);
            }
            Op::RowKl { gen, target, eps } => {
                let ts = self.shape(*target);
                let cols = ts[ts.len() - 1];
                let tv = self.value(*target).data();
                let gv = self.value(*gen).data();
                let per = tv.len();
                let rows_total = gv.len() / cols;
                let scale = go[0] / T::from_usize(rows_total).unwrap();
                let eps = *eps;
                let mut gg = vec![T::zero(); gv.len()];
                for r in 0..rows_total {
                    let g = &gv[r * cols..(r + 1) * cols];
                    let off = (r * cols) % per;
                    let t = &tv[off..off + cols];
                    let gs: T = g.iter().map(|x| x.abs() + eps).sum();
                    let ts: T = t.iter().map(|x| x.abs() + eps).sum();
                    for j in 0..cols {
                        let p = (t[j].abs() + eps) / ts;
                        let sign = if g[j] > T::zero() {
                            T::one()
                        } else if g[j] < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        gg[r * cols + j] = scale * sign * (T::one() / gs - p / (g[j].abs() + eps));
                    }
                }
                self.accum(grads, *gen, Tensor::from_vec(self.shape(*gen), gg)?);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(loss)/d(input) for a graph builder.
    fn check<F>(input: Tensor<f64>, build: F)
    where
        F: Fn(&mut Graph<f64>, Var) -> Var,
    {
        let mut g = Graph::new();
        let x = g.param(input.clone());
        let y = build(&mut g, x);
        let grads = g.backward(y).unwrap();
        let analytic = grads.get(x).unwrap().clone();
        let h = 1e-6;
        for i in 0..input.len() {
            let eval = |delta: f64| {
                let mut t = input.clone();
                t.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.constant(t);
                let y = build(&mut g, x);
                g.value(y).item()
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (num - a).abs() / num.abs().max(a.abs()).max(1e-3);
            assert!(err < 1e-5, "elem {i}: analytic {a} numeric {num}");
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn conv_gradient_wrt_input_and_weight() {
        let mut r = rng();
        let w = Tensor::<f64>::randn(&[3, 2, 3, 3], 0.5, &mut r);
        let x = Tensor::<f64>::randn(&[2, 2, 5, 4], 1.0, &mut r);
        let w2 = w.clone();
        check(x.clone(), move |g, x| {
            let w = g.constant(w2.clone());
            let y = g.conv2d(x, w, None, Conv2dOpts { stride: 2, pad: 1 }).unwrap();
            let z = g.gram(y).unwrap();
            g.mean_sq_to(z, 0.3)
        });
        check(w, move |g, w| {
            let x = g.constant(x.clone());
            let y = g.conv2d(x, w, None, Conv2dOpts::same(3)).unwrap();
            g.mean_sq_to(y, 0.1)
        });
    }

    #[test]
    fn instance_norm_and_pooling_gradients() {
        let mut r = rng();
        let x = Tensor::<f64>::randn(&[2, 3, 4, 4], 1.0, &mut r);
        let target = Tensor::<f64>::randn(&[2, 3, 4, 4], 1.0, &mut r);
        check(x.clone(), move |g, x| {
            let y = g.instance_norm(x, 1e-5).unwrap();
            let t = g.constant(target.clone());
            let d = g.sub(y, t).unwrap();
            let l = g.leaky_relu(d, 0.2);
            g.mean_sq_to(l, 0.0)
        });
        check(x, |g, x| {
            let p = g.max_pool2(x).unwrap();
            let u = g.upsample2(p).unwrap();
            let c = g.concat_channels(u, x).unwrap();
            let a = g.global_avg_pool(c).unwrap();
            g.mean_sq_to(a, 1.0)
        });
    }

    #[test]
    fn linear_and_cross_entropy_gradients() {
        let mut r = rng();
        let x = Tensor::<f64>::randn(&[4, 6], 1.0, &mut r);
        let w = Tensor::<f64>::randn(&[5, 6], 0.4, &mut r);
        check(x, move |g, x| {
            let w = g.constant(w.clone());
            let y = g.linear(x, w, None).unwrap();
            g.softmax_cross_entropy(y, &[0, 4, 2, 2]).unwrap()
        });
    }

    #[test]
    fn fused_loss_gradients() {
        let mut r = rng();
        let a = Tensor::<f64>::randn(&[3, 2, 4], 1.0, &mut r);
        let b = Tensor::<f64>::randn(&[2, 4], 1.0, &mut r);
        let b1 = b.clone();
        check(a.clone(), move |g, a| {
            let b = g.constant(b1.clone());
            g.mean_abs_diff(a, b).unwrap()
        });
        let b2 = b.clone();
        check(a.clone(), move |g, a| {
            let b = g.constant(b2.clone());
            g.cosine_distance(a, b).unwrap()
        });
        let a2 = a.clone();
        check(b.clone(), move |g, b| {
            let a = g.constant(a2.clone());
            g.cosine_distance(a, b).unwrap()
        });
        check(a.clone(), move |g, a| {
            let b = g.constant(b.clone());
            g.row_kl(a, b, 1e-8).unwrap()
        });
        check(a.clone(), |g, a| g.bce_with_logits(a, 1.0));
        check(a, |g, a| {
            let m = g.mean_batch(a).unwrap();
            let s = g.scale(m, 3.0);
            let t = g.weighted_sum(&[(s, 0.5), (m, -2.0)]).unwrap();
            g.mean_sq_to(t, 0.2)
        });
    }

    #[test]
    fn reflect_pad_values_and_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(&[1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let p = g.reflect_pad(x, 1).unwrap();
        assert_eq!(g.shape(p), &[1, 1, 4, 5]);
        assert_eq!(&g.value(p).data()[..5], &[5.0, 4.0, 5.0, 6.0, 5.0]);
        assert!(g.reflect_pad(x, 2).is_err());
        let mut r = rng();
        check(Tensor::randn(&[2, 2, 3, 4], 1.0, &mut r), |g, x| {
            let p = g.reflect_pad(x, 2).unwrap();
            g.mean_sq_to(p, 0.5)
        });
    }

    #[test]
    fn gram_is_exactly_symmetric() {
        let mut r = rng();
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::randn(&[2, 7, 5, 3], 1.0, &mut r));
        let gr = g.gram(x).unwrap();
        let v = g.value(gr).data();
        for s in 0..2 {
            for i in 0..7 {
                for j in 0..7 {
                    assert_eq!(v[s * 49 + i * 7 + j], v[s * 49 + j * 7 + i]);
                }
            }
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full(&[3], 1.0));
        let b = g.param(Tensor::full(&[3], 2.0));
        let s = g.add(a, b).unwrap();
        let l = g.mean_sq_to(s, 0.0);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let w = g.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(g.conv2d(x, w, None, Conv2dOpts { stride: 1, pad: 0 }).is_err());
    }
}
