//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tensor`] is an owned value (shape + row-major `f64` buffer) used for
//! parameters and inputs. A [`Tape`] records primitive applications during a
//! forward pass; [`Tape::backward`] replays their adjoints in reverse and
//! leaves gradients on every `requires_grad` leaf.

pub mod gradcheck;
pub mod kernels;

use crate::error::{Error, Result};
pub use kernels::{ConvSpec, PoolKind};

/// Dense N-dimensional real array, optionally carrying a gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::shape(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    /// A trainable tensor: `requires_grad` set, zero-initialized grad buffer.
    pub fn param(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let mut t = Tensor::new(shape, values)?;
        t.requires_grad = true;
        t.grad = Some(vec![0.0; t.values.len()]);
        Ok(t)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.values.len());
        self.grad = Some(grad);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Expr {
    Leaf,
    Constant,
    Relu { x: TensorId },
    Add { a: TensorId, b: TensorId },
    AddN { xs: Vec<TensorId> },
    Mul { a: TensorId, b: TensorId },
    Sum { x: TensorId },
    ElementwiseMax { a: TensorId, b: TensorId },
    Softmax { x: TensorId },
    LogSoftmax { x: TensorId },
    CrossEntropy { logits: TensorId, labels: Vec<usize> },
    Linear { x: TensorId, w: TensorId, b: TensorId },
    Conv2d { x: TensorId, k: TensorId, spec: ConvSpec },
    Pool2d { x: TensorId, kind: PoolKind, window: usize, stride: usize, padding: usize },
    ChannelNorm { x: TensorId, gamma: TensorId, beta: TensorId, mean: Vec<f64>, inv_std: Vec<f64> },
    GlobalAvgPool { x: TensorId },
    ConcatChannels { xs: Vec<TensorId> },
    SliceChannels { x: TensorId, start: usize, len: usize },
    WeightedSum { xs: Vec<TensorId>, w: TensorId },
    StridedSubsample { x: TensorId, off_h: usize, off_w: usize, stride: usize },
    Reshape { x: TensorId },
}

struct Meta {
    shape: Vec<usize>,
    requires_grad: bool,
    expr: Expr,
}

/// Linear record of one forward pass. Single-owner; not shared across threads.
#[derive(Default)]
pub struct Tape {
    metas: Vec<Meta>,
    values: Vec<Vec<f64>>,
    grads: Vec<Option<Vec<f64>>>,
}

const NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.metas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metas.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.metas[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.metas[id.0].requires_grad
    }

    pub fn scalar_value(&self, id: TensorId) -> Result<f64> {
        let v = self.values(id);
        if v.len() != 1 {
            return Err(Error::shape(format!("expected scalar, got shape {:?}", self.shape(id))));
        }
        Ok(v[0])
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, expr: Expr) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.metas.push(Meta {
            shape,
            requires_grad,
            expr,
        });
        self.values.push(values);
        self.grads.push(None);
        TensorId(self.metas.len() - 1)
    }

    /// Records a leaf carrying a copy of the tensor's values.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(t.shape.clone(), t.values.clone(), t.requires_grad, Expr::Leaf)
    }

    /// Binds a tensor as a leaf that never receives gradients, regardless of
    /// its own `requires_grad` flag. Lets a caller run a backward pass that
    /// only targets other leaves without paying for these gradients.
    pub fn frozen_leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(t.shape.clone(), t.values.clone(), false, Expr::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::shape(format!(
                "constant shape {:?} implies {} elements, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        Ok(self.push(shape, values, false, Expr::Constant))
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.metas[id.0].requires_grad)
    }

    fn same_shape(&self, a: TensorId, b: TensorId, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{op}: operand shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ── primitives ──────────────────────────────────────────────────────

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.values(x).iter().map(|v| v.max(0.0)).collect();
        let rg = self.requires_grad(x);
        self.push(self.shape(x).to_vec(), out, rg, Expr::Relu { x })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Expr::Add { a, b }))
    }

    pub fn add_n(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        let first = *xs.first().ok_or_else(|| Error::invalid("add_n: empty operand list"))?;
        for &x in &xs[1..] {
            self.same_shape(first, x, "add_n")?;
        }
        let mut out = self.values(first).to_vec();
        for &x in &xs[1..] {
            for (o, v) in out.iter_mut().zip(self.values(x)) {
                *o += v;
            }
        }
        let rg = self.any_grad(xs);
        Ok(self.push(self.shape(first).to_vec(), out, rg, Expr::AddN { xs: xs.to_vec() }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Expr::Mul { a, b }))
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.values(x).iter().sum();
        let rg = self.requires_grad(x);
        self.push(vec![1], vec![s], rg, Expr::Sum { x })
    }

    pub fn elementwise_max(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "elementwise_max")?;
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| if x >= y { *x } else { *y })
            .collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Expr::ElementwiseMax { a, b }))
    }

    fn rows_last(&self, x: TensorId, op: &str) -> Result<(usize, usize)> {
        let shape = self.shape(x);
        let last = *shape
            .last()
            .ok_or_else(|| Error::shape(format!("{op}: zero-rank tensor")))?;
        if last == 0 {
            return Err(Error::shape(format!("{op}: empty last dimension")));
        }
        Ok((self.values(x).len() / last, last))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.rows_last(x, "softmax")?;
        let v = self.values(x);
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (x - m).exp();
                z += *o;
            }
            out[r * cols..(r + 1) * cols].iter_mut().for_each(|o| *o /= z);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Expr::Softmax { x }))
    }

    pub fn log_softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.rows_last(x, "log_softmax")?;
        let v = self.values(x);
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for (o, x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Expr::LogSoftmax { x }))
    }

    /// Mean negative log-likelihood over the batch. `logits` is [N, K].
    pub fn cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape(format!(
                "cross_entropy expects [N, K] logits, got {shape:?}"
            )));
        }
        let (n, k) = (shape[0], shape[1]);
        if n == 0 {
            return Err(Error::invalid("cross_entropy: empty batch"));
        }
        if labels.len() != n {
            return Err(Error::shape(format!(
                "cross_entropy: {n} rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!(
                "cross_entropy: label {bad} out of range for {k} classes"
            )));
        }
        let v = self.values(logits);
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &v[r * k..(r + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            loss -= row[label] - lse;
        }
        loss /= n as f64;
        let rg = self.requires_grad(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Expr::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// `x` [N, D] · `w` [K, D] + `b` [K] -> [N, K].
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || ws[0] != bs[0] {
            return Err(Error::shape(format!(
                "linear: incompatible shapes x={xs:?} w={ws:?} b={bs:?}"
            )));
        }
        let (n, d, k) = (xs[0], xs[1], ws[0]);
        let (xv, wv, bv) = (self.values(x), self.values(w), self.values(b));
        let mut out = vec![0.0; n * k];
        for r in 0..n {
            let xrow = &xv[r * d..(r + 1) * d];
            for c in 0..k {
                let wrow = &wv[c * d..(c + 1) * d];
                let mut acc = bv[c];
                for (xi, wi) in xrow.iter().zip(wrow) {
                    acc += xi * wi;
                }
                out[r * k + c] = acc;
            }
        }
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(vec![n, k], out, rg, Expr::Linear { x, w, b }))
    }

    pub fn conv2d(&mut self, x: TensorId, k: TensorId, spec: ConvSpec) -> Result<TensorId> {
        let os = kernels::conv2d_out_shape(self.shape(x), self.shape(k), &spec)?;
        let mut out = vec![0.0; os.iter().product()];
        kernels::conv2d_forward(
            self.values(x),
            self.shape(x),
            self.values(k),
            self.shape(k),
            &spec,
            &mut out,
            &os,
        );
        let rg = self.any_grad(&[x, k]);
        Ok(self.push(os, out, rg, Expr::Conv2d { x, k, spec }))
    }

    pub fn pool2d(
        &mut self,
        x: TensorId,
        kind: PoolKind,
        window: usize,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let os = kernels::pool2d_out_shape(self.shape(x), window, stride, padding)?;
        let mut out = vec![0.0; os.iter().product()];
        kernels::pool2d_forward(
            self.values(x),
            self.shape(x),
            kind,
            window,
            stride,
            padding,
            &mut out,
            &os,
        );
        let rg = self.requires_grad(x);
        Ok(self.push(
            os,
            out,
            rg,
            Expr::Pool2d {
                x,
                kind,
                window,
                stride,
                padding,
            },
        ))
    }

    /// Per-channel normalization over batch and spatial dims using batch
    /// statistics, with learned scale `gamma` and shift `beta` (both [C]).
    pub fn channel_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(format!("channel_norm expects 4-d input, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if n == 0 {
            return Err(Error::invalid("channel_norm: empty batch"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "channel_norm: gamma/beta must be [{c}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let hw = h * w;
        let m = (n * hw) as f64;
        let xv = self.values(x);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let plane = &xv[(ni * c + ci) * hw..][..hw];
                mean[ci] += plane.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for ni in 0..n {
            for ci in 0..c {
                let plane = &xv[(ni * c + ci) * hw..][..hw];
                let mu = mean[ci];
                var[ci] += plane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();

        let (gv, bv) = (self.values(gamma), self.values(beta));
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let (mu, is, g, b) = (mean[ci], inv_std[ci], gv[ci], bv[ci]);
                for (o, xi) in out[base..base + hw].iter_mut().zip(&xv[base..base + hw]) {
                    *o = g * (xi - mu) * is + b;
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            xs,
            out,
            rg,
            Expr::ChannelNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
        ))
    }

    /// [N, C, H, W] -> [N, C], mean over the spatial dims.
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(format!("global_avg_pool expects 4-d input, got {xs:?}")));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        if hw == 0 {
            return Err(Error::invalid("global_avg_pool: empty spatial extent"));
        }
        let xv = self.values(x);
        let mut out = vec![0.0; n * c];
        for i in 0..n * c {
            out[i] = xv[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64;
        }
        let rg = self.requires_grad(x);
        Ok(self.push(vec![n, c], out, rg, Expr::GlobalAvgPool { x }))
    }

    pub fn concat_channels(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("concat_channels: empty operand list"))?;
        let fs = self.shape(first).to_vec();
        if fs.len() != 4 {
            return Err(Error::shape(format!("concat_channels expects 4-d inputs, got {fs:?}")));
        }
        let (n, h, w) = (fs[0], fs[2], fs[3]);
        let mut c_total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return Err(Error::shape(format!(
                    "concat_channels: shape {s:?} incompatible with {fs:?}"
                )));
            }
            c_total += s[1];
        }
        let hw = h * w;
        let mut out = vec![0.0; n * c_total * hw];
        for ni in 0..n {
            let mut c_off = 0;
            for &x in xs {
                let ci = self.shape(x)[1];
                let src = &self.values(x)[ni * ci * hw..(ni + 1) * ci * hw];
                out[(ni * c_total + c_off) * hw..][..ci * hw].copy_from_slice(src);
                c_off += ci;
            }
        }
        let rg = self.any_grad(xs);
        Ok(self.push(vec![n, c_total, h, w], out, rg, Expr::ConcatChannels { xs: xs.to_vec() }))
    }

    pub fn slice_channels(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(format!("slice_channels expects 4-d input, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if start + len > c {
            return Err(Error::shape(format!(
                "slice_channels: range {start}..{} out of {c} channels",
                start + len
            )));
        }
        let hw = h * w;
        let xv = self.values(x);
        let mut out = vec![0.0; n * len * hw];
        for ni in 0..n {
            let src = &xv[(ni * c + start) * hw..][..len * hw];
            out[ni * len * hw..(ni + 1) * len * hw].copy_from_slice(src);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(vec![n, len, h, w], out, rg, Expr::SliceChannels { x, start, len }))
    }

    /// out = Σ_i w[i] · xs[i]; `w` is a 1-d tensor of length `xs.len()`.
    pub fn weighted_sum(&mut self, xs: &[TensorId], w: TensorId) -> Result<TensorId> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("weighted_sum: empty operand list"))?;
        for &x in &xs[1..] {
            self.same_shape(first, x, "weighted_sum")?;
        }
        if self.shape(w) != [xs.len()] {
            return Err(Error::shape(format!(
                "weighted_sum: weight shape {:?} does not match {} operands",
                self.shape(w),
                xs.len()
            )));
        }
        let wv = self.values(w).to_vec();
        let mut out = vec![0.0; self.values(first).len()];
        for (&x, &wi) in xs.iter().zip(&wv) {
            for (o, v) in out.iter_mut().zip(self.values(x)) {
                *o += wi * v;
            }
        }
        let mut all = xs.to_vec();
        all.push(w);
        let rg = self.any_grad(&all);
        Ok(self.push(self.shape(first).to_vec(), out, rg, Expr::WeightedSum { xs: xs.to_vec(), w }))
    }

    /// Spatial subsampling: out[h, w] = x[off_h + h·stride, off_w + w·stride],
    /// reading zero past the input boundary. Output dims are ceil(H/stride) ×
    /// ceil(W/stride) regardless of offset.
    pub fn strided_subsample(
        &mut self,
        x: TensorId,
        off_h: usize,
        off_w: usize,
        stride: usize,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(format!("strided_subsample expects 4-d input, got {xs:?}")));
        }
        if stride == 0 {
            return Err(Error::invalid("strided_subsample: stride must be >= 1"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let oh = h.div_ceil(stride);
        let ow = w.div_ceil(stride);
        let xv = self.values(x);
        let mut out = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            let plane = &xv[nc * h * w..][..h * w];
            let out_plane = &mut out[nc * oh * ow..][..oh * ow];
            for ohi in 0..oh {
                let ih = off_h + ohi * stride;
                if ih >= h {
                    continue;
                }
                for owi in 0..ow {
                    let iw = off_w + owi * stride;
                    if iw < w {
                        out_plane[ohi * ow + owi] = plane[ih * w + iw];
                    }
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            vec![n, c, oh, ow],
            out,
            rg,
            Expr::StridedSubsample { x, off_h, off_w, stride },
        ))
    }

    /// Distance to the nearest non-differentiable point recorded on the tape:
    /// relu inputs near zero, near-ties in elementwise max, and near-ties
    /// between the top two entries of each max-pool window. Finite-difference
    /// checks are only meaningful when this margin exceeds the FD step.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for idx in 0..self.metas.len() {
            match &self.metas[idx].expr {
                Expr::Relu { x } => {
                    for v in &self.values[x.0] {
                        margin = margin.min(v.abs());
                    }
                }
                Expr::ElementwiseMax { a, b } => {
                    for (x, y) in self.values[a.0].iter().zip(&self.values[b.0]) {
                        margin = margin.min((x - y).abs());
                    }
                }
                Expr::Pool2d {
                    x,
                    kind: PoolKind::Max,
                    window,
                    stride,
                    padding,
                } => {
                    let xs = &self.metas[x.0].shape;
                    let (h, w) = (xs[2], xs[3]);
                    let os = &self.metas[idx].shape;
                    let (oh_n, ow_n) = (os[2], os[3]);
                    let xv = &self.values[x.0];
                    for nc in 0..xs[0] * xs[1] {
                        let plane = &xv[nc * h * w..][..h * w];
                        for oh in 0..oh_n {
                            for ow in 0..ow_n {
                                let mut best = f64::NEG_INFINITY;
                                let mut second = f64::NEG_INFINITY;
                                for khi in 0..*window {
                                    let ih = (oh * stride + khi) as isize - *padding as isize;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    for kwi in 0..*window {
                                        let iw = (ow * stride + kwi) as isize - *padding as isize;
                                        if iw < 0 || iw >= w as isize {
                                            continue;
                                        }
                                        let v = plane[ih as usize * w + iw as usize];
                                        if v > best {
                                            second = best;
                                            best = v;
                                        } else if v > second {
                                            second = v;
                                        }
                                    }
                                }
                                if second.is_finite() {
                                    margin = margin.min(best - second);
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Hash of the active piece of every piecewise-linear op on the tape:
    /// relu sign patterns, elementwise-max winners, and max-pool argmax
    /// positions. Two evaluations with equal signatures lie on the same
    /// smooth piece, so finite differences between them are valid.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for idx in 0..self.metas.len() {
            match &self.metas[idx].expr {
                Expr::Relu { x } => {
                    for v in &self.values[x.0] {
                        h.write_u8((*v > 0.0) as u8);
                    }
                }
                Expr::ElementwiseMax { a, b } => {
                    for (x, y) in self.values[a.0].iter().zip(&self.values[b.0]) {
                        h.write_u8((x > y) as u8);
                    }
                }
                Expr::Pool2d {
                    x,
                    kind: PoolKind::Max,
                    window,
                    stride,
                    padding,
                } => {
                    let xs = &self.metas[x.0].shape;
                    let (hh, w) = (xs[2], xs[3]);
                    let os = &self.metas[idx].shape;
                    let (oh_n, ow_n) = (os[2], os[3]);
                    let xv = &self.values[x.0];
                    for nc in 0..xs[0] * xs[1] {
                        let plane = &xv[nc * hh * w..][..hh * w];
                        for oh in 0..oh_n {
                            for ow in 0..ow_n {
                                let mut best = f64::NEG_INFINITY;
                                let mut best_idx = 0usize;
                                for khi in 0..*window {
                                    let ih = (oh * stride + khi) as isize - *padding as isize;
                                    if ih < 0 || ih >= hh as isize {
                                        continue;
                                    }
                                    for kwi in 0..*window {
                                        let iw = (ow * stride + kwi) as isize - *padding as isize;
                                        if iw < 0 || iw >= w as isize {
                                            continue;
                                        }
                                        let i = ih as usize * w + iw as usize;
                                        if plane[i] > best {
                                            best = plane[i];
                                            best_idx = i;
                                        }
                                    }
                                }
                                h.write_usize(best_idx);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// View with a new shape of identical element count.
    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.values(x).len() {
            return Err(Error::shape(format!(
                "reshape: {:?} has {} elements, target {:?} needs {}",
                self.shape(x),
                self.values(x).len(),
                shape,
                numel
            )));
        }
        let values = self.values(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(shape, values, rg, Expr::Reshape { x }))
    }

    // ── backward ────────────────────────────────────────────────────────

    fn ensure_grad(&mut self, id: TensorId) {
        if self.metas[id.0].requires_grad && self.grads[id.0].is_none() {
            self.grads[id.0] = Some(vec![0.0; self.values[id.0].len()]);
        }
    }

    fn add_to_grad(&mut self, id: TensorId, contrib: &[f64]) {
        if !self.metas[id.0].requires_grad {
            return;
        }
        self.ensure_grad(id);
        let g = self.grads[id.0].as_mut().unwrap();
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += ci;
        }
    }

    /// Detaches the grad buffer of `id` for in-place accumulation (kernels
    /// add into it directly instead of building a contribution copy).
    /// Returns `None` when the tensor does not track gradients.
    fn take_grad_buf(&mut self, id: TensorId) -> Option<Vec<f64>> {
        if !self.metas[id.0].requires_grad {
            return None;
        }
        Some(
            self.grads[id.0]
                .take()
                .unwrap_or_else(|| vec![0.0; self.values[id.0].len()]),
        )
    }

    fn put_grad_buf(&mut self, id: TensorId, g: Vec<f64>) {
        self.grads[id.0] = Some(g);
    }

    /// Reverse pass from a scalar `loss`; gradients accumulate onto every
    /// `requires_grad` leaf and can be read back with [`Tape::grad`].
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.values(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.metas[loss.0].requires_grad {
            return Ok(()); // nothing trainable reaches the loss
        }
        self.ensure_grad(loss);
        self.grads[loss.0].as_mut().unwrap()[0] += 1.0;

        for idx in (0..=loss.0).rev() {
            if !self.metas[idx].requires_grad {
                continue;
            }
            if matches!(self.metas[idx].expr, Expr::Leaf | Expr::Constant) {
                continue; // leaf grads stay on the tape
            }
            let Some(gout) = self.grads[idx].take() else {
                continue; // not reachable from the loss
            };
            self.apply_adjoint(idx, &gout)?;
        }
        Ok(())
    }

    fn apply_adjoint(&mut self, idx: usize, gout: &[f64]) -> Result<()> {
        // Expr is taken apart immutably; contributions go through add_to_grad.
        let expr = std::mem::replace(&mut self.metas[idx].expr, Expr::Constant);
        match &expr {
            Expr::Leaf | Expr::Constant => unreachable!(),
            Expr::Relu { x } => {
                if let Some(mut g) = self.take_grad_buf(*x) {
                    for ((gi, xi), go) in g.iter_mut().zip(&self.values[x.0]).zip(gout) {
                        if *xi > 0.0 {
                            *gi += go;
                        }
                    }
                    self.put_grad_buf(*x, g);
                }
            }
            Expr::Add { a, b } => {
                self.add_to_grad(*a, gout);
                self.add_to_grad(*b, gout);
            }
            Expr::AddN { xs } => {
                for &x in xs {
                    self.add_to_grad(x, gout);
                }
            }
            Expr::Mul { a, b } => {
                for (dst, other) in [(*a, *b), (*b, *a)] {
                    if let Some(mut g) = self.take_grad_buf(dst) {
                        for ((gi, v), go) in g.iter_mut().zip(&self.values[other.0]).zip(gout) {
                            *gi += v * go;
                        }
                        self.put_grad_buf(dst, g);
                    }
                }
            }
            Expr::Sum { x } => {
                if let Some(mut g) = self.take_grad_buf(*x) {
                    for gi in g.iter_mut() {
                        *gi += gout[0];
                    }
                    self.put_grad_buf(*x, g);
                }
            }
            Expr::ElementwiseMax { a, b } => {
                // ties route to the first argument
                for (dst, first) in [(*a, true), (*b, false)] {
                    if let Some(mut g) = self.take_grad_buf(dst) {
                        let av = &self.values[a.0];
                        let bv = &self.values[b.0];
                        for (((gi, x), y), go) in g.iter_mut().zip(av).zip(bv).zip(gout) {
                            if (x >= y) == first {
                                *gi += go;
                            }
                        }
                        self.put_grad_buf(dst, g);
                    }
                }
            }
            Expr::Softmax { x } => {
                let y = &self.values[idx];
                let cols = *self.metas[idx].shape.last().unwrap();
                let mut contrib = vec![0.0; y.len()];
                for r in 0..y.len() / cols {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &gout[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((c, yi), gi) in contrib[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr) {
                        *c = yi * (gi - dot);
                    }
                }
                self.add_to_grad(*x, &contrib);
            }
            Expr::LogSoftmax { x } => {
                let y = &self.values[idx];
                let cols = *self.metas[idx].shape.last().unwrap();
                let mut contrib = vec![0.0; y.len()];
                for r in 0..y.len() / cols {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &gout[r * cols..(r + 1) * cols];
                    let gsum: f64 = gr.iter().sum();
                    for ((c, yi), gi) in contrib[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr) {
                        *c = gi - yi.exp() * gsum;
                    }
                }
                self.add_to_grad(*x, &contrib);
            }
            Expr::CrossEntropy { logits, labels } => {
                let v = &self.values[logits.0];
                let k = self.metas[logits.0].shape[1];
                let n = labels.len();
                let scale = gout[0] / n as f64;
                let mut contrib = vec![0.0; v.len()];
                for (r, &label) in labels.iter().enumerate() {
                    let row = &v[r * k..(r + 1) * k];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
                    for (c, (dst, x)) in contrib[r * k..(r + 1) * k].iter_mut().zip(row).enumerate() {
                        let p = (x - m).exp() / z;
                        *dst = scale * (p - if c == label { 1.0 } else { 0.0 });
                    }
                }
                self.add_to_grad(*logits, &contrib);
            }
            Expr::Linear { x, w, b } => {
                let (n, d) = (self.metas[x.0].shape[0], self.metas[x.0].shape[1]);
                let k = self.metas[w.0].shape[0];
                let (cx, cw, cb) = {
                    let xv = &self.values[x.0];
                    let wv = &self.values[w.0];
                    let cx = self.metas[x.0].requires_grad.then(|| {
                        let mut cx = vec![0.0; n * d];
                        for r in 0..n {
                            for c in 0..k {
                                let g = gout[r * k + c];
                                let wrow = &wv[c * d..(c + 1) * d];
                                for (dst, wi) in cx[r * d..(r + 1) * d].iter_mut().zip(wrow) {
                                    *dst += g * wi;
                                }
                            }
                        }
                        cx
                    });
                    let cw = self.metas[w.0].requires_grad.then(|| {
                        let mut cw = vec![0.0; k * d];
                        for r in 0..n {
                            let xrow = &xv[r * d..(r + 1) * d];
                            for c in 0..k {
                                let g = gout[r * k + c];
                                for (dst, xi) in cw[c * d..(c + 1) * d].iter_mut().zip(xrow) {
                                    *dst += g * xi;
                                }
                            }
                        }
                        cw
                    });
                    let cb = self.metas[b.0].requires_grad.then(|| {
                        let mut cb = vec![0.0; k];
                        for r in 0..n {
                            for c in 0..k {
                                cb[c] += gout[r * k + c];
                            }
                        }
                        cb
                    });
                    (cx, cw, cb)
                };
                if let Some(cx) = cx {
                    self.add_to_grad(*x, &cx);
                }
                if let Some(cw) = cw {
                    self.add_to_grad(*w, &cw);
                }
                if let Some(cb) = cb {
                    self.add_to_grad(*b, &cb);
                }
            }
            Expr::Conv2d { x, k, spec } => {
                let xs = self.metas[x.0].shape.clone();
                let ks = self.metas[k.0].shape.clone();
                let os = self.metas[idx].shape.clone();
                let mut gx = self.take_grad_buf(*x);
                let mut gk = self.take_grad_buf(*k);
                kernels::conv2d_backward(
                    &self.values[x.0],
                    &xs,
                    &self.values[k.0],
                    &ks,
                    spec,
                    gout,
                    &os,
                    gx.as_deref_mut(),
                    gk.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    self.put_grad_buf(*x, gx);
                }
                if let Some(gk) = gk {
                    self.put_grad_buf(*k, gk);
                }
            }
            Expr::Pool2d {
                x,
                kind,
                window,
                stride,
                padding,
            } => {
                let xs = self.metas[x.0].shape.clone();
                let os = self.metas[idx].shape.clone();
                if let Some(mut gx) = self.take_grad_buf(*x) {
                    kernels::pool2d_backward(
                        &self.values[x.0],
                        &xs,
                        *kind,
                        *window,
                        *stride,
                        *padding,
                        gout,
                        &os,
                        &mut gx,
                    );
                    self.put_grad_buf(*x, gx);
                }
            }
            Expr::ChannelNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xs = self.metas[x.0].shape.clone();
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let m = (n * hw) as f64;
                let xv = &self.values[x.0];
                let gv = &self.values[gamma.0];

                // per-channel reductions over dxhat and dxhat·xhat
                let mut sum_dxhat = vec![0.0; c];
                let mut sum_dxhat_xhat = vec![0.0; c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        let (mu, is) = (mean[ci], inv_std[ci]);
                        for i in 0..hw {
                            let xhat = (xv[base + i] - mu) * is;
                            let g = gout[base + i];
                            dgamma[ci] += g * xhat;
                            dbeta[ci] += g;
                            let dxhat = g * gv[ci];
                            sum_dxhat[ci] += dxhat;
                            sum_dxhat_xhat[ci] += dxhat * xhat;
                        }
                    }
                }
                if let Some(mut gx) = self.take_grad_buf(*x) {
                    let xv = &self.values[x.0];
                    let gv = &self.values[gamma.0];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let (mu, is) = (mean[ci], inv_std[ci]);
                            let (sd, sdx) = (sum_dxhat[ci], sum_dxhat_xhat[ci]);
                            for i in 0..hw {
                                let xhat = (xv[base + i] - mu) * is;
                                let dxhat = gout[base + i] * gv[ci];
                                gx[base + i] += is * (dxhat - sd / m - xhat * sdx / m);
                            }
                        }
                    }
                    self.put_grad_buf(*x, gx);
                }
                self.add_to_grad(*gamma, &dgamma);
                self.add_to_grad(*beta, &dbeta);
            }
            Expr::GlobalAvgPool { x } => {
                let xs = self.metas[x.0].shape.clone();
                let hw = xs[2] * xs[3];
                if let Some(mut g) = self.take_grad_buf(*x) {
                    for (i, go) in gout.iter().enumerate() {
                        let share = go / hw as f64;
                        g[i * hw..(i + 1) * hw].iter_mut().for_each(|v| *v += share);
                    }
                    self.put_grad_buf(*x, g);
                }
            }
            Expr::ConcatChannels { xs } => {
                let os = self.metas[idx].shape.clone();
                let (n, c_total, hw) = (os[0], os[1], os[2] * os[3]);
                let mut c_off = 0;
                for &x in xs {
                    let ci = self.metas[x.0].shape[1];
                    if let Some(mut g) = self.take_grad_buf(x) {
                        for ni in 0..n {
                            let src = &gout[(ni * c_total + c_off) * hw..][..ci * hw];
                            for (gi, go) in g[ni * ci * hw..(ni + 1) * ci * hw].iter_mut().zip(src) {
                                *gi += go;
                            }
                        }
                        self.put_grad_buf(x, g);
                    }
                    c_off += ci;
                }
            }
            Expr::SliceChannels { x, start, len } => {
                let xs = self.metas[x.0].shape.clone();
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                if let Some(mut g) = self.take_grad_buf(*x) {
                    for ni in 0..n {
                        let dst = &mut g[(ni * c + start) * hw..][..len * hw];
                        for (gi, go) in dst.iter_mut().zip(&gout[ni * len * hw..(ni + 1) * len * hw]) {
                            *gi += go;
                        }
                    }
                    self.put_grad_buf(*x, g);
                }
            }
            Expr::WeightedSum { xs, w } => {
                let wv = self.values[w.0].clone();
                for (&x, &wi) in xs.iter().zip(&wv) {
                    if let Some(mut g) = self.take_grad_buf(x) {
                        for (gi, go) in g.iter_mut().zip(gout) {
                            *gi += wi * go;
                        }
                        self.put_grad_buf(x, g);
                    }
                }
                if self.metas[w.0].requires_grad {
                    let mut cw = vec![0.0; wv.len()];
                    for (dst, &x) in cw.iter_mut().zip(xs.iter()) {
                        *dst = self.values[x.0].iter().zip(gout).map(|(v, g)| v * g).sum();
                    }
                    self.add_to_grad(*w, &cw);
                }
            }
            Expr::StridedSubsample { x, off_h, off_w, stride } => {
                let xs = self.metas[x.0].shape.clone();
                let os = self.metas[idx].shape.clone();
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (os[2], os[3]);
                if let Some(mut g) = self.take_grad_buf(*x) {
                    for nc in 0..xs[0] * xs[1] {
                        let gplane = &gout[nc * oh * ow..][..oh * ow];
                        let cplane = &mut g[nc * h * w..][..h * w];
                        for ohi in 0..oh {
                            let ih = off_h + ohi * stride;
                            if ih >= h {
                                continue;
                            }
                            for owi in 0..ow {
                                let iw = off_w + owi * stride;
                                if iw < w {
                                    cplane[ih * w + iw] += gplane[ohi * ow + owi];
                                }
                            }
                        }
                    }
                    self.put_grad_buf(*x, g);
                }
            }
            Expr::Reshape { x } => {
                self.add_to_grad(*x, gout);
            }
        }
        self.metas[idx].expr = expr;
        Ok(())
    }
}
