//! Forward definitions of every recorded operation.

use super::{BatchStats, Graph, Op, Var};
use crate::kernels::{self, ConvGeometry, MatRef};
use crate::tensor::{numel, Result, Tensor, TensorError};

/// Batched matmul layout shared by forward and backward.
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub p: usize,
    pub out_shape: Vec<usize>,
    /// `(a_offset, b_offset)` per output matrix, in elements. Empty when the
    /// right operand is a single matrix and the left one can be flattened.
    pub pairs: Vec<(usize, usize)>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let (ra, rb) = (a.len(), b.len());
        let (m, k, k2, p) = (a[ra - 2], a[ra - 1], b[rb - 2], b[rb - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let (batch_a, batch_b) = (&a[..ra - 2], &b[..rb - 2]);
        let batch = kernels::broadcast_shape(batch_a, batch_b).ok_or_else(mismatch)?;
        let mut out_shape = batch.clone();
        out_shape.extend([m, p]);
        let mut pairs = Vec::new();
        if numel(batch_b) != 1 {
            let sa = kernels::broadcast_strides(batch_a, &batch);
            let sb = kernels::broadcast_strides(batch_b, &batch);
            pairs.reserve(numel(&batch));
            kernels::walk2(&batch, &sa, &sb, |_, oa, ob| pairs.push((oa * m * k, ob * k * p)));
        }
        Ok(Self {
            m,
            k,
            p,
            out_shape,
            pairs,
        })
    }

    pub fn flat(&self) -> bool {
        self.pairs.is_empty()
    }
}

impl Graph {
    fn broadcast_of(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        kernels::broadcast_shape(self.shape(a), self.shape(b)).ok_or_else(|| TensorError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        })
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let shape = self.broadcast_of(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = kernels::broadcast_binary(ta.data(), ta.shape(), tb.data(), tb.shape(), &shape, f);
        self.push(name, Tensor::from_parts(shape, data), op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(name, value, op, &[a])
    }

    /// Broadcasting elementwise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a, factor), |x| x * factor)
    }

    /// `max(x, 0)`; the derivative at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, Op::Gelu(a), gelu)
    }

    /// `|x|` with a zero subgradient at zero.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, Op::Abs(a), f64::abs)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.sum() / t.numel() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Mean over the last axis, which is removed.
    pub fn mean_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape();
        if shape.is_empty() {
            return Err(TensorError::Axis {
                op: "mean_last",
                axis: 0,
                rank: 0,
            });
        }
        let k = shape[shape.len() - 1];
        let out_shape = shape[..shape.len() - 1].to_vec();
        let data = t.data().chunks(k).map(|c| c.iter().sum::<f64>() / k as f64).collect();
        self.push("mean_last", Tensor::from_parts(out_shape, data), Op::MeanLast(a), &[a])
    }

    /// `a · b` over the two trailing axes, broadcasting leading batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, p) = (plan.m, plan.k, plan.p);
        let mut out = vec![0.0; numel(&plan.out_shape)];
        if plan.flat() {
            let rows = ta.numel() / k;
            kernels::gemm(rows, k, p, MatRef::rows(ta.data(), k), MatRef::rows(tb.data(), p), 0.0, &mut out);
        } else {
            for (i, &(oa, ob)) in plan.pairs.iter().enumerate() {
                kernels::gemm(
                    m,
                    k,
                    p,
                    MatRef::rows(&ta.data()[oa..oa + m * k], k),
                    MatRef::rows(&tb.data()[ob..ob + k * p], p),
                    0.0,
                    &mut out[i * m * p..(i + 1) * m * p],
                );
            }
        }
        self.push("matmul", Tensor::from_parts(plan.out_shape, out), Op::MatMul(a, b), &[a, b])
    }

    /// `x · weightᵀ + bias` for `x: [.., in]`, `weight: [out, in]`, `bias: [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        let mismatch = |rhs: Vec<usize>| TensorError::ShapeMismatch {
            op: "linear",
            lhs: xs.clone(),
            rhs,
        };
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[1] {
            return Err(mismatch(ws));
        }
        let (out_f, in_f) = (ws[0], ws[1]);
        if let Some(b) = bias {
            if self.shape(b) != [out_f] {
                return Err(mismatch(self.shape(b).to_vec()));
            }
        }
        let rows = numel(&xs) / in_f;
        let mut out = vec![0.0; rows * out_f];
        if let Some(b) = bias {
            for row in out.chunks_mut(out_f) {
                row.copy_from_slice(self.value(b).data());
            }
        }
        kernels::gemm(
            rows,
            in_f,
            out_f,
            MatRef::rows(self.value(x).data(), in_f),
            MatRef::transposed(self.value(weight).data(), in_f),
            if bias.is_some() { 1.0 } else { 0.0 },
            &mut out,
        );
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = out_f;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push("linear", Tensor::from_parts(shape, out), Op::Linear { x, weight, bias }, &inputs)
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() < 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose_last2",
                shape: t.shape().to_vec(),
                reason: "rank must be at least 2".into(),
            });
        }
        let (data, shape) = kernels::transpose_last2(t.data(), t.shape());
        self.push("transpose_last2", Tensor::from_parts(shape, data), Op::TransposeLast2(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        self.push("reshape", t, Op::Reshape(a), &[a])
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let rank = t.rank();
        let mut seen = vec![false; rank];
        for &ax in axes {
            if ax >= rank || std::mem::replace(&mut seen[ax], true) {
                return Err(TensorError::InvalidShape {
                    op: "permute",
                    shape: t.shape().to_vec(),
                    reason: format!("{axes:?} is not a permutation of {rank} axes"),
                });
            }
        }
        if axes.len() != rank {
            return Err(TensorError::InvalidShape {
                op: "permute",
                shape: t.shape().to_vec(),
                reason: format!("{axes:?} is not a permutation of {rank} axes"),
            });
        }
        let (data, shape) = kernels::permute(t.data(), t.shape(), axes);
        self.push("permute", Tensor::from_parts(shape, data), Op::Permute(a, axes.to_vec()), &[a])
    }

    /// Broadcasts `a` to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if kernels::broadcast_shape(t.shape(), shape).as_deref() != Some(shape) {
            return Err(TensorError::ShapeMismatch {
                op: "expand",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let strides = kernels::broadcast_strides(t.shape(), shape);
        let src = t.data();
        let mut out = vec![0.0; numel(shape)];
        kernels::walk1(shape, &strides, |i, o| out[i] = src[o]);
        self.push("expand", Tensor::from_parts(shape.to_vec(), out), Op::Expand(a), &[a])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| TensorError::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Row concatenation: joins along the second-to-last axis.
    pub fn concat_rows(&mut self, inputs: &[Var]) -> Result<Var> {
        let rank = inputs.first().map_or(0, |&v| self.shape(v).len());
        if rank < 2 {
            return Err(TensorError::Axis {
                op: "concat_rows",
                axis: 0,
                rank,
            });
        }
        self.concat(inputs, rank - 2)
    }

    /// The slice `start..start + len` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "narrow",
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::InvalidShape {
                op: "narrow",
                shape,
                reason: format!("range {start}..{} outside axis {axis}", start + len),
            });
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push("narrow", Tensor::from_parts(out_shape, out), Op::Narrow { x, axis, start }, &[x])
    }

    /// Index `index` of `axis`, with the axis removed.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let n = self.narrow(x, axis, index, 1)?;
        let mut shape = self.shape(n).to_vec();
        shape.remove(axis);
        self.reshape(n, &shape)
    }

    /// Row `row` of the second-to-last axis, e.g. the token row of `[n, seq, D]`.
    pub fn slice_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(TensorError::Axis {
                op: "slice_row",
                axis: 0,
                rank,
            });
        }
        self.select(x, rank - 2, row)
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(TensorError::Axis {
                op: "softmax_rows",
                axis: 0,
                rank: 0,
            });
        }
        if !t.is_finite() {
            return Err(TensorError::NonFinite { op: "softmax_rows input" });
        }
        let m = t.shape()[t.rank() - 1];
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(m) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let shape = t.shape().to_vec();
        self.push("softmax_rows", Tensor::from_parts(shape, out), Op::Softmax(x), &[x])
    }

    /// Normalizes each row of the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().ok_or(TensorError::Axis {
            op: "layer_norm",
            axis: 0,
            rank: 0,
        })?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: t.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = t.numel() / d;
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = t.shape().to_vec();
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Cross-correlation of `x: [N, C, H, W]` with `weight: [O, C, KH, KW]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (n, o) = (xs[0], ws[0]);
        let geom = ConvGeometry::new(xs[1], xs[2], xs[3], ws[2], ws[3], stride, padding).ok_or_else(|| {
            TensorError::InvalidShape {
                op: "conv2d",
                shape: xs.clone(),
                reason: format!("kernel {}x{} larger than padded input (padding {padding})", ws[2], ws[3]),
            }
        })?;
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: ws,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let (in_len, out_len, patch) = (geom.channels * geom.height * geom.width, geom.out_len(), geom.patch_len());
        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let mut out = vec![0.0; n * o * out_len];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; patch * out_len] };
        for s in 0..n {
            let sample = &xv[s * in_len..(s + 1) * in_len];
            let dst = &mut out[s * o * out_len..(s + 1) * o * out_len];
            if let Some(b) = bias {
                for (row, &bv) in dst.chunks_mut(out_len).zip(self.value(b).data()) {
                    row.fill(bv);
                }
            }
            let col_src: &[f64] = if geom.is_pointwise() {
                sample
            } else {
                kernels::im2col(&geom, sample, &mut cols);
                &cols
            };
            kernels::gemm(
                o,
                patch,
                out_len,
                MatRef::rows(wv, patch),
                MatRef::rows(col_src, out_len),
                if bias.is_some() { 1.0 } else { 0.0 },
                dst,
            );
        }
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push(
            "conv2d",
            Tensor::from_parts(vec![n, o, geom.out_h, geom.out_w], out),
            Op::Conv2d {
                x,
                weight,
                bias,
                stride,
                padding,
            },
            &inputs,
        )
    }

    fn check_batch_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(TensorError::InvalidShape {
                op: "batch_norm",
                shape: xs.to_vec(),
                reason: "expected [N, C, H, W]".into(),
            });
        }
        let c = xs[1];
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm",
                    lhs: xs.to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        Ok((xs[0], c, xs[2] * xs[3]))
    }

    /// Batch normalization with batch statistics. Returns the statistics so
    /// the caller can update running estimates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c, hw) = self.check_batch_norm(x, gamma, beta)?;
        let xv = self.value(x).data();
        let count = (n * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for s in 0..n {
            for ch in 0..c {
                let plane = &xv[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                mean[ch] += plane.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for s in 0..n {
            for ch in 0..c {
                let plane = &xv[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                var[ch] += plane.iter().map(|v| (v - mean[ch]) * (v - mean[ch])).sum::<f64>();
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / count).collect();
        let unbiased: Vec<f64> = var.iter().map(|v| if count > 1.0 { v / (count - 1.0) } else { 0.0 }).collect();
        let rstd: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.batch_norm_apply(x, gamma, beta, &mean, &rstd, true, (n, c, hw))?;
        Ok((out, BatchStats { mean, var: unbiased }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let dims = self.check_batch_norm(x, gamma, beta)?;
        if mean.len() != dims.1 || var.len() != dims.1 {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm running stats",
                lhs: vec![dims.1],
                rhs: vec![mean.len(), var.len()],
            });
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.batch_norm_apply(x, gamma, beta, mean, &rstd, false, dims)
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        rstd: &[f64],
        batch_stats: bool,
        (n, c, hw): (usize, usize, usize),
    ) -> Result<Var> {
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    let h = (xv[i] - mean[ch]) * rstd[ch];
                    xhat[i] = h;
                    out[i] = h * g[ch] + b[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            "batch_norm",
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd: rstd.to_vec(),
                batch_stats,
            },
            &[x, gamma, beta],
        )
    }

    /// Max pooling over `[N, C, H, W]`; padded cells never win and ties go to
    /// the first index in row-major window order.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::InvalidShape {
                op: "max_pool2d",
                shape: xs,
                reason: "expected [N, C, H, W]".into(),
            });
        }
        if 2 * padding > kernel {
            return Err(TensorError::InvalidShape {
                op: "max_pool2d",
                shape: xs,
                reason: format!("padding {padding} exceeds half of kernel {kernel}"),
            });
        }
        let geom = ConvGeometry::new(1, xs[2], xs[3], kernel, kernel, stride, padding).ok_or_else(|| {
            TensorError::InvalidShape {
                op: "max_pool2d",
                shape: xs.clone(),
                reason: format!("window {kernel} larger than padded input"),
            }
        })?;
        let (h, w) = (xs[2], xs[3]);
        let planes = xs[0] * xs[1];
        let xv = self.value(x).data();
        let out_len = geom.out_len();
        let mut out = vec![0.0; planes * out_len];
        let mut argmax = vec![0usize; planes * out_len];
        for p in 0..planes {
            let base = p * h * w;
            for oh in 0..geom.out_h {
                for ow in 0..geom.out_w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for kh in 0..kernel {
                        let Some(y) = (oh * stride + kh).checked_sub(padding).filter(|&y| y < h) else { continue };
                        for kw in 0..kernel {
                            let Some(xx) = (ow * stride + kw).checked_sub(padding).filter(|&v| v < w) else { continue };
                            let i = base + y * w + xx;
                            if best_i == usize::MAX || xv[i] > best {
                                best = xv[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = p * out_len + oh * geom.out_w + ow;
                    out[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
        self.push(
            "max_pool2d",
            Tensor::from_parts(vec![xs[0], xs[1], geom.out_h, geom.out_w], out),
            Op::MaxPool { x, argmax },
            &[x],
        )
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}
