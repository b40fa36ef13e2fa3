//! Vector-Jacobian products for each recorded op.

use super::ops::{gelu_grad, MatmulPlan};
use super::{Node, Op, Var};
use crate::kernels::{self, ConvGeometry, MatRef};
use crate::tensor::{numel, Result, Tensor};

/// Adds `data` (shaped like `v`) into the gradient slot of `v`.
fn acc(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>) {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(&data) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(Tensor::from_parts(node.value.shape().to_vec(), data)),
    }
}

fn wants(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn val(nodes: &[Node], v: Var) -> &Tensor {
    &nodes[v.0].value
}

pub(super) fn propagate(nodes: &[Node], i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let gd = g.data();
    let gs = g.shape();
    match &nodes[i].op {
        Op::Leaf { .. } => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let negate = matches!(nodes[i].op, Op::Sub(..));
            if wants(nodes, *a) {
                acc(nodes, grads, *a, kernels::reduce_to_shape(gd, gs, val(nodes, *a).shape()));
            }
            if wants(nodes, *b) {
                let mut gb = kernels::reduce_to_shape(gd, gs, val(nodes, *b).shape());
                if negate {
                    gb.iter_mut().for_each(|v| *v = -*v);
                }
                acc(nodes, grads, *b, gb);
            }
        }
        Op::Mul(a, b) => {
            for (this, other) in [(*a, *b), (*b, *a)] {
                if wants(nodes, this) {
                    let o = val(nodes, other);
                    let prod = kernels::broadcast_binary(gd, gs, o.data(), o.shape(), gs, |x, y| x * y);
                    acc(nodes, grads, this, kernels::reduce_to_shape(&prod, gs, val(nodes, this).shape()));
                }
            }
        }
        Op::Scale(a, c) => acc(nodes, grads, *a, gd.iter().map(|v| v * c).collect()),
        Op::MatMul(a, b) => matmul_backward(nodes, *a, *b, g, grads)?,
        Op::Linear { x, weight, bias } => {
            let w = val(nodes, *weight);
            let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
            let rows = gd.len() / out_f;
            if wants(nodes, *x) {
                let mut dx = vec![0.0; rows * in_f];
                kernels::gemm(rows, out_f, in_f, MatRef::rows(gd, out_f), MatRef::rows(w.data(), in_f), 0.0, &mut dx);
                acc(nodes, grads, *x, dx);
            }
            if wants(nodes, *weight) {
                let mut dw = vec![0.0; out_f * in_f];
                kernels::gemm(
                    out_f,
                    rows,
                    in_f,
                    MatRef::transposed(gd, out_f),
                    MatRef::rows(val(nodes, *x).data(), in_f),
                    0.0,
                    &mut dw,
                );
                acc(nodes, grads, *weight, dw);
            }
            if let Some(b) = bias.filter(|&b| wants(nodes, b)) {
                let mut db = vec![0.0; out_f];
                for row in gd.chunks(out_f) {
                    db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                }
                acc(nodes, grads, b, db);
            }
        }
        Op::Relu(a) => {
            let x = val(nodes, *a).data();
            acc(nodes, grads, *a, gd.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect());
        }
        Op::Gelu(a) => {
            let x = val(nodes, *a).data();
            acc(nodes, grads, *a, gd.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect());
        }
        Op::Abs(a) => {
            let x = val(nodes, *a).data();
            let sign = |x: f64| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
            acc(nodes, grads, *a, gd.iter().zip(x).map(|(g, &x)| g * sign(x)).collect());
        }
        Op::Sum(a) => acc(nodes, grads, *a, vec![gd[0]; val(nodes, *a).numel()]),
        Op::Mean(a) => {
            let n = val(nodes, *a).numel();
            acc(nodes, grads, *a, vec![gd[0] / n as f64; n]);
        }
        Op::MeanLast(a) => {
            let t = val(nodes, *a);
            let k = *t.shape().last().unwrap();
            let mut out = Vec::with_capacity(t.numel());
            for &gv in gd {
                out.extend(std::iter::repeat_n(gv / k as f64, k));
            }
            acc(nodes, grads, *a, out);
        }
        Op::TransposeLast2(a) => acc(nodes, grads, *a, kernels::transpose_last2(gd, gs).0),
        Op::Reshape(a) => acc(nodes, grads, *a, gd.to_vec()),
        Op::Permute(a, axes) => {
            let mut inverse = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inverse[ax] = i;
            }
            acc(nodes, grads, *a, kernels::permute(gd, gs, &inverse).0);
        }
        Op::Expand(a) => acc(nodes, grads, *a, kernels::reduce_to_shape(gd, gs, val(nodes, *a).shape())),
        Op::Concat { inputs, axis } => {
            let outer = numel(&gs[..*axis]);
            let inner = numel(&gs[axis + 1..]);
            let row = gs[*axis] * inner;
            let mut offset = 0;
            for &v in inputs {
                let chunk = val(nodes, v).shape()[*axis] * inner;
                if wants(nodes, v) {
                    let mut part = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        part.extend_from_slice(&gd[o * row + offset..o * row + offset + chunk]);
                    }
                    acc(nodes, grads, v, part);
                }
                offset += chunk;
            }
        }
        Op::Narrow { x, axis, start } => {
            let xs = val(nodes, *x).shape();
            let outer = numel(&xs[..*axis]);
            let inner = numel(&xs[axis + 1..]);
            let len = gs[*axis];
            let mut dx = vec![0.0; numel(xs)];
            for o in 0..outer {
                let dst = (o * xs[*axis] + start) * inner;
                dx[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            acc(nodes, grads, *x, dx);
        }
        Op::Softmax(a) => {
            let y = nodes[i].value.data();
            let m = *gs.last().unwrap();
            let mut dx = vec![0.0; y.len()];
            for ((yr, gr), dr) in y.chunks(m).zip(gd.chunks(m)).zip(dx.chunks_mut(m)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..m {
                    dr[j] = yr[j] * (gr[j] - dot);
                }
            }
            acc(nodes, grads, *a, dx);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gam = val(nodes, *gamma).data();
            let d = gam.len();
            if wants(nodes, *gamma) || wants(nodes, *beta) {
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for (gr, hr) in gd.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        dg[j] += gr[j] * hr[j];
                        db[j] += gr[j];
                    }
                }
                acc(nodes, grads, *gamma, dg);
                acc(nodes, grads, *beta, db);
            }
            if wants(nodes, *x) {
                let mut dx = vec![0.0; gd.len()];
                let inv_d = 1.0 / d as f64;
                for (r, ((gr, hr), dr)) in gd.chunks(d).zip(xhat.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                    let mut sum = 0.0;
                    let mut sum_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        sum += dh;
                        sum_h += dh * hr[j];
                    }
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        dr[j] = rstd[r] * (dh - inv_d * sum - hr[j] * inv_d * sum_h);
                    }
                }
                acc(nodes, grads, *x, dx);
            }
        }
        Op::Conv2d {
            x,
            weight,
            bias,
            stride,
            padding,
        } => conv_backward(nodes, *x, *weight, *bias, *stride, *padding, g, grads),
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
            batch_stats,
        } => {
            let xs = val(nodes, *x).shape();
            let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
            let gam = val(nodes, *gamma).data();
            let mut sum_g = vec![0.0; c];
            let mut sum_gh = vec![0.0; c];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    for k in base..base + hw {
                        sum_g[ch] += gd[k];
                        sum_gh[ch] += gd[k] * xhat[k];
                    }
                }
            }
            if wants(nodes, *x) {
                let count = (n * hw) as f64;
                let mut dx = vec![0.0; gd.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        let scale = gam[ch] * rstd[ch];
                        for k in base..base + hw {
                            dx[k] = if *batch_stats {
                                scale * (gd[k] - sum_g[ch] / count - xhat[k] * sum_gh[ch] / count)
                            } else {
                                scale * gd[k]
                            };
                        }
                    }
                }
                acc(nodes, grads, *x, dx);
            }
            acc(nodes, grads, *gamma, sum_gh);
            acc(nodes, grads, *beta, sum_g);
        }
        Op::MaxPool { x, argmax } => {
            let mut dx = vec![0.0; val(nodes, *x).numel()];
            for (o, &src) in argmax.iter().enumerate() {
                dx[src] += gd[o];
            }
            acc(nodes, grads, *x, dx);
        }
    }
    Ok(())
}

fn matmul_backward(nodes: &[Node], a: Var, b: Var, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let (ta, tb) = (val(nodes, a), val(nodes, b));
    let plan = MatmulPlan::new(ta.shape(), tb.shape())?;
    let (m, k, p) = (plan.m, plan.k, plan.p);
    let gd = g.data();
    if plan.flat() {
        let rows = ta.numel() / k;
        if wants(nodes, a) {
            let mut da = vec![0.0; ta.numel()];
            kernels::gemm(rows, p, k, MatRef::rows(gd, p), MatRef::transposed(tb.data(), p), 0.0, &mut da);
            acc(nodes, grads, a, da);
        }
        if wants(nodes, b) {
            let mut db = vec![0.0; tb.numel()];
            kernels::gemm(k, rows, p, MatRef::transposed(ta.data(), k), MatRef::rows(gd, p), 0.0, &mut db);
            acc(nodes, grads, b, db);
        }
        return Ok(());
    }
    if wants(nodes, a) {
        let mut da = vec![0.0; ta.numel()];
        for (i, &(oa, ob)) in plan.pairs.iter().enumerate() {
            kernels::gemm(
                m,
                p,
                k,
                MatRef::rows(&gd[i * m * p..(i + 1) * m * p], p),
                MatRef::transposed(&tb.data()[ob..ob + k * p], p),
                1.0,
                &mut da[oa..oa + m * k],
            );
        }
        acc(nodes, grads, a, da);
    }
    if wants(nodes, b) {
        let mut db = vec![0.0; tb.numel()];
        for (i, &(oa, ob)) in plan.pairs.iter().enumerate() {
            kernels::gemm(
                k,
                m,
                p,
                MatRef::transposed(&ta.data()[oa..oa + m * k], k),
                MatRef::rows(&gd[i * m * p..(i + 1) * m * p], p),
                1.0,
                &mut db[ob..ob + k * p],
            );
        }
        acc(nodes, grads, b, db);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    nodes: &[Node],
    x: Var,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
    g: &Tensor,
    grads: &mut [Option<Tensor>],
) {
    let (tx, tw) = (val(nodes, x), val(nodes, weight));
    let (xs, ws) = (tx.shape(), tw.shape());
    let geom = ConvGeometry::new(xs[1], xs[2], xs[3], ws[2], ws[3], stride, padding)
        .expect("geometry was validated in the forward pass");
    let (n, o) = (xs[0], ws[0]);
    let (in_len, out_len, patch) = (geom.channels * geom.height * geom.width, geom.out_len(), geom.patch_len());
    let gd = g.data();
    let (want_x, want_w) = (wants(nodes, x), wants(nodes, weight));
    let mut dw = vec![0.0; if want_w { tw.numel() } else { 0 }];
    let mut dx = vec![0.0; if want_x { tx.numel() } else { 0 }];
    let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { patch * out_len }];
    let mut dcols = vec![0.0; if want_x && !geom.is_pointwise() { patch * out_len } else { 0 }];
    for s in 0..n {
        let gs = &gd[s * o * out_len..(s + 1) * o * out_len];
        let sample = &tx.data()[s * in_len..(s + 1) * in_len];
        if want_w {
            let col_src: &[f64] = if geom.is_pointwise() {
                sample
            } else {
                kernels::im2col(&geom, sample, &mut cols);
                &cols
            };
            kernels::gemm(o, out_len, patch, MatRef::rows(gs, out_len), MatRef::transposed(col_src, out_len), 1.0, &mut dw);
        }
        if want_x {
            let dst = &mut dx[s * in_len..(s + 1) * in_len];
            if geom.is_pointwise() {
                kernels::gemm(patch, o, out_len, MatRef::transposed(tw.data(), patch), MatRef::rows(gs, out_len), 1.0, dst);
            } else {
                kernels::gemm(patch, o, out_len, MatRef::transposed(tw.data(), patch), MatRef::rows(gs, out_len), 0.0, &mut dcols);
                kernels::col2im_add(&geom, &dcols, dst);
            }
        }
    }
    if want_w {
        acc(nodes, grads, weight, dw);
    }
    if want_x {
        acc(nodes, grads, x, dx);
    }
    if let Some(b) = bias.filter(|&b| wants(nodes, b)) {
        let mut db = vec![0.0; o];
        for s in 0..n {
            for (ch, d) in db.iter_mut().enumerate() {
                let base = (s * o + ch) * out_len;
                *d += gd[base..base + out_len].iter().sum::<f64>();
            }
        }
        acc(nodes, grads, b, db);
    }
}
