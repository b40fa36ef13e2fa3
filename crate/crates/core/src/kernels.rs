//! Raw numeric kernels over flat buffers. Nothing here records gradients.

use crate::tensor::{contiguous_strides, numel};

/// A strided read-only matrix view for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    /// Row-major `rows x cols` matrix.
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major matrix that has `cols` columns.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = (rows - 1) * self.row_stride + (cols - 1) * self.col_stride;
        assert!(last < self.data.len(), "matrix view out of bounds");
    }
}

/// `out = beta * out + a * b` where `a` is `m x k`, `b` is `k x n` and `out`
/// is a row-major `m x n` buffer.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, beta: f64, out: &mut [f64]) {
    a.check(m, k);
    b.check(k, n);
    assert!(out.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every view was bounds-checked above against its extents and
    // strides, and `out` holds at least `m * n` elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// ── Broadcasting ─────────────────────────────────────────────────────────

/// Numpy-style broadcast of two shapes, aligned at the trailing axis.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` expressed in the index space of `out`, with zeros for
/// broadcast axes. `shape` must broadcast to `out`.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// Visits every element of `shape` in row-major order, passing the flat
/// output index and the matching offset for each of the two stride sets.
pub(crate) fn walk2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total = numel(shape);
    if shape.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = shape.len();
    let inner = shape[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut flat = 0;
    while flat < total {
        for j in 0..inner {
            f(flat + j, oa + j * ia, ob + j * ib);
        }
        flat += inner;
        // Advance the outer odometer.
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn walk1(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    walk2(shape, strides, strides, |i, o, _| f(i, o));
}

/// Applies `f` elementwise over the broadcast of `a` and `b`.
pub(crate) fn broadcast_binary(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let n = numel(out_shape);
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    if a_shape == out_shape && is_suffix(b_shape, out_shape) {
        let m = b.len();
        return a.iter().enumerate().map(|(i, &x)| f(x, b[i % m])).collect();
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let mut out = vec![0.0; n];
    walk2(out_shape, &sa, &sb, |i, oa, ob| out[i] = f(a[oa], b[ob]));
    out
}

/// Sums a gradient of `grad_shape` down to `target`, undoing a broadcast.
pub(crate) fn reduce_to_shape(grad: &[f64], grad_shape: &[usize], target: &[usize]) -> Vec<f64> {
    if grad_shape == target {
        return grad.to_vec();
    }
    let mut out = vec![0.0; numel(target)];
    if is_suffix(target, grad_shape) {
        let m = out.len();
        for chunk in grad.chunks(m) {
            for (o, g) in out.iter_mut().zip(chunk) {
                *o += g;
            }
        }
        return out;
    }
    let st = broadcast_strides(target, grad_shape);
    walk1(grad_shape, &st, |i, o| out[o] += grad[i]);
    out
}

/// True when `short` equals the trailing axes of `long` (ignoring leading 1s).
fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    let trimmed: &[usize] = {
        let first = short.iter().position(|&d| d != 1).unwrap_or(short.len());
        &short[first..]
    };
    trimmed.len() <= long.len() && long[long.len() - trimmed.len()..] == *trimmed
}

// ── Layout ───────────────────────────────────────────────────────────────

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub(crate) fn permute(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = vec![0.0; data.len()];
    walk1(&out_shape, &in_strides, |i, o| out[i] = data[o]);
    (out, out_shape)
}

/// Swaps the two trailing axes.
pub(crate) fn transpose_last2(data: &[f64], shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let r = shape.len();
    let (m, n) = (shape[r - 2], shape[r - 1]);
    let mut out = vec![0.0; data.len()];
    let mut out_shape = shape.to_vec();
    out_shape.swap(r - 2, r - 1);
    for (src, dst) in data.chunks(m * n).zip(out.chunks_mut(m * n)) {
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    (out, out_shape)
}

// ── Convolution ──────────────────────────────────────────────────────────

/// Geometry of a single-sample 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// `None` when the kernel does not fit the padded input.
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        let (ph, pw) = (height + 2 * padding, width + 2 * padding);
        if kernel_h > ph || kernel_w > pw || stride == 0 {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (ph - kernel_h) / stride + 1,
            out_w: (pw - kernel_w) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// A 1x1 stride-1 unpadded kernel reads the input buffer as its own column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    /// Source pixel for kernel tap `(kh, kw)` at output position `(oh, ow)`.
    #[inline]
    fn source(&self, oh: usize, ow: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let y = (oh * self.stride + kh).checked_sub(self.padding)?;
        let x = (ow * self.stride + kw).checked_sub(self.padding)?;
        (y < self.height && x < self.width).then_some((y, x))
    }
}

/// Unfolds one sample `[C, H, W]` into a `[C*KH*KW, OH*OW]` column matrix.
pub(crate) fn im2col(g: &ConvGeometry, input: &[f64], cols: &mut [f64]) {
    let plane = g.height * g.width;
    let out_len = g.out_len();
    for c in 0..g.channels {
        let src = &input[c * plane..(c + 1) * plane];
        for kh in 0..g.kernel_h {
            for kw in 0..g.kernel_w {
                let row = (c * g.kernel_h + kh) * g.kernel_w + kw;
                let dst = &mut cols[row * out_len..(row + 1) * out_len];
                for oh in 0..g.out_h {
                    for ow in 0..g.out_w {
                        dst[oh * g.out_w + ow] = match g.source(oh, ow, kh, kw) {
                            Some((y, x)) => src[y * g.width + x],
                            None => 0.0,
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto `[C, H, W]`.
pub(crate) fn col2im_add(g: &ConvGeometry, cols: &[f64], grad_input: &mut [f64]) {
    let plane = g.height * g.width;
    let out_len = g.out_len();
    for c in 0..g.channels {
        let dst = &mut grad_input[c * plane..(c + 1) * plane];
        for kh in 0..g.kernel_h {
            for kw in 0..g.kernel_w {
                let row = (c * g.kernel_h + kh) * g.kernel_w + kw;
                let src = &cols[row * out_len..(row + 1) * out_len];
                for oh in 0..g.out_h {
                    for ow in 0..g.out_w {
                        if let Some((y, x)) = g.source(oh, ow, kh, kw) {
                            dst[y * g.width + x] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}
