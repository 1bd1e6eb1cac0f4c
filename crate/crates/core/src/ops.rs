//! Forward and backward kernels over plain [`Tensor`]s.
//!
//! Spatial operations take `B×C×H×W` tensors. Convolution follows the
//! cross-correlation convention (no kernel flip) with replicate borders.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{Grouping, Kernel2D, Padding, Tensor};

/// Same-size dilated cross-correlation with replicate borders.
pub fn conv2d(input: &Tensor, kernel: &Kernel2D, padding: Padding) -> Result<Tensor> {
    let Padding::Replicate = padding;
    conv2d_raw(input, kernel.weights(), kernel.dilation(), kernel.grouping())
}

struct ConvGeometry {
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    height: usize,
    width: usize,
    size: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

impl ConvGeometry {
    fn new(input: &Tensor, weights: &Tensor, dilation: usize, grouping: Grouping) -> Result<Self> {
        let [batch, in_ch, height, width] = input.dims4("conv2d")?;
        let [wo, wi, size, kw] = weights.dims4("conv2d")?;
        if size != kw || size % 2 == 0 {
            return Err(Error::invalid("conv2d", "kernel must be square with odd size"));
        }
        if dilation == 0 {
            return Err(Error::invalid("conv2d", "dilation must be at least 1"));
        }
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            left: input.shape().to_vec(),
            right: weights.shape().to_vec(),
        };
        let out_ch = match grouping {
            Grouping::Shared => {
                if wo != 1 || wi != 1 {
                    return Err(mismatch());
                }
                in_ch
            }
            Grouping::Depthwise => {
                if wo != in_ch || wi != 1 {
                    return Err(mismatch());
                }
                in_ch
            }
            Grouping::Dense => {
                if wi != in_ch {
                    return Err(mismatch());
                }
                wo
            }
        };
        let half = (size / 2) as isize;
        let r = dilation as isize;
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        // offset-major lookup tables of clamped source coordinates
        let mut rows = Vec::with_capacity(size * height);
        for a in 0..size as isize {
            for y in 0..height as isize {
                rows.push(clamp(y + (a - half) * r, height));
            }
        }
        let mut cols = Vec::with_capacity(size * width);
        for b in 0..size as isize {
            for x in 0..width as isize {
                cols.push(clamp(x + (b - half) * r, width));
            }
        }
        Ok(Self {
            batch,
            in_ch,
            out_ch,
            height,
            width,
            size,
            rows,
            cols,
        })
    }

    /// `(output channel, input channel, weight offset)` triples.
    fn connections(&self, grouping: Grouping) -> Vec<(usize, usize, usize)> {
        let kk = self.size * self.size;
        match grouping {
            Grouping::Shared => (0..self.in_ch).map(|c| (c, c, 0)).collect(),
            Grouping::Depthwise => (0..self.in_ch).map(|c| (c, c, c * kk)).collect(),
            Grouping::Dense => {
                let mut v = Vec::with_capacity(self.out_ch * self.in_ch);
                for o in 0..self.out_ch {
                    for i in 0..self.in_ch {
                        v.push((o, i, (o * self.in_ch + i) * kk));
                    }
                }
                v
            }
        }
    }
}

/// Convolution with explicit weights; see [`Kernel2D::new`] for weight layouts.
pub fn conv2d_raw(input: &Tensor, weights: &Tensor, dilation: usize, grouping: Grouping) -> Result<Tensor> {
    let g = ConvGeometry::new(input, weights, dilation, grouping)?;
    let (h, w, k) = (g.height, g.width, g.size);
    let plane = h * w;
    let src = input.data();
    let wt = weights.data();
    let mut out = vec![0.0; g.batch * g.out_ch * plane];
    for b in 0..g.batch {
        for &(o, i, woff) in &g.connections(grouping) {
            let inp = &src[(b * g.in_ch + i) * plane..][..plane];
            let dst = &mut out[(b * g.out_ch + o) * plane..][..plane];
            for a in 0..k {
                let rows = &g.rows[a * h..][..h];
                for bb in 0..k {
                    let coef = wt[woff + a * k + bb];
                    if coef == 0.0 {
                        continue;
                    }
                    let cols = &g.cols[bb * w..][..w];
                    for (y, &sy) in rows.iter().enumerate() {
                        let srow = &inp[sy * w..][..w];
                        let drow = &mut dst[y * w..][..w];
                        for (d, &sx) in drow.iter_mut().zip(cols) {
                            *d += coef * srow[sx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.batch, g.out_ch, h, w], out)
}

/// Gradients of [`conv2d_raw`] with respect to its input and weights.
pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    dilation: usize,
    grouping: Grouping,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let g = ConvGeometry::new(input, weights, dilation, grouping)?;
    let (h, w, k) = (g.height, g.width, g.size);
    let plane = h * w;
    let src = input.data();
    let wt = weights.data();
    let go = grad_out.data();
    let mut gin = vec![0.0; src.len()];
    let mut gw = vec![0.0; wt.len()];
    for b in 0..g.batch {
        for &(o, i, woff) in &g.connections(grouping) {
            let inp = &src[(b * g.in_ch + i) * plane..][..plane];
            let up = &go[(b * g.out_ch + o) * plane..][..plane];
            let gi = &mut gin[(b * g.in_ch + i) * plane..][..plane];
            for a in 0..k {
                let rows = &g.rows[a * h..][..h];
                for bb in 0..k {
                    let coef = wt[woff + a * k + bb];
                    let cols = &g.cols[bb * w..][..w];
                    let mut acc = 0.0;
                    for (y, &sy) in rows.iter().enumerate() {
                        let urow = &up[y * w..][..w];
                        for (x, &sx) in cols.iter().enumerate() {
                            let u = urow[x];
                            acc += u * inp[sy * w + sx];
                            gi[sy * w + sx] += coef * u;
                        }
                    }
                    gw[woff + a * k + bb] += acc;
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gin)?,
        Tensor::new(weights.shape().to_vec(), gw)?,
    ))
}

/// Bin `[start, end)` for output cell `i` of `out` cells over `len` inputs.
#[inline]
pub fn pool_bin(i: usize, out: usize, len: usize) -> (usize, usize) {
    (i * len / out, (i + 1) * len / out)
}

fn check_pool(input: &Tensor, out_h: usize, out_w: usize) -> Result<[usize; 4]> {
    let dims = input.dims4("adaptive_avg_pool")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("adaptive_avg_pool", "output dimensions must be positive"));
    }
    if out_h > dims[2] || out_w > dims[3] {
        return Err(Error::invalid(
            "adaptive_avg_pool",
            alloc::format!("cannot upsample {}×{} to {out_h}×{out_w}", dims[2], dims[3]),
        ));
    }
    Ok(dims)
}

/// Adaptive average pooling with floor bin boundaries.
pub fn adaptive_avg_pool(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [b, c, h, w] = check_pool(input, out_h, out_w)?;
    let src = input.data();
    let mut out = Vec::with_capacity(b * c * out_h * out_w);
    for plane in src.chunks_exact(h * w) {
        for i in 0..out_h {
            let (y0, y1) = pool_bin(i, out_h, h);
            for j in 0..out_w {
                let (x0, x1) = pool_bin(j, out_w, w);
                let mut s = 0.0;
                for y in y0..y1 {
                    s += plane[y * w + x0..y * w + x1].iter().sum::<f64>();
                }
                out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    Tensor::new(vec![b, c, out_h, out_w], out)
}

pub fn adaptive_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [b, c, oh, ow] = grad_out.dims4("adaptive_avg_pool")?;
    let (h, w) = (input_shape[2], input_shape[3]);
    let mut gin = vec![0.0; b * c * h * w];
    for (plane, up) in gin.chunks_exact_mut(h * w).zip(grad_out.data().chunks_exact(oh * ow)) {
        for i in 0..oh {
            let (y0, y1) = pool_bin(i, oh, h);
            for j in 0..ow {
                let (x0, x1) = pool_bin(j, ow, w);
                let share = up[i * ow + j] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for v in &mut plane[y * w + x0..y * w + x1] {
                        *v += share;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gin)
}

/// `(outer, axis length, inner)` split of a shape around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid(op, alloc::format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Max-stabilised softmax along `axis`.
pub fn softmax_over_axis(input: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(input.shape(), axis, "softmax")?;
    let src = input.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..n {
                let e = math::exp(src[idx(k)] - max);
                out[idx(k)] = e;
                z += e;
            }
            for k in 0..n {
                out[idx(k)] /= z;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Softmax backward from its output: `g_in = y ⊙ (g − Σ g⊙y)`.
pub fn softmax_backward(output: &Tensor, axis: usize, grad_out: &Tensor) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(output.shape(), axis, "softmax")?;
    let y = output.data();
    let g = grad_out.data();
    let mut gin = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let dot: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
            for k in 0..n {
                gin[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
            }
        }
    }
    Tensor::new(output.shape().to_vec(), gin)
}

/// Mean along `axis`, keeping it with length one.
pub fn mean_axis(input: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(input.shape(), axis, "mean_axis")?;
    let src = input.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for k in 0..n {
            for i in 0..inner {
                out[o * inner + i] += src[(o * n + k) * inner + i];
            }
        }
    }
    for v in &mut out {
        *v /= n as f64;
    }
    let mut shape = input.shape().to_vec();
    shape[axis] = 1;
    Tensor::new(shape, out)
}

/// Slice `index` along `axis`, keeping the axis with length one.
pub fn select(input: &Tensor, axis: usize, index: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(input.shape(), axis, "select")?;
    if index >= n {
        return Err(Error::invalid("select", alloc::format!("index {index} out of range {n}")));
    }
    let src = input.data();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        out.extend_from_slice(&src[(o * n + index) * inner..][..inner]);
    }
    let mut shape = input.shape().to_vec();
    shape[axis] = 1;
    Tensor::new(shape, out)
}

/// Divides every fibre along `axis` by its Euclidean norm.
pub fn l2_normalize(input: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(input.shape(), axis, "l2_normalize")?;
    let src = input.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let norm = math::sqrt((0..n).map(|k| src[idx(k)] * src[idx(k)]).sum());
            if norm == 0.0 {
                return Err(Error::invalid("l2_normalize", "cannot normalise a zero vector"));
            }
            for k in 0..n {
                out[idx(k)] = src[idx(k)] / norm;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Backward of [`l2_normalize`]: `g_in = (g − y (g·y)) / ‖x‖`.
pub fn l2_normalize_backward(input: &Tensor, output: &Tensor, axis: usize, grad_out: &Tensor) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(input.shape(), axis, "l2_normalize")?;
    let (x, y, g) = (input.data(), output.data(), grad_out.data());
    let mut gin = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let norm = math::sqrt((0..n).map(|k| x[idx(k)] * x[idx(k)]).sum());
            let dot: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
            for k in 0..n {
                gin[idx(k)] = (g[idx(k)] - y[idx(k)] * dot) / norm;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), gin)
}

/// Result shape of broadcasting two same-rank shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    let mismatch = || Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    };
    if a.len() != b.len() {
        return Err(mismatch());
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(mismatch()),
        })
        .collect()
}

/// For each flat index of `out`, the flat index into a tensor of shape
/// `src` broadcast to `out`.
pub(crate) fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    if src == out {
        return (0..n).collect();
    }
    let rank = out.len();
    let mut src_strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        src_strides[d] = if src[d] == 1 { 0 } else { acc };
        acc *= src[d];
    }
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    for _ in 0..n {
        idx.push(counter.iter().zip(&src_strides).map(|(c, s)| c * s).sum());
        for d in (0..rank).rev() {
            counter[d] += 1;
            if counter[d] < out[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    idx
}

/// Broadcasting elementwise binary operation.
pub fn broadcast_zip(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let shape = broadcast_shape(a.shape(), b.shape(), op)?;
    let ia = broadcast_index(a.shape(), &shape);
    let ib = broadcast_index(b.shape(), &shape);
    let (da, db) = (a.data(), b.data());
    let data = ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect();
    Tensor::new(shape, data)
}

/// Sums a broadcast gradient back down to `src` shape.
pub(crate) fn reduce_to(grad: &[f64], index: &[usize], src: &[usize]) -> Result<Tensor> {
    let mut out = vec![0.0; src.iter().product()];
    for (&g, &i) in grad.iter().zip(index) {
        out[i] += g;
    }
    Tensor::new(src.to_vec(), out)
}
