//! Batched forward/backward kernels on flat row-major buffers.
//!
//! Every reduction runs in a fixed loop order. The parallel path only splits
//! work across independent output chunks and runs the same per-chunk code as
//! the sequential path, so both produce bit-identical results.

use rayon::prelude::*;

use crate::tensor::Float;

fn for_each_chunk<F, G>(parallel: bool, buf: &mut [F], chunk: usize, f: G)
where
    F: Send,
    G: Fn(usize, &mut [F]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    if parallel {
        buf.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    } else {
        buf.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Geometry of a 2-D convolution over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    fn in_plane(&self) -> usize {
        self.height * self.width
    }

    fn kernel_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Input coordinate for output `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = o * self.stride + k;
        if pos < self.padding || pos - self.padding >= limit {
            None
        } else {
            Some(pos - self.padding)
        }
    }
}

/// Valid cross-correlation (no kernel flip). `x` is `[N, C_in, H, W]`,
/// `kernel` is `[C_out, C_in, kH, kW]`.
pub fn conv2d_forward<F: Float>(
    g: &ConvGeom,
    x: &[F],
    kernel: &[F],
    bias: &[F],
    parallel: bool,
) -> Vec<F> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let per_sample = g.out_channels * oh * ow;
    let mut out = vec![F::zero(); g.batch * per_sample];
    let sample_in = g.in_channels * g.in_plane();
    for_each_chunk(parallel, &mut out, per_sample, |n, out_n| {
        let xs = &x[n * sample_in..(n + 1) * sample_in];
        for co in 0..g.out_channels {
            let kc = &kernel[co * g.kernel_len()..(co + 1) * g.kernel_len()];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = F::zero();
                    for ci in 0..g.in_channels {
                        let plane = &xs[ci * g.in_plane()..(ci + 1) * g.in_plane()];
                        for ky in 0..g.kernel_h {
                            let Some(iy) = g.src(oy, ky, g.height) else {
                                continue;
                            };
                            let row = &plane[iy * g.width..(iy + 1) * g.width];
                            let krow = &kc[(ci * g.kernel_h + ky) * g.kernel_w..];
                            for kx in 0..g.kernel_w {
                                if let Some(ix) = g.src(ox, kx, g.width) {
                                    acc = acc + row[ix] * krow[kx];
                                }
                            }
                        }
                    }
                    out_n[(co * oh + oy) * ow + ox] = acc + bias[co];
                }
            }
        }
    });
    out
}

pub struct ConvGrads<F> {
    pub input: Option<Vec<F>>,
    pub kernel: Vec<F>,
    pub bias: Vec<F>,
}

pub fn conv2d_backward<F: Float>(
    g: &ConvGeom,
    x: &[F],
    kernel: &[F],
    grad_out: &[F],
    need_input: bool,
    parallel: bool,
) -> ConvGrads<F> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let out_sample = g.out_channels * oh * ow;
    let sample_in = g.in_channels * g.in_plane();
    let klen = g.kernel_len();

    let mut dk = vec![F::zero(); g.out_channels * klen];
    for_each_chunk(parallel, &mut dk, klen, |co, dk_c| {
        for n in 0..g.batch {
            let xs = &x[n * sample_in..(n + 1) * sample_in];
            let gs = &grad_out[n * out_sample + co * oh * ow..n * out_sample + (co + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = gs[oy * ow + ox];
                    for ci in 0..g.in_channels {
                        let plane = &xs[ci * g.in_plane()..(ci + 1) * g.in_plane()];
                        for ky in 0..g.kernel_h {
                            let Some(iy) = g.src(oy, ky, g.height) else {
                                continue;
                            };
                            for kx in 0..g.kernel_w {
                                if let Some(ix) = g.src(ox, kx, g.width) {
                                    let k = (ci * g.kernel_h + ky) * g.kernel_w + kx;
                                    dk_c[k] = dk_c[k] + go * plane[iy * g.width + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    let mut db = vec![F::zero(); g.out_channels];
    for (co, b) in db.iter_mut().enumerate() {
        for n in 0..g.batch {
            let base = n * out_sample + co * oh * ow;
            for &v in &grad_out[base..base + oh * ow] {
                *b = *b + v;
            }
        }
    }

    let input = need_input.then(|| {
        let mut dx = vec![F::zero(); g.batch * sample_in];
        for_each_chunk(parallel, &mut dx, sample_in, |n, dx_n| {
            let gs = &grad_out[n * out_sample..(n + 1) * out_sample];
            for co in 0..g.out_channels {
                let kc = &kernel[co * klen..(co + 1) * klen];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = gs[(co * oh + oy) * ow + ox];
                        for ci in 0..g.in_channels {
                            for ky in 0..g.kernel_h {
                                let Some(iy) = g.src(oy, ky, g.height) else {
                                    continue;
                                };
                                for kx in 0..g.kernel_w {
                                    if let Some(ix) = g.src(ox, kx, g.width) {
                                        let d = ci * g.in_plane() + iy * g.width + ix;
                                        let k = (ci * g.kernel_h + ky) * g.kernel_w + kx;
                                        dx_n[d] = dx_n[d] + go * kc[k];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        dx
    });

    ConvGrads {
        input,
        kernel: dk,
        bias: db,
    }
}

/// Gathers `x[:, :, rows, cols]` from a `[N, C, H, W]` buffer, preserving order.
pub fn gather_grid<F: Copy>(
    x: &[F],
    batch_channels: usize,
    height: usize,
    width: usize,
    rows: &[usize],
    cols: &[usize],
) -> Vec<F> {
    let mut out = Vec::with_capacity(batch_channels * rows.len() * cols.len());
    for p in 0..batch_channels {
        let plane = &x[p * height * width..(p + 1) * height * width];
        for &r in rows {
            let row = &plane[r * width..(r + 1) * width];
            out.extend(cols.iter().map(|&c| row[c]));
        }
    }
    out
}

/// Adjoint of [`gather_grid`]: skipped cells receive exactly zero.
pub fn scatter_grid<F: Float>(
    grad: &[F],
    batch_channels: usize,
    height: usize,
    width: usize,
    rows: &[usize],
    cols: &[usize],
) -> Vec<F> {
    let mut out = vec![F::zero(); batch_channels * height * width];
    let (kr, kc) = (rows.len(), cols.len());
    for p in 0..batch_channels {
        for (i, &r) in rows.iter().enumerate() {
            for (j, &c) in cols.iter().enumerate() {
                out[p * height * width + r * width + c] = grad[p * kr * kc + i * kc + j];
            }
        }
    }
    out
}

/// `y = x W^T + b` over the last axis. `x` is `[rows, in]`, `w` is `[out, in]`.
pub fn linear_forward<F: Float>(
    x: &[F],
    rows: usize,
    in_f: usize,
    w: &[F],
    b: &[F],
    out_f: usize,
    parallel: bool,
) -> Vec<F> {
    let mut y = vec![F::zero(); rows * out_f];
    for_each_chunk(parallel, &mut y, out_f, |r, yr| {
        let xr = &x[r * in_f..(r + 1) * in_f];
        for (o, yo) in yr.iter_mut().enumerate() {
            let wr = &w[o * in_f..(o + 1) * in_f];
            let mut acc = F::zero();
            for i in 0..in_f {
                acc = acc + xr[i] * wr[i];
            }
            *yo = acc + b[o];
        }
    });
    y
}

pub struct LinearGrads<F> {
    pub input: Option<Vec<F>>,
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

pub fn linear_backward<F: Float>(
    x: &[F],
    rows: usize,
    in_f: usize,
    w: &[F],
    out_f: usize,
    grad_out: &[F],
    need_input: bool,
    parallel: bool,
) -> LinearGrads<F> {
    let mut dw = vec![F::zero(); out_f * in_f];
    for_each_chunk(parallel, &mut dw, in_f, |o, dwo| {
        for r in 0..rows {
            let go = grad_out[r * out_f + o];
            let xr = &x[r * in_f..(r + 1) * in_f];
            for i in 0..in_f {
                dwo[i] = dwo[i] + go * xr[i];
            }
        }
    });
    let mut db = vec![F::zero(); out_f];
    for (o, b) in db.iter_mut().enumerate() {
        for r in 0..rows {
            *b = *b + grad_out[r * out_f + o];
        }
    }
    let input = need_input.then(|| {
        let mut dx = vec![F::zero(); rows * in_f];
        for_each_chunk(parallel, &mut dx, in_f, |r, dxr| {
            for o in 0..out_f {
                let go = grad_out[r * out_f + o];
                let wr = &w[o * in_f..(o + 1) * in_f];
                for i in 0..in_f {
                    dxr[i] = dxr[i] + go * wr[i];
                }
            }
        });
        dx
    });
    LinearGrads {
        input,
        weight: dw,
        bias: db,
    }
}

/// Row gather from a `[V, E]` table.
pub fn embedding_forward<F: Float>(ids: &[usize], table: &[F], dim: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(ids.len() * dim);
    for &id in ids {
        out.extend_from_slice(&table[id * dim..(id + 1) * dim]);
    }
    out
}

/// Scatter-add of row gradients into a zeroed table, in position order.
pub fn embedding_backward<F: Float>(
    ids: &[usize],
    grad_out: &[F],
    vocab: usize,
    dim: usize,
) -> Vec<F> {
    let mut dt = vec![F::zero(); vocab * dim];
    for (p, &id) in ids.iter().enumerate() {
        let row = &mut dt[id * dim..(id + 1) * dim];
        for (d, g) in row.iter_mut().zip(&grad_out[p * dim..(p + 1) * dim]) {
            *d = *d + *g;
        }
    }
    dt
}

pub fn relu_forward<F: Float>(x: &[F]) -> Vec<F> {
    x.iter()
        .map(|&v| if v > F::zero() { v } else { F::zero() })
        .collect()
}

pub fn relu_backward<F: Float>(x: &[F], grad_out: &[F]) -> Vec<F> {
    x.iter()
        .zip(grad_out)
        .map(|(&v, &g)| if v > F::zero() { g } else { F::zero() })
        .collect()
}

/// Non-overlapping `size x size` pooling window geometry (floor mode).
#[derive(Debug, Clone, Copy)]
pub struct PoolGeom {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub size: usize,
}

impl PoolGeom {
    pub fn out_h(&self) -> usize {
        self.height / self.size
    }

    pub fn out_w(&self) -> usize {
        self.width / self.size
    }
}

/// Returns pooled values and the flat argmax index (first maximum in scan order).
pub fn maxpool_forward<F: Float>(g: &PoolGeom, x: &[F]) -> (Vec<F>, Vec<usize>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = Vec::with_capacity(g.planes * oh * ow);
    let mut arg = Vec::with_capacity(g.planes * oh * ow);
    for p in 0..g.planes {
        let base = p * g.height * g.width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * g.size * g.width + ox * g.size;
                for dy in 0..g.size {
                    for dx in 0..g.size {
                        let idx = base + (oy * g.size + dy) * g.width + ox * g.size + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward<F: Float>(input_len: usize, argmax: &[usize], grad_out: &[F]) -> Vec<F> {
    let mut dx = vec![F::zero(); input_len];
    for (&i, &g) in argmax.iter().zip(grad_out) {
        dx[i] = dx[i] + g;
    }
    dx
}

pub fn avgpool_forward<F: Float>(g: &PoolGeom, x: &[F]) -> Vec<F> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let area = F::from_usize(g.size * g.size);
    let mut out = Vec::with_capacity(g.planes * oh * ow);
    for p in 0..g.planes {
        let base = p * g.height * g.width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = F::zero();
                for dy in 0..g.size {
                    for dx in 0..g.size {
                        acc = acc + x[base + (oy * g.size + dy) * g.width + ox * g.size + dx];
                    }
                }
                out.push(acc / area);
            }
        }
    }
    out
}

pub fn avgpool_backward<F: Float>(g: &PoolGeom, grad_out: &[F]) -> Vec<F> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let area = F::from_usize(g.size * g.size);
    let mut dx = vec![F::zero(); g.planes * g.height * g.width];
    for p in 0..g.planes {
        let base = p * g.height * g.width;
        for oy in 0..oh {
            for ox in 0..ow {
                let share = grad_out[(p * oh + oy) * ow + ox] / area;
                for dy in 0..g.size {
                    for dx_ in 0..g.size {
                        dx[base + (oy * g.size + dy) * g.width + ox * g.size + dx_] = share;
                    }
                }
            }
        }
    }
    dx
}

/// Mean over the middle axis of `[N, L, E]`.
pub fn mean_seq_forward<F: Float>(x: &[F], batch: usize, len: usize, dim: usize) -> Vec<F> {
    let denom = F::from_usize(len);
    let mut out = vec![F::zero(); batch * dim];
    for n in 0..batch {
        let o = &mut out[n * dim..(n + 1) * dim];
        for l in 0..len {
            let row = &x[(n * len + l) * dim..(n * len + l + 1) * dim];
            for (acc, &v) in o.iter_mut().zip(row) {
                *acc = *acc + v;
            }
        }
        for v in o.iter_mut() {
            *v = *v / denom;
        }
    }
    out
}

pub fn mean_seq_backward<F: Float>(grad_out: &[F], batch: usize, len: usize, dim: usize) -> Vec<F> {
    let denom = F::from_usize(len);
    let mut dx = Vec::with_capacity(batch * len * dim);
    for n in 0..batch {
        let g = &grad_out[n * dim..(n + 1) * dim];
        for _ in 0..len {
            dx.extend(g.iter().map(|&v| v / denom));
        }
    }
    dx
}

/// Mean softmax cross-entropy over `rows` rows of `classes` logits.
/// Returns the loss and the per-row probabilities.
pub fn softmax_xent_forward<F: Float>(
    logits: &[F],
    rows: usize,
    classes: usize,
    labels: &[usize],
) -> (F, Vec<F>) {
    let mut probs = Vec::with_capacity(rows * classes);
    let mut total = F::zero();
    for r in 0..rows {
        let z = &logits[r * classes..(r + 1) * classes];
        let m = z.iter().copied().fold(F::neg_infinity(), F::max);
        let mut s = F::zero();
        for &v in z {
            s = s + (v - m).exp();
        }
        let log_s = s.ln();
        for &v in z {
            probs.push((v - m).exp() / s);
        }
        total = total + (log_s - (z[labels[r]] - m));
    }
    (total / F::from_usize(rows), probs)
}

/// Gradient `upstream * (p - onehot(y)) / rows`.
pub fn softmax_xent_backward<F: Float>(
    probs: &[F],
    rows: usize,
    classes: usize,
    labels: &[usize],
    upstream: F,
) -> Vec<F> {
    let n = F::from_usize(rows);
    let mut g = Vec::with_capacity(rows * classes);
    for r in 0..rows {
        for c in 0..classes {
            let p = probs[r * classes + c];
            let t = if c == labels[r] { p - F::one() } else { p };
            g.push(upstream * (t / n));
        }
    }
    g
}
