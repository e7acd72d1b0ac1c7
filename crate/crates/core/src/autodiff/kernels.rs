//! Forward and backward kernels over raw row-major slices.
//!
//! Shapes are validated by the callers in `ops.rs`; every kernel here assumes
//! consistent extents.

use crate::tensor::{FrameMask, Scalar};

pub(crate) const INSTANCE_NORM_EPS: f64 = 1e-5;

#[inline]
fn axpy<E: Scalar>(alpha: E, x: &[E], y: &mut [E]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

#[inline]
fn dot<E: Scalar>(a: &[E], b: &[E]) -> E {
    let mut acc = E::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

/// `out[m×n] = a[m×k] · b[k×n]`
pub(crate) fn matmul<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != E::zero() {
                axpy(aip, &b[p * n..(p + 1) * n], row);
            }
        }
    }
    out
}

/// Accumulates `da += g · bᵀ` and `db += aᵀ · g`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_backward<E: Scalar>(
    a: &[E],
    b: &[E],
    g: &[E],
    m: usize,
    k: usize,
    n: usize,
    da: Option<&mut [E]>,
    db: Option<&mut [E]>,
) {
    if let Some(da) = da {
        for i in 0..m {
            let gi = &g[i * n..(i + 1) * n];
            for p in 0..k {
                da[i * k + p] += dot(gi, &b[p * n..(p + 1) * n]);
            }
        }
    }
    if let Some(db) = db {
        for i in 0..m {
            let gi = &g[i * n..(i + 1) * n];
            for p in 0..k {
                axpy(a[i * k + p], gi, &mut db[p * n..(p + 1) * n]);
            }
        }
    }
}

pub(crate) fn transpose<E: Scalar>(x: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Geometry of a same-padded dilated 1-D convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub frames: usize,
    pub dilation: usize,
}

impl ConvGeom {
    /// Frame offset of tap `j` and the output range `[lo, hi)` for which the
    /// tap reads inside the sequence.
    #[inline]
    fn tap(&self, j: usize) -> (isize, usize, usize) {
        let half = (self.kernel - 1) / 2;
        let off = self.dilation as isize * (j as isize - half as isize);
        let t = self.frames as isize;
        let lo = (-off).clamp(0, t) as usize;
        let hi = (t - off).clamp(0, t) as usize;
        (off, lo, hi.max(lo))
    }
}

pub(crate) fn conv1d<E: Scalar>(x: &[E], w: &[E], bias: Option<&[E]>, g: ConvGeom) -> Vec<E> {
    let t = g.frames;
    let mut out = vec![E::zero(); g.c_out * t];
    for o in 0..g.c_out {
        let row = &mut out[o * t..(o + 1) * t];
        if let Some(b) = bias {
            row.fill(b[o]);
        }
        for c in 0..g.c_in {
            let xrow = &x[c * t..(c + 1) * t];
            for j in 0..g.kernel {
                let wv = w[(o * g.c_in + c) * g.kernel + j];
                let (off, lo, hi) = g.tap(j);
                if lo < hi {
                    let src = &xrow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                    axpy(wv, src, &mut row[lo..hi]);
                }
            }
        }
    }
    out
}

pub(crate) fn conv1d_backward<E: Scalar>(
    x: &[E],
    w: &[E],
    grad: &[E],
    g: ConvGeom,
    mut dx: Option<&mut [E]>,
    mut dw: Option<&mut [E]>,
    dbias: Option<&mut [E]>,
) {
    let t = g.frames;
    if let Some(db) = dbias {
        for o in 0..g.c_out {
            db[o] += grad[o * t..(o + 1) * t].iter().copied().sum::<E>();
        }
    }
    for o in 0..g.c_out {
        let grow = &grad[o * t..(o + 1) * t];
        for c in 0..g.c_in {
            for j in 0..g.kernel {
                let (off, lo, hi) = g.tap(j);
                if lo >= hi {
                    continue;
                }
                let (slo, shi) = ((lo as isize + off) as usize, (hi as isize + off) as usize);
                let widx = (o * g.c_in + c) * g.kernel + j;
                if let Some(dw) = dw.as_deref_mut() {
                    dw[widx] += dot(&grow[lo..hi], &x[c * t + slo..c * t + shi]);
                }
                if let Some(dx) = dx.as_deref_mut() {
                    axpy(w[widx], &grow[lo..hi], &mut dx[c * t + slo..c * t + shi]);
                }
            }
        }
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax (or log-softmax) along the middle extent.
pub(crate) fn softmax<E: Scalar>(x: &[E], split: (usize, usize, usize), log: bool) -> Vec<E> {
    let (outer, len, inner) = split;
    let mut out = vec![E::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = E::neg_infinity();
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut sum = E::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            if log {
                let lse = sum.ln();
                for j in 0..len {
                    out[at(j)] = x[at(j)] - max - lse;
                }
            } else {
                for j in 0..len {
                    out[at(j)] = out[at(j)] / sum;
                }
            }
        }
    }
    out
}

/// Gradient of softmax (`log == false`, `y` = probabilities) or log-softmax
/// (`log == true`, `y` = log-probabilities).
pub(crate) fn softmax_backward<E: Scalar>(
    y: &[E],
    g: &[E],
    split: (usize, usize, usize),
    log: bool,
    dx: &mut [E],
) {
    let (outer, len, inner) = split;
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            if log {
                let gsum: E = (0..len).map(|j| g[at(j)]).sum();
                for j in 0..len {
                    dx[at(j)] += g[at(j)] - y[at(j)].exp() * gsum;
                }
            } else {
                let gy: E = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                for j in 0..len {
                    dx[at(j)] += y[at(j)] * (g[at(j)] - gy);
                }
            }
        }
    }
}

/// Per-channel normalization over the real frames of a `[C × T]` map. Padded
/// frames come out as zero. Returns the output and each channel's
/// `1 / sqrt(var + eps)`.
pub(crate) fn instance_norm<E: Scalar>(
    x: &[E],
    channels: usize,
    mask: &FrameMask,
) -> (Vec<E>, Vec<E>) {
    let t = mask.len();
    let n = mask.count();
    let eps = E::from_f64(INSTANCE_NORM_EPS);
    let mut out = vec![E::zero(); channels * t];
    let mut inv_std = vec![E::zero(); channels];
    if n == 0 {
        return (out, inv_std);
    }
    let nf = E::from_usize(n);
    for c in 0..channels {
        let row = &x[c * t..(c + 1) * t];
        let mut mean = E::zero();
        for (tt, v) in row.iter().enumerate() {
            if mask.get(tt) {
                mean += *v;
            }
        }
        mean = mean / nf;
        let mut var = E::zero();
        for (tt, v) in row.iter().enumerate() {
            if mask.get(tt) {
                var += (*v - mean) * (*v - mean);
            }
        }
        var = var / nf;
        let inv = E::one() / (var + eps).sqrt();
        inv_std[c] = inv;
        for (tt, v) in row.iter().enumerate() {
            if mask.get(tt) {
                out[c * t + tt] = (*v - mean) * inv;
            }
        }
    }
    (out, inv_std)
}

pub(crate) fn instance_norm_backward<E: Scalar>(
    y: &[E],
    inv_std: &[E],
    g: &[E],
    mask: &FrameMask,
    dx: &mut [E],
) {
    let t = mask.len();
    let n = mask.count();
    if n == 0 {
        return;
    }
    let nf = E::from_usize(n);
    for (c, inv) in inv_std.iter().enumerate() {
        let (yr, gr) = (&y[c * t..(c + 1) * t], &g[c * t..(c + 1) * t]);
        let mut gmean = E::zero();
        let mut gymean = E::zero();
        for tt in 0..t {
            if mask.get(tt) {
                gmean += gr[tt];
                gymean += gr[tt] * yr[tt];
            }
        }
        gmean = gmean / nf;
        gymean = gymean / nf;
        for tt in 0..t {
            if mask.get(tt) {
                dx[c * t + tt] += *inv * (gr[tt] - gmean - yr[tt] * gymean);
            }
        }
    }
}

/// Chunked attention over `[T × d]` queries, keys and values.
///
/// Frames are split into consecutive chunks of `window` frames; a real query
/// attends to the real keys of its own chunk. Padded queries produce zero rows.
/// Returns the output and the per-query probabilities laid out as
/// `[T × min(window, T)]`, indexed by key position within the chunk.
pub(crate) fn windowed_attention<E: Scalar>(
    q: &[E],
    k: &[E],
    v: &[E],
    d: usize,
    window: usize,
    mask: &FrameMask,
) -> (Vec<E>, Vec<E>) {
    let t = mask.len();
    let stride = window.min(t);
    let scale = E::one() / E::from_usize(d).sqrt();
    let mut out = vec![E::zero(); t * d];
    let mut probs = vec![E::zero(); t * stride];
    let mut scores = vec![E::zero(); stride];
    for start in (0..t).step_by(window) {
        let end = (start + window).min(t);
        for i in start..end {
            if !mask.get(i) {
                continue;
            }
            let qi = &q[i * d..(i + 1) * d];
            let mut max = E::neg_infinity();
            for j in start..end {
                if mask.get(j) {
                    let s = dot(qi, &k[j * d..(j + 1) * d]) * scale;
                    scores[j - start] = s;
                    max = max.max(s);
                }
            }
            let mut sum = E::zero();
            let p = &mut probs[i * stride..(i + 1) * stride];
            for j in start..end {
                if mask.get(j) {
                    let e = (scores[j - start] - max).exp();
                    p[j - start] = e;
                    sum += e;
                }
            }
            let oi = &mut out[i * d..(i + 1) * d];
            for j in start..end {
                if mask.get(j) {
                    p[j - start] = p[j - start] / sum;
                    axpy(p[j - start], &v[j * d..(j + 1) * d], oi);
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn windowed_attention_backward<E: Scalar>(
    q: &[E],
    k: &[E],
    v: &[E],
    probs: &[E],
    g: &[E],
    d: usize,
    window: usize,
    mask: &FrameMask,
    mut dq: Option<&mut [E]>,
    mut dk: Option<&mut [E]>,
    mut dv: Option<&mut [E]>,
) {
    let t = mask.len();
    let stride = window.min(t);
    let scale = E::one() / E::from_usize(d).sqrt();
    let mut dp = vec![E::zero(); stride];
    for start in (0..t).step_by(window) {
        let end = (start + window).min(t);
        for i in start..end {
            if !mask.get(i) {
                continue;
            }
            let gi = &g[i * d..(i + 1) * d];
            let p = &probs[i * stride..(i + 1) * stride];
            let mut pdp = E::zero();
            for j in start..end {
                if mask.get(j) {
                    let pj = p[j - start];
                    dp[j - start] = dot(gi, &v[j * d..(j + 1) * d]);
                    pdp += pj * dp[j - start];
                    if let Some(dv) = dv.as_deref_mut() {
                        axpy(pj, gi, &mut dv[j * d..(j + 1) * d]);
                    }
                }
            }
            for j in start..end {
                if !mask.get(j) {
                    continue;
                }
                let ds = p[j - start] * (dp[j - start] - pdp) * scale;
                if let Some(dq) = dq.as_deref_mut() {
                    axpy(ds, &k[j * d..(j + 1) * d], &mut dq[i * d..(i + 1) * d]);
                }
                if let Some(dk) = dk.as_deref_mut() {
                    axpy(ds, &q[i * d..(i + 1) * d], &mut dk[j * d..(j + 1) * d]);
                }
            }
        }
    }
}
