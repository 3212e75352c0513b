//! Dense/conv/pool/activation kernels shared by the autodiff tape and the
//! plain inference path.
//!
//! All kernels are deterministic: parallel sections split work so that every
//! output element is produced by a fixed sequence of floating-point
//! operations regardless of thread scheduling.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Below this many multiply-adds the rayon dispatch overhead dominates.
const PAR_FLOP_THRESHOLD: usize = 1 << 16;

// ---------------------------------------------------------------------------
// matmul family
// ---------------------------------------------------------------------------

/// `out[m×n] = a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    let row = |i: usize, orow: &mut [f64]| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..p * n + n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| row(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            row(i, orow);
        }
    }
    out
}

/// `out[m×k] = a[m×n] · b[k×n]ᵀ` (row-by-row dot products).
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * k];
    let row = |i: usize, orow: &mut [f64]| {
        let arow = &a[i * n..(i + 1) * n];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *o = acc;
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(k).enumerate().for_each(|(i, orow)| row(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(k).enumerate() {
            row(i, orow);
        }
    }
    out
}

/// `out[k×n] = a[m×k]ᵀ · b[m×n]`.
///
/// Parallelizes over fixed row chunks of the shared `m` axis with one local
/// accumulator per chunk, then reduces the chunk results in chunk order.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let accumulate = |arows: &[f64], brows: &[f64], out: &mut [f64]| {
        let rows = arows.len() / k;
        for i in 0..rows {
            let arow = &arows[i * k..(i + 1) * k];
            let brow = &brows[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                let orow = &mut out[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        let chunk_rows = m.div_ceil(2 * rayon::current_num_threads()).max(64);
        let partials: Vec<Vec<f64>> = a
            .par_chunks(chunk_rows * k)
            .zip(b.par_chunks(chunk_rows * n))
            .map(|(ac, bc)| {
                let mut local = vec![0.0; k * n];
                accumulate(ac, bc, &mut local);
                local
            })
            .collect();
        let mut out = vec![0.0; k * n];
        for part in partials {
            for (o, v) in out.iter_mut().zip(part) {
                *o += v;
            }
        }
        out
    } else {
        let mut out = vec![0.0; k * n];
        accumulate(a, b, &mut out);
        out
    }
}

// ---------------------------------------------------------------------------
// dense
// ---------------------------------------------------------------------------

/// `out[i][j] = Σ_c x[i][c]·w[c][j] + b[j]` for `x: n×d`, `w: d×k`, `b: k`.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.ndim() != 2 || w.ndim() != 2 {
        return Err(Error::shape("dense: expected 2-d input and weight"));
    }
    let (n, d) = (x.dim(0), x.dim(1));
    let (wd, k) = (w.dim(0), w.dim(1));
    if d != wd {
        return Err(Error::shape(format!("dense: input dim {d} != weight rows {wd}")));
    }
    if b.shape() != [k] {
        return Err(Error::shape(format!("dense: bias shape {:?} != [{k}]", b.shape())));
    }
    let mut out = matmul(x.data(), w.data(), n, d, k);
    for row in out.chunks_mut(k) {
        for (o, &bv) in row.iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    Tensor::new(vec![n, k], out)
}

/// Gradients of [`dense_forward`] given upstream `g: n×k`.
pub fn dense_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, d) = (x.dim(0), x.dim(1));
    let k = w.dim(1);
    let dx = matmul_nt(g.data(), w.data(), n, k, d);
    let dw = matmul_tn(x.data(), g.data(), n, d, k);
    let mut db = vec![0.0; k];
    for row in g.data().chunks(k) {
        for (acc, &gv) in db.iter_mut().zip(row) {
            *acc += gv;
        }
    }
    (
        Tensor::new(vec![n, d], dx).expect("dense dx shape"),
        Tensor::new(vec![d, k], dw).expect("dense dw shape"),
        Tensor::new(vec![k], db).expect("dense db shape"),
    )
}

// ---------------------------------------------------------------------------
// conv2d (stride 1, same padding)
// ---------------------------------------------------------------------------

fn conv_dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if x.ndim() != 4 || w.ndim() != 4 {
        return Err(Error::shape("conv2d: expected n×c×h×w input and o×c×k×k weight"));
    }
    let (n, ic, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (oc, wic, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    if ic != wic {
        return Err(Error::shape(format!("conv2d: input channels {ic} != kernel channels {wic}")));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::shape(format!("conv2d: kernel must be square and odd, got {kh}×{kw}")));
    }
    Ok((n, ic, h, wd, oc, kh))
}

/// Lowers one sample's receptive fields into a `(h·w) × (ic·k·k)` matrix.
fn im2col_sample(x: &[f64], ic: usize, h: usize, w: usize, k: usize, col: &mut [f64]) {
    let pad = k / 2;
    let mut idx = 0;
    for oy in 0..h {
        for ox in 0..w {
            for c in 0..ic {
                let plane = &x[c * h * w..(c + 1) * h * w];
                for ky in 0..k {
                    let sy = oy + ky;
                    for kx in 0..k {
                        let sx = ox + kx;
                        col[idx] = if sy >= pad && sy < h + pad && sx >= pad && sx < w + pad {
                            plane[(sy - pad) * w + (sx - pad)]
                        } else {
                            0.0
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Cross-correlation with stride 1 and zero "same" padding.
///
/// `x: n×ic×h×w`, `w: oc×ic×k×k`, `b: oc` → `n×oc×h×w`.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, ic, h, wd, oc, k) = conv_dims(x, w)?;
    if b.shape() != [oc] {
        return Err(Error::shape(format!("conv2d: bias shape {:?} != [{oc}]", b.shape())));
    }
    let patch = ic * k * k;
    let spatial = h * wd;
    let mut out = vec![0.0; n * oc * spatial];
    let sample = |s: usize, dst: &mut [f64]| {
        let xs = &x.data()[s * ic * spatial..(s + 1) * ic * spatial];
        let mut col = vec![0.0; spatial * patch];
        im2col_sample(xs, ic, h, wd, k, &mut col);
        for o in 0..oc {
            let wrow = &w.data()[o * patch..(o + 1) * patch];
            let bias = b.data()[o];
            let dplane = &mut dst[o * spatial..(o + 1) * spatial];
            for (pix, d) in dplane.iter_mut().enumerate() {
                let crow = &col[pix * patch..(pix + 1) * patch];
                let mut acc = bias;
                for (&cv, &wv) in crow.iter().zip(wrow) {
                    acc += cv * wv;
                }
                *d = acc;
            }
        }
    };
    if n * oc * spatial * patch >= PAR_FLOP_THRESHOLD && n > 1 {
        out.par_chunks_mut(oc * spatial).enumerate().for_each(|(s, dst)| sample(s, dst));
    } else {
        for (s, dst) in out.chunks_mut(oc * spatial).enumerate() {
            sample(s, dst);
        }
    }
    Tensor::new(vec![n, oc, h, wd], out)
}

/// Gradients of [`conv2d_forward`] given upstream `g: n×oc×h×w`.
pub fn conv2d_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, ic, h, wd, oc, k) = conv_dims(x, w).expect("conv2d_backward shapes");
    let patch = ic * k * k;
    let spatial = h * wd;
    let pad = k / 2;

    // Per sample: g_mat[pix][o], dcol = g_mat · w, dw_local = g_matᵀ · col.
    let per_sample = |s: usize| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let xs = &x.data()[s * ic * spatial..(s + 1) * ic * spatial];
        let gs = &g.data()[s * oc * spatial..(s + 1) * oc * spatial];
        let mut col = vec![0.0; spatial * patch];
        im2col_sample(xs, ic, h, wd, k, &mut col);
        let mut g_mat = vec![0.0; spatial * oc];
        for o in 0..oc {
            for pix in 0..spatial {
                g_mat[pix * oc + o] = gs[o * spatial + pix];
            }
        }
        let dcol = matmul(&g_mat, w.data(), spatial, oc, patch);
        let dw = matmul_tn(&g_mat, &col, spatial, oc, patch);
        let mut db = vec![0.0; oc];
        for grow in g_mat.chunks(oc) {
            for (acc, &gv) in db.iter_mut().zip(grow) {
                *acc += gv;
            }
        }
        // col2im scatter for this sample's dx.
        let mut dx = vec![0.0; ic * spatial];
        for oy in 0..h {
            for ox in 0..wd {
                let crow = &dcol[(oy * wd + ox) * patch..(oy * wd + ox + 1) * patch];
                let mut idx = 0;
                for c in 0..ic {
                    let plane = &mut dx[c * spatial..(c + 1) * spatial];
                    for ky in 0..k {
                        let sy = oy + ky;
                        for kx in 0..k {
                            let sx = ox + kx;
                            if sy >= pad && sy < h + pad && sx >= pad && sx < wd + pad {
                                plane[(sy - pad) * wd + (sx - pad)] += crow[idx];
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
        (dx, dw, db)
    };

    let parts: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> =
        if n * oc * spatial * patch >= PAR_FLOP_THRESHOLD && n > 1 {
            (0..n).into_par_iter().map(per_sample).collect()
        } else {
            (0..n).map(per_sample).collect()
        };

    let mut dx = vec![0.0; n * ic * spatial];
    let mut dw = vec![0.0; oc * patch];
    let mut db = vec![0.0; oc];
    for (s, (sdx, sdw, sdb)) in parts.into_iter().enumerate() {
        dx[s * ic * spatial..(s + 1) * ic * spatial].copy_from_slice(&sdx);
        for (acc, v) in dw.iter_mut().zip(sdw) {
            *acc += v;
        }
        for (acc, v) in db.iter_mut().zip(sdb) {
            *acc += v;
        }
    }
    (
        Tensor::new(vec![n, ic, h, wd], dx).expect("conv dx shape"),
        Tensor::new(vec![oc, ic, k, k], dw).expect("conv dw shape"),
        Tensor::new(vec![oc], db).expect("conv db shape"),
    )
}

// ---------------------------------------------------------------------------
// max pooling
// ---------------------------------------------------------------------------

/// Ceil-mode max pooling; windows hanging over the edge act as −∞ padded.
/// Returns the pooled tensor plus the flat input index of each maximum.
pub fn maxpool2d_forward(x: &Tensor, window: usize) -> Result<(Tensor, Vec<usize>)> {
    if x.ndim() != 4 {
        return Err(Error::shape("maxpool2d: expected n×c×h×w input"));
    }
    if window < 2 {
        return Err(Error::shape("maxpool2d: window must be ≥ 2"));
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let oh = h.div_ceil(window);
    let ow = w.div_ceil(window);
    let mut out = vec![0.0; n * c * oh * ow];
    let mut argmax = vec![0usize; out.len()];
    let data = x.data();
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * h * w;
            let obase = (s * c + ch) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0usize;
                    for dy in 0..window {
                        let y = oy * window + dy;
                        if y >= h {
                            break;
                        }
                        for dx in 0..window {
                            let xcol = ox * window + dx;
                            if xcol >= w {
                                break;
                            }
                            let at = base + y * w + xcol;
                            if data[at] > best {
                                best = data[at];
                                best_at = at;
                            }
                        }
                    }
                    out[obase + oy * ow + ox] = best;
                    argmax[obase + oy * ow + ox] = best_at;
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

/// Routes upstream gradient to each window's argmax position.
pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], g: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let dxd = dx.data_mut();
    for (&at, &gv) in argmax.iter().zip(g.data()) {
        dxd[at] += gv;
    }
    dx
}

// ---------------------------------------------------------------------------
// elementwise activations
// ---------------------------------------------------------------------------

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// `softplus(t) = ln(1 + e^t)` computed without overflow.
pub fn softplus_scalar(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// `log σ(x) = −softplus(−x)`, the stabilized log-sigmoid.
pub fn log_sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| -softplus_scalar(-v))
}

// ---------------------------------------------------------------------------
// row softmax
// ---------------------------------------------------------------------------

/// Row-wise softmax of a 2-d tensor, stabilized by row-max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 2 {
        return Err(Error::shape("softmax_rows: expected 2-d input"));
    }
    let k = x.dim(1);
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Row-wise log-softmax (same stabilization).
pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 2 {
        return Err(Error::shape("log_softmax_rows: expected 2-d input"));
    }
    let k = x.dim(1);
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

// ---------------------------------------------------------------------------
// per-column batch normalization (no affine)
// ---------------------------------------------------------------------------

/// Result of a train-mode column normalization.
pub struct ColumnNorm {
    /// Normalized output `(x − μ_j)/max(σ_j, eps)`.
    pub output: Tensor,
    /// Per-column batch mean.
    pub mean: Vec<f64>,
    /// Per-column batch standard deviation (uncorrected, before flooring).
    pub std: Vec<f64>,
    /// Per-column divisor actually applied: `max(σ_j, eps)`.
    pub denom: Vec<f64>,
}

/// Normalizes each column of `x: n×K` to zero mean and unit variance using
/// batch statistics with `1/n` variance; columns with σ below `eps` are
/// divided by `eps` instead.
pub fn batchnorm_cols(x: &Tensor, eps: f64) -> Result<ColumnNorm> {
    if x.ndim() != 2 {
        return Err(Error::shape("batchnorm_cols: expected 2-d input"));
    }
    let (n, k) = (x.dim(0), x.dim(1));
    if n < 2 {
        return Err(Error::shape(format!("batchnorm_cols: batch size {n} < 2")));
    }
    let data = x.data();
    let mut mean = vec![0.0; k];
    for row in data.chunks(k) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut var = vec![0.0; k];
    for row in data.chunks(k) {
        for ((vv, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *vv += d * d;
        }
    }
    let mut std = vec![0.0; k];
    let mut denom = vec![0.0; k];
    for j in 0..k {
        std[j] = (var[j] / n as f64).sqrt();
        denom[j] = std[j].max(eps);
    }
    let mut out = vec![0.0; n * k];
    for (orow, row) in out.chunks_mut(k).zip(data.chunks(k)) {
        for j in 0..k {
            orow[j] = (row[j] - mean[j]) / denom[j];
        }
    }
    Ok(ColumnNorm { output: Tensor::new(vec![n, k], out)?, mean, std, denom })
}

/// Backward pass of [`batchnorm_cols`]: gradients flow through the batch
/// statistics (standard batch-norm backward) except for floored columns,
/// where the divisor is the constant `eps`.
pub fn batchnorm_cols_backward(
    normalized: &Tensor,
    denom: &[f64],
    floored: &[bool],
    g: &Tensor,
) -> Tensor {
    let (n, k) = (normalized.dim(0), normalized.dim(1));
    let nf = n as f64;
    let xhat = normalized.data();
    let gd = g.data();
    let mut mean_g = vec![0.0; k];
    let mut mean_gx = vec![0.0; k];
    for i in 0..n {
        for j in 0..k {
            mean_g[j] += gd[i * k + j];
            mean_gx[j] += gd[i * k + j] * xhat[i * k + j];
        }
    }
    for j in 0..k {
        mean_g[j] /= nf;
        mean_gx[j] /= nf;
    }
    let mut dx = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k {
            let at = i * k + j;
            dx[at] = if floored[j] {
                (gd[at] - mean_g[j]) / denom[j]
            } else {
                (gd[at] - mean_g[j] - xhat[at] * mean_gx[j]) / denom[j]
            };
        }
    }
    Tensor::new(vec![n, k], dx).expect("batchnorm dx shape")
}
