//! Pure forward compute kernels.
//!
//! Every numerical operation lives here as a plain function on [`Tensor`];
//! the autodiff tape wraps these and adds backward rules. Heavy kernels use
//! fixed-size row chunks under rayon so results do not depend on thread
//! count, and all reductions combine partial results in index order.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rayon::prelude::*;

/// Rows per parallel chunk for batched matmuls. Fixed so that results are
/// identical regardless of the rayon pool size.
const GEMM_CHUNK: usize = 256;

fn view2(data: &[f32], rows: usize, cols: usize) -> ArrayView2<'_, f32> {
    ArrayView2::from_shape((rows, cols), data).expect("kernel shape agrees with buffer")
}

fn view2_mut(data: &mut [f32], rows: usize, cols: usize) -> ArrayViewMut2<'_, f32> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("kernel shape agrees with buffer")
}

/// `y = x @ w.T [+ bias]` with `x: [n, in]`, `w: [out, in]`, `bias: [out]`.
pub fn affine(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(Error::Dimension {
            op: "affine",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let (n, k, out) = (xs[0], xs[1], ws[0]);
    if let Some(b) = bias {
        if b.shape() != [out] {
            return Err(Error::Dimension {
                op: "affine bias",
                lhs: vec![out],
                rhs: b.shape().to_vec(),
            });
        }
    }
    let mut y = vec![0.0f32; n * out];
    let wv = view2(w.data(), out, k);
    y.par_chunks_mut(GEMM_CHUNK * out)
        .zip(x.data().par_chunks(GEMM_CHUNK * k))
        .for_each(|(yc, xc)| {
            let rows = xc.len() / k;
            let xv = view2(xc, rows, k);
            let mut yv = view2_mut(yc, rows, out);
            general_mat_mul(1.0, &xv, &wv.t(), 0.0, &mut yv);
        });
    if let Some(b) = bias {
        let bd = b.data();
        y.par_chunks_mut(out).for_each(|row| {
            for (v, &bj) in row.iter_mut().zip(bd) {
                *v += bj;
            }
        });
    }
    Tensor::from_vec(vec![n, out], y)
}

/// `dy @ w` with `dy: [n, out]`, `w: [out, in]` -> `[n, in]`. Backward of
/// [`affine`] with respect to its input.
pub fn matmul_nn(dy: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (ds, ws) = (dy.shape(), w.shape());
    if ds.len() != 2 || ws.len() != 2 || ds[1] != ws[0] {
        return Err(Error::Dimension {
            op: "matmul_nn",
            lhs: ds.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let (n, out, k) = (ds[0], ds[1], ws[1]);
    let mut y = vec![0.0f32; n * k];
    let wv = view2(w.data(), out, k);
    y.par_chunks_mut(GEMM_CHUNK * k)
        .zip(dy.data().par_chunks(GEMM_CHUNK * out))
        .for_each(|(yc, dc)| {
            let rows = dc.len() / out;
            let dv = view2(dc, rows, out);
            let mut yv = view2_mut(yc, rows, k);
            general_mat_mul(1.0, &dv, &wv, 0.0, &mut yv);
        });
    Tensor::from_vec(vec![n, k], y)
}

/// `dy.T @ x` with `dy: [n, out]`, `x: [n, in]` -> `[out, in]`. Backward of
/// [`affine`] with respect to its weight. Partial products over fixed row
/// chunks are accumulated in chunk order.
pub fn matmul_tn(dy: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (ds, xs) = (dy.shape(), x.shape());
    if ds.len() != 2 || xs.len() != 2 || ds[0] != xs[0] {
        return Err(Error::Dimension {
            op: "matmul_tn",
            lhs: ds.to_vec(),
            rhs: xs.to_vec(),
        });
    }
    let (n, out, k) = (ds[0], ds[1], xs[1]);
    let partials: Vec<Vec<f32>> = dy
        .data()
        .par_chunks(GEMM_CHUNK * out)
        .zip(x.data().par_chunks(GEMM_CHUNK * k))
        .map(|(dc, xc)| {
            let rows = dc.len() / out;
            let mut p = vec![0.0f32; out * k];
            let dv = view2(dc, rows, out);
            let xv = view2(xc, rows, k);
            let mut pv = view2_mut(&mut p, out, k);
            general_mat_mul(1.0, &dv.t(), &xv, 0.0, &mut pv);
            p
        })
        .collect();
    let mut acc = vec![0.0f32; out * k];
    for p in partials {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    let _ = n;
    Tensor::from_vec(vec![out, k], acc)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn abs(x: &Tensor) -> Tensor {
    x.map(f32::abs)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip(b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip(b, |x, y| x - y)
}

pub fn scale(x: &Tensor, c: f32) -> Tensor {
    x.map(|v| v * c)
}

/// Elementwise minimum; ties keep the first argument (callers rely on this
/// for placement-order tie breaking).
pub fn min_pair(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip(b, |x, y| if y < x { y } else { x })
}

pub fn max_pair(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip(b, |x, y| if y > x { y } else { x })
}

/// Adds a `[cols]` vector to every row of `[rows, cols]`.
pub fn add_row_broadcast(x: &Tensor, v: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 2 || v.shape() != [xs[1]] {
        return Err(Error::Dimension {
            op: "add_row_broadcast",
            lhs: xs.to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let cols = xs[1];
    let vd = v.data();
    let data = x
        .data()
        .chunks(cols)
        .flat_map(|row| row.iter().zip(vd).map(|(&a, &b)| a + b))
        .collect();
    Tensor::from_vec(xs.to_vec(), data)
}

// ---------------------------------------------------------------------------
// Convolution

/// Output spatial extents of a valid (no padding) convolution.
pub fn conv_out_dims(h: usize, w: usize, kh: usize, kw: usize, stride: usize) -> Result<(usize, usize)> {
    if kh > h || kw > w {
        return Err(Error::Dimension {
            op: "conv2d kernel larger than input",
            lhs: vec![h, w],
            rhs: vec![kh, kw],
        });
    }
    if stride == 0 {
        return Err(Error::Config("conv stride must be positive".into()));
    }
    Ok(((h - kh) / stride + 1, (w - kw) / stride + 1))
}

/// im2col for one image: `[c_in, h, w]` -> column matrix `[c_in*kh*kw, oh*ow]`.
fn im2col(img: &[f32], c_in: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, oh: usize, ow: usize, cols: &mut [f32]) {
    let ocells = oh * ow;
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut cols[row * ocells..(row + 1) * ocells];
                for oi in 0..oh {
                    let src_row = oi * stride + ki;
                    let base = c * h * w + src_row * w + kj;
                    for oj in 0..ow {
                        dst[oi * ow + oj] = img[base + oj * stride];
                    }
                }
            }
        }
    }
}

/// Scatter-add of a column matrix back to image layout; adjoint of [`im2col`].
fn col2im(cols: &[f32], c_in: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, oh: usize, ow: usize, img: &mut [f32]) {
    let ocells = oh * ow;
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &cols[row * ocells..(row + 1) * ocells];
                for oi in 0..oh {
                    let dst_row = oi * stride + ki;
                    let base = c * h * w + dst_row * w + kj;
                    for oj in 0..ow {
                        img[base + oj * stride] += src[oi * ow + oj];
                    }
                }
            }
        }
    }
}

/// Valid cross-correlation: `x: [n, c_in, h, w]`, `kernel: [c_out, c_in, kh, kw]`.
pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    let (xs, ks) = (x.shape(), kernel.shape());
    if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
        return Err(Error::Dimension {
            op: "conv2d",
            lhs: xs.to_vec(),
            rhs: ks.to_vec(),
        });
    }
    let (n, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (c_out, kh, kw) = (ks[0], ks[2], ks[3]);
    let (oh, ow) = conv_out_dims(h, w, kh, kw, stride)?;
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::Dimension {
                op: "conv2d bias",
                lhs: vec![c_out],
                rhs: b.shape().to_vec(),
            });
        }
    }
    let ckk = c_in * kh * kw;
    let ocells = oh * ow;
    let kv = view2(kernel.data(), c_out, ckk);
    let mut y = vec![0.0f32; n * c_out * ocells];
    y.par_chunks_mut(c_out * ocells)
        .zip(x.data().par_chunks(c_in * h * w))
        .for_each(|(yimg, ximg)| {
            let mut cols = vec![0.0f32; ckk * ocells];
            im2col(ximg, c_in, h, w, kh, kw, stride, oh, ow, &mut cols);
            let cv = view2(&cols, ckk, ocells);
            let mut yv = view2_mut(yimg, c_out, ocells);
            general_mat_mul(1.0, &kv, &cv, 0.0, &mut yv);
            if let Some(b) = bias {
                for (c, &bc) in b.data().iter().enumerate() {
                    for v in &mut yimg[c * ocells..(c + 1) * ocells] {
                        *v += bc;
                    }
                }
            }
        });
    Tensor::from_vec(vec![n, c_out, oh, ow], y)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    dy: &Tensor,
    stride: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (xs, ks) = (x.shape(), kernel.shape());
    let (n, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (c_out, kh, kw) = (ks[0], ks[2], ks[3]);
    let (oh, ow) = conv_out_dims(h, w, kh, kw, stride)?;
    let ckk = c_in * kh * kw;
    let ocells = oh * ow;
    let kv = view2(kernel.data(), c_out, ckk);

    struct Partial {
        dx: Vec<f32>,
        dk: Vec<f32>,
        db: Vec<f32>,
    }
    let partials: Vec<Partial> = dy
        .data()
        .par_chunks(c_out * ocells)
        .zip(x.data().par_chunks(c_in * h * w))
        .map(|(dimg, ximg)| {
            let mut cols = vec![0.0f32; ckk * ocells];
            im2col(ximg, c_in, h, w, kh, kw, stride, oh, ow, &mut cols);
            let dv = view2(dimg, c_out, ocells);
            // dK += dY @ cols.T
            let mut dk = vec![0.0f32; c_out * ckk];
            {
                let cv = view2(&cols, ckk, ocells);
                let mut dkv = view2_mut(&mut dk, c_out, ckk);
                general_mat_mul(1.0, &dv, &cv.t(), 0.0, &mut dkv);
            }
            // dcols = K.T @ dY, then scatter back to the image
            let mut dcols = vec![0.0f32; ckk * ocells];
            {
                let mut dcv = view2_mut(&mut dcols, ckk, ocells);
                general_mat_mul(1.0, &kv.t(), &dv, 0.0, &mut dcv);
            }
            let mut dx = vec![0.0f32; c_in * h * w];
            col2im(&dcols, c_in, h, w, kh, kw, stride, oh, ow, &mut dx);
            let db = (0..c_out)
                .map(|c| dimg[c * ocells..(c + 1) * ocells].iter().sum())
                .collect();
            Partial { dx, dk, db }
        })
        .collect();

    let mut dx = vec![0.0f32; n * c_in * h * w];
    let mut dk = vec![0.0f32; c_out * ckk];
    let mut db = vec![0.0f32; c_out];
    for (i, p) in partials.into_iter().enumerate() {
        dx[i * c_in * h * w..(i + 1) * c_in * h * w].copy_from_slice(&p.dx);
        for (a, v) in dk.iter_mut().zip(p.dk) {
            *a += v;
        }
        for (a, v) in db.iter_mut().zip(p.db) {
            *a += v;
        }
    }
    Ok((
        Tensor::from_vec(xs.to_vec(), dx)?,
        Tensor::from_vec(ks.to_vec(), dk)?,
        Tensor::from_vec(vec![c_out], db)?,
    ))
}

/// Materializes the unrolled linear map of a valid convolution as a dense
/// `[c_out*oh*ow, c_in*h*w]` matrix. Test and equivalence aid; memory heavy.
pub fn conv2d_unrolled_matrix(
    c_in: usize,
    h: usize,
    w: usize,
    kernel: &Tensor,
    stride: usize,
) -> Result<Tensor> {
    let ks = kernel.shape();
    let (c_out, kh, kw) = (ks[0], ks[2], ks[3]);
    let (oh, ow) = conv_out_dims(h, w, kh, kw, stride)?;
    let in_len = c_in * h * w;
    let out_len = c_out * oh * ow;
    let mut m = vec![0.0f32; out_len * in_len];
    let kd = kernel.data();
    for co in 0..c_out {
        for oi in 0..oh {
            for oj in 0..ow {
                let row = (co * oh + oi) * ow + oj;
                for ci in 0..c_in {
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let col = ci * h * w + (oi * stride + ki) * w + (oj * stride + kj);
                            m[row * in_len + col] = kd[((co * c_in + ci) * kh + ki) * kw + kj];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![out_len, in_len], m)
}

// ---------------------------------------------------------------------------
// Losses

/// Numerically stabilized softmax cross-entropy, mean over the batch.
/// Returns the loss and the softmax probabilities (kept for backward).
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f32, Tensor)> {
    let ls = logits.shape();
    if ls.len() != 2 || ls[0] != targets.len() {
        return Err(Error::Dimension {
            op: "softmax_cross_entropy",
            lhs: ls.to_vec(),
            rhs: vec![targets.len()],
        });
    }
    let (n, labels) = (ls[0], ls[1]);
    for &t in targets {
        if t >= labels {
            return Err(Error::Index {
                what: "cross-entropy target",
                index: t,
                len: labels,
            });
        }
    }
    let mut probs = vec![0.0f32; n * labels];
    let mut loss = 0.0f64;
    for (i, row) in logits.data().chunks(labels).enumerate() {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0f32;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            probs[i * labels + j] = e;
            z += e;
        }
        for p in &mut probs[i * labels..(i + 1) * labels] {
            *p /= z;
        }
        loss += f64::from(z.ln() - (row[targets[i]] - m));
    }
    Ok((
        (loss / n as f64) as f32,
        Tensor::from_vec(vec![n, labels], probs)?,
    ))
}

// ---------------------------------------------------------------------------
// Spatial helpers for the margin predictor

/// Zero-pads the two spatial dims of `[n, c, h, w]` by `pad` on every side.
pub fn pad2d(x: &Tensor, pad: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Dimension {
            op: "pad2d",
            lhs: s.to_vec(),
            rhs: vec![4],
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (nh, nw) = (h + 2 * pad, w + 2 * pad);
    let mut y = vec![0.0f32; n * c * nh * nw];
    let xd = x.data();
    for img in 0..n * c {
        for i in 0..h {
            let src = &xd[img * h * w + i * w..img * h * w + (i + 1) * w];
            let dst = img * nh * nw + (i + pad) * nw + pad;
            y[dst..dst + w].copy_from_slice(src);
        }
    }
    Tensor::from_vec(vec![n, c, nh, nw], y)
}

/// Crops the two spatial dims; adjoint of [`pad2d`] when offsets equal the pad.
pub fn crop2d(x: &Tensor, top: usize, left: usize, oh: usize, ow: usize) -> Result<Tensor> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if top + oh > h || left + ow > w {
        return Err(Error::Dimension {
            op: "crop2d",
            lhs: vec![h, w],
            rhs: vec![top + oh, left + ow],
        });
    }
    let mut y = vec![0.0f32; n * c * oh * ow];
    let xd = x.data();
    for img in 0..n * c {
        for i in 0..oh {
            let src = img * h * w + (top + i) * w + left;
            let dst = img * oh * ow + i * ow;
            y[dst..dst + ow].copy_from_slice(&xd[src..src + ow]);
        }
    }
    Tensor::from_vec(vec![n, c, oh, ow], y)
}

/// Nearest-neighbor 2x spatial upsampling.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Dimension {
            op: "upsample2x",
            lhs: s.to_vec(),
            rhs: vec![4],
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut y = vec![0.0f32; n * c * 4 * h * w];
    let xd = x.data();
    let (nh, nw) = (2 * h, 2 * w);
    for img in 0..n * c {
        for i in 0..h {
            for j in 0..w {
                let v = xd[img * h * w + i * w + j];
                let base = img * nh * nw + 2 * i * nw + 2 * j;
                y[base] = v;
                y[base + 1] = v;
                y[base + nw] = v;
                y[base + nw + 1] = v;
            }
        }
    }
    Tensor::from_vec(vec![n, c, nh, nw], y)
}

/// Adjoint of [`upsample2x`]: sums each 2x2 block.
pub fn downsample2x_sum(dy: &Tensor) -> Result<Tensor> {
    let s = dy.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut y = vec![0.0f32; n * c * oh * ow];
    let dd = dy.data();
    for img in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                let base = img * h * w + 2 * i * w + 2 * j;
                y[img * oh * ow + i * ow + j] = dd[base] + dd[base + 1] + dd[base + w] + dd[base + w + 1];
            }
        }
    }
    Tensor::from_vec(vec![n, c, oh, ow], y)
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
        return Err(Error::Dimension {
            op: "concat_channels",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
    let mut y = vec![0.0f32; n * (ca + cb) * hw];
    for i in 0..n {
        let dst = i * (ca + cb) * hw;
        y[dst..dst + ca * hw].copy_from_slice(&a.data()[i * ca * hw..(i + 1) * ca * hw]);
        y[dst + ca * hw..dst + (ca + cb) * hw]
            .copy_from_slice(&b.data()[i * cb * hw..(i + 1) * cb * hw]);
    }
    Tensor::from_vec(vec![n, ca + cb, sa[2], sa[3]], y)
}

// ---------------------------------------------------------------------------
// Patched first affine layer

/// Constant context for a family of patched inputs sharing one first affine
/// layer: every row is `clean image + perturbation restricted to mask cells`.
/// The center path equals `x W^T + b` plus corrections over mask columns and
/// the radius path touches mask columns of `|W|` only, so the first layer of
/// a placement sweep costs O(mask) instead of O(input) per placement.
#[derive(Clone, Debug)]
pub struct PatchFamily {
    /// Flattened clean images, `[batch, d]`.
    pub images: Tensor,
    /// One entry per output row: (image index, flat input indices under the mask).
    pub rows: Vec<(usize, Vec<usize>)>,
    /// Interpolation toward the full intensity range, in [0, 1].
    pub eps: f32,
    /// Per-channel midpoint and half-width of the intensity range.
    pub mid: Vec<f32>,
    pub half: Vec<f32>,
    /// Spatial size (h*w); flat index j belongs to channel j / channel_size.
    pub channel_size: usize,
}

impl PatchFamily {
    pub fn channel_of(&self, flat: usize) -> usize {
        flat / self.channel_size
    }

    /// Center shift of input j for its image: `mu_j - x_j = eps*(mid - x_j)`.
    pub fn center_shift(&self, image_row: &[f32], flat: usize) -> f32 {
        self.eps * (self.mid[self.channel_of(flat)] - image_row[flat])
    }

    pub fn radius(&self, flat: usize) -> f32 {
        self.eps * self.half[self.channel_of(flat)]
    }
}

/// Center rows of the patched first affine layer: row p equals
/// `x_i W^T + b` plus `sum_{j in mask} W[:,j] * eps*(mid_j - x_i[j])`.
pub fn patch_affine_center(w: &Tensor, bias: Option<&Tensor>, family: &PatchFamily) -> Result<Tensor> {
    let base = affine(&family.images, w, bias)?;
    let out = w.shape()[0];
    let d = w.shape()[1];
    if family.images.shape()[1] != d {
        return Err(Error::Dimension {
            op: "patch_affine_center",
            lhs: family.images.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let wd = w.data();
    let mut data = vec![0.0f32; family.rows.len() * out];
    data.par_chunks_mut(64 * out)
        .zip(family.rows.par_chunks(64))
        .for_each(|(block, rows)| {
            for ((img, cells), row) in rows.iter().zip(block.chunks_mut(out)) {
                row.copy_from_slice(&base.data()[img * out..(img + 1) * out]);
                let image_row = &family.images.data()[img * d..(img + 1) * d];
                for &j in cells {
                    let shift = family.center_shift(image_row, j);
                    if shift != 0.0 {
                        for (o, r) in row.iter_mut().enumerate() {
                            *r += wd[o * d + j] * shift;
                        }
                    }
                }
            }
        });
    Tensor::from_vec(vec![family.rows.len(), out], data)
}

/// Radius rows of the patched first affine layer: row p equals
/// `sum_{j in mask} |W[:,j]| * eps*half_j` (zero outside the mask).
pub fn patch_affine_radius(w: &Tensor, family: &PatchFamily) -> Result<Tensor> {
    let out = w.shape()[0];
    let d = w.shape()[1];
    let wd = w.data();
    let mut data = vec![0.0f32; family.rows.len() * out];
    data.par_chunks_mut(64 * out)
        .zip(family.rows.par_chunks(64))
        .for_each(|(block, rows)| {
            for ((_, cells), row) in rows.iter().zip(block.chunks_mut(out)) {
                for &j in cells {
                    let r = family.radius(j);
                    if r != 0.0 {
                        for (o, v) in row.iter_mut().enumerate() {
                            *v += wd[o * d + j].abs() * r;
                        }
                    }
                }
            }
        });
    Tensor::from_vec(vec![family.rows.len(), out], data)
}

// ---------------------------------------------------------------------------
// Sparse-adversary first-layer half-widths

/// Per-row sum of the `k` largest per-pixel aggregated magnitudes.
///
/// `w` is `[out, channels*pixels]` in channel-planar layout; a pixel spans one
/// entry per channel. Returns the half-width vector `[out]` and the selected
/// pixel indices per row (ties broken toward the lower pixel index).
pub fn topk_abs_row_sums(
    w: &Tensor,
    k: usize,
    channels: usize,
) -> Result<(Tensor, Vec<Vec<usize>>)> {
    let s = w.shape();
    if s.len() != 2 || s[1] % channels != 0 {
        return Err(Error::Dimension {
            op: "topk_abs_row_sums",
            lhs: s.to_vec(),
            rhs: vec![channels],
        });
    }
    let (out, cols) = (s[0], s[1]);
    let pixels = cols / channels;
    if k > pixels {
        return Err(Error::Config(format!(
            "sparse k={k} exceeds input pixel count {pixels}"
        )));
    }
    let mut sums = vec![0.0f32; out];
    let mut selected = Vec::with_capacity(out);
    for o in 0..out {
        let row = &w.data()[o * cols..(o + 1) * cols];
        let mut agg: Vec<(f32, usize)> = (0..pixels)
            .map(|p| {
                let mut a = 0.0f32;
                for c in 0..channels {
                    a += row[c * pixels + p].abs();
                }
                (a, p)
            })
            .collect();
        agg.sort_unstable_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let top = &agg[..k];
        sums[o] = top.iter().map(|&(v, _)| v).sum();
        selected.push(top.iter().map(|&(_, p)| p).collect());
    }
    Ok((Tensor::from_vec(vec![out], sums)?, selected))
}
