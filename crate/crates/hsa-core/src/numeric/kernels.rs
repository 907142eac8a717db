//! Forward and adjoint kernels for the compute-heavy ops.
//!
//! Batch-parallel loops write disjoint output slices and keep all float
//! accumulation in a fixed order, so results are bit-identical regardless of
//! thread count.

use rayon::prelude::*;

use super::matmul::{matmul_abt_acc, matmul_set};
use super::tensor::{dot, Scalar, Tensor};

/// Valid output range `[lo, hi)` such that `0 <= ox*stride + k_off < in_limit`.
#[inline]
fn out_range(in_limit: usize, k_off: isize, stride: usize, out_limit: usize) -> (usize, usize) {
    let lo = if k_off >= 0 {
        0
    } else {
        ((-k_off) as usize).div_ceil(stride)
    };
    let hi_raw = in_limit as isize - k_off;
    if hi_raw <= 0 {
        return (0, 0);
    }
    let hi = (hi_raw as usize).div_ceil(stride).min(out_limit);
    (lo.min(hi), hi)
}

pub fn conv2d_out_spatial(h: usize, w: usize, k: usize, stride: usize) -> (usize, usize) {
    let pad = k / 2;
    ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
}

/// Unfold one image `[Ci,H,W]` into `[Ci*k*k, Ho*Wo]`. `col` must be zeroed;
/// padding cells are simply left untouched.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let pad = (k / 2) as isize;
    for c in 0..ci {
        let xp = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            let y_off = ky as isize - pad;
            let (oy_lo, oy_hi) = out_range(h, y_off, stride, ho);
            for kx in 0..k {
                let x_off = kx as isize - pad;
                let (ox_lo, ox_hi) = out_range(w, x_off, stride, wo);
                if ox_lo >= ox_hi {
                    continue;
                }
                let crow = &mut col[((c * k + ky) * k + kx) * ho * wo..((c * k + ky) * k + kx + 1) * ho * wo];
                for oy in oy_lo..oy_hi {
                    let iy = ((oy * stride) as isize + y_off) as usize;
                    let xrow = &xp[iy * w..(iy + 1) * w];
                    let dst = &mut crow[oy * wo + ox_lo..oy * wo + ox_hi];
                    if stride == 1 {
                        let ix0 = (ox_lo as isize + x_off) as usize;
                        dst.copy_from_slice(&xrow[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for (i, d) in dst.iter_mut().enumerate() {
                            let ix = (((ox_lo + i) * stride) as isize + x_off) as usize;
                            *d = xrow[ix];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the adjoint of [`im2col`]: fold `[Ci*k*k, Ho*Wo]` back onto
/// the `[Ci,H,W]` input gradient.
#[allow(clippy::too_many_arguments)]
fn col2im_acc<T: Scalar>(
    col: &[T],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let pad = (k / 2) as isize;
    for c in 0..ci {
        let dxp = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            let y_off = ky as isize - pad;
            let (oy_lo, oy_hi) = out_range(h, y_off, stride, ho);
            for kx in 0..k {
                let x_off = kx as isize - pad;
                let (ox_lo, ox_hi) = out_range(w, x_off, stride, wo);
                if ox_lo >= ox_hi {
                    continue;
                }
                let crow = &col[((c * k + ky) * k + kx) * ho * wo..((c * k + ky) * k + kx + 1) * ho * wo];
                for oy in oy_lo..oy_hi {
                    let iy = ((oy * stride) as isize + y_off) as usize;
                    let dxrow = &mut dxp[iy * w..(iy + 1) * w];
                    let src = &crow[oy * wo + ox_lo..oy * wo + ox_hi];
                    if stride == 1 {
                        let ix0 = (ox_lo as isize + x_off) as usize;
                        for (d, &s) in dxrow[ix0..ix0 + (ox_hi - ox_lo)].iter_mut().zip(src.iter()) {
                            *d += s;
                        }
                    } else {
                        for (i, &s) in src.iter().enumerate() {
                            let ix = (((ox_lo + i) * stride) as isize + x_off) as usize;
                            dxrow[ix] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Images per work item; fixed so parallel reductions stay deterministic
/// for any thread count, and im2col buffers get reused within a chunk.
const BATCH_CHUNK: usize = 8;

/// 2-D convolution via im2col + tiled matmul, zero padding `k/2` so stride-1
/// output matches the input spatially. `x`: [B,Ci,H,W], `w`: [Co,Ci,k,k].
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize) -> Tensor<T> {
    let (b, ci, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let (ho, wo) = conv2d_out_spatial(h, wid, k, stride);
    let spatial = ho * wo;
    let patch = ci * k * k;
    let mut out = Tensor::zeros(&[b, co, ho, wo]);

    let wdat = w.data();
    out.data_mut()
        .par_chunks_mut(BATCH_CHUNK * co * spatial)
        .zip(x.data().par_chunks(BATCH_CHUNK * ci * h * wid))
        .for_each(|(ochunk, xchunk)| {
            let n = xchunk.len() / (ci * h * wid);
            if k == 1 && stride == 1 {
                for i in 0..n {
                    matmul_set(
                        &mut ochunk[i * co * spatial..(i + 1) * co * spatial],
                        wdat,
                        &xchunk[i * ci * h * wid..(i + 1) * ci * h * wid],
                        co,
                        ci,
                        spatial,
                    );
                }
            } else {
                T::with_scratch(patch * spatial, |col| {
                    col.fill(T::ZERO);
                    for i in 0..n {
                        im2col(
                            &xchunk[i * ci * h * wid..(i + 1) * ci * h * wid],
                            ci,
                            h,
                            wid,
                            k,
                            stride,
                            ho,
                            wo,
                            col,
                        );
                        matmul_set(
                            &mut ochunk[i * co * spatial..(i + 1) * co * spatial],
                            wdat,
                            col,
                            co,
                            patch,
                            spatial,
                        );
                    }
                });
            }
        });
    out
}

/// Input adjoint of [`conv2d_forward`]. Stride-1 kernels run through the
/// forward path with 180°-rotated, channel-swapped weights; stride-2 falls
/// back to a col2im scatter.
pub fn conv2d_backward_input<T: Scalar>(
    x_shape: &[usize],
    w: &Tensor<T>,
    stride: usize,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let (ci, h, wid) = (x_shape[1], x_shape[2], x_shape[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let (ho, wo) = (grad_out.shape()[2], grad_out.shape()[3]);
    let spatial = ho * wo;
    let patch = ci * k * k;

    if stride == 1 {
        let mut wrot = Tensor::zeros(&[ci, co, k, k]);
        {
            let wd = w.data();
            let rd = wrot.data_mut();
            for c_out in 0..co {
                for c_in in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            rd[((c_in * co + c_out) * k + (k - 1 - ky)) * k + (k - 1 - kx)] =
                                wd[((c_out * ci + c_in) * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
        return conv2d_forward(grad_out, &wrot, 1);
    }

    // w transposed to [Ci*k*k, Co]
    let mut wt = vec![T::ZERO; patch * co];
    for c_out in 0..co {
        for p in 0..patch {
            wt[p * co + c_out] = w.data()[c_out * patch + p];
        }
    }

    let mut dx = Tensor::zeros(x_shape);
    dx.data_mut()
        .par_chunks_mut(BATCH_CHUNK * ci * h * wid)
        .zip(grad_out.data().par_chunks(BATCH_CHUNK * co * spatial))
        .for_each(|(dxchunk, gchunk)| {
            let n = gchunk.len() / (co * spatial);
            T::with_scratch(patch * spatial, |dcol| {
                for i in 0..n {
                    matmul_set(
                        dcol,
                        &wt,
                        &gchunk[i * co * spatial..(i + 1) * co * spatial],
                        patch,
                        co,
                        spatial,
                    );
                    col2im_acc(
                        dcol,
                        ci,
                        h,
                        wid,
                        k,
                        stride,
                        ho,
                        wo,
                        &mut dxchunk[i * ci * h * wid..(i + 1) * ci * h * wid],
                    );
                }
            });
        });
    dx
}

/// Weight adjoint of [`conv2d_forward`]. Fixed-size batch chunks are summed
/// in order, so the reduction is deterministic for any thread count.
pub fn conv2d_backward_weight<T: Scalar>(
    x: &Tensor<T>,
    w_shape: &[usize],
    stride: usize,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let (b, ci, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w_shape[0], w_shape[2]);
    let (ho, wo) = (grad_out.shape()[2], grad_out.shape()[3]);
    let spatial = ho * wo;
    let patch = ci * k * k;

    let xdat = x.data();
    let gdat = grad_out.data();
    let partials: Vec<Vec<T>> = (0..b.div_ceil(BATCH_CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut dwp = vec![T::ZERO; co * patch];
            if k == 1 && stride == 1 {
                for bi in chunk * BATCH_CHUNK..((chunk + 1) * BATCH_CHUNK).min(b) {
                    let xb = &xdat[bi * ci * h * wid..(bi + 1) * ci * h * wid];
                    let gb = &gdat[bi * co * spatial..(bi + 1) * co * spatial];
                    matmul_abt_acc(&mut dwp, gb, xb, co, patch, spatial);
                }
            } else {
                T::with_scratch(patch * spatial, |col| {
                    col.fill(T::ZERO);
                    for bi in chunk * BATCH_CHUNK..((chunk + 1) * BATCH_CHUNK).min(b) {
                        let xb = &xdat[bi * ci * h * wid..(bi + 1) * ci * h * wid];
                        let gb = &gdat[bi * co * spatial..(bi + 1) * co * spatial];
                        im2col(xb, ci, h, wid, k, stride, ho, wo, col);
                        matmul_abt_acc(&mut dwp, gb, col, co, patch, spatial);
                    }
                });
            }
            dwp
        })
        .collect();

    let mut dw = Tensor::zeros(w_shape);
    for p in partials {
        for (d, &s) in dw.data_mut().iter_mut().zip(p.iter()) {
            *d += s;
        }
    }
    dw
}

/// Both adjoints of [`conv2d_forward`].
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    (
        conv2d_backward_input(x.shape(), w, stride, grad_out),
        conv2d_backward_weight(x, w.shape(), stride, grad_out),
    )
}

/// Per-channel mean and biased variance over batch and spatial axes.
pub fn batch_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let plane = h * w;
    let n = T::from_f64((b * plane) as f64);
    let mut mean = vec![T::ZERO; c];
    let mut var = vec![T::ZERO; c];
    for ch in 0..c {
        let mut s = T::ZERO;
        for bi in 0..b {
            let p = &x.data()[(bi * c + ch) * plane..(bi * c + ch + 1) * plane];
            for &v in p {
                s += v;
            }
        }
        mean[ch] = s / n;
    }
    for ch in 0..c {
        let m = mean[ch];
        let mut s = T::ZERO;
        for bi in 0..b {
            let p = &x.data()[(bi * c + ch) * plane..(bi * c + ch + 1) * plane];
            for &v in p {
                let d = v - m;
                s += d * d;
            }
        }
        var[ch] = s / n;
    }
    (mean, var)
}

/// Normalize with the given per-channel statistics and affine parameters.
pub fn batchnorm_apply<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> Tensor<T> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let plane = h * w;
    let mut out = Tensor::zeros(x.shape());
    let od = out.data_mut();
    for bi in 0..b {
        for ch in 0..c {
            let inv = T::ONE / (var[ch] + eps).sqrt();
            let g = gamma[ch] * inv;
            let sh = beta[ch] - mean[ch] * g;
            let base = (bi * c + ch) * plane;
            let src = &x.data()[base..base + plane];
            let dst = &mut od[base..base + plane];
            for (d, &s) in dst.iter_mut().zip(src.iter()) {
                *d = s * g + sh;
            }
        }
    }
    out
}

/// Batchnorm adjoint. `training` selects the full batch-statistics formula;
/// eval mode treats the statistics as constants.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
    grad_out: &Tensor<T>,
    training: bool,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let plane = h * w;
    let n = T::from_f64((b * plane) as f64);
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![T::ZERO; c];
    let mut dbeta = vec![T::ZERO; c];

    for ch in 0..c {
        let m = mean[ch];
        let inv = T::ONE / (var[ch] + eps).sqrt();
        let mut sum_g = T::ZERO;
        let mut sum_gx = T::ZERO;
        for bi in 0..b {
            let base = (bi * c + ch) * plane;
            let g = &grad_out.data()[base..base + plane];
            let xs = &x.data()[base..base + plane];
            for (gv, xv) in g.iter().zip(xs.iter()) {
                sum_g += *gv;
                sum_gx += *gv * (*xv - m) * inv;
            }
        }
        dgamma[ch] = sum_gx;
        dbeta[ch] = sum_g;

        let gam = gamma[ch];
        let dxd = dx.data_mut();
        for bi in 0..b {
            let base = (bi * c + ch) * plane;
            for i in 0..plane {
                let gv = grad_out.data()[base + i];
                let xhat = (x.data()[base + i] - m) * inv;
                dxd[base + i] = if training {
                    gam * inv * (gv - sum_g / n - xhat * sum_gx / n)
                } else {
                    gam * inv * gv
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Affine layer `y = x W^T + b`. `x`: [B,I], `w`: [O,I], `b`: [O].
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
    let (bs, inf) = (x.shape()[0], x.shape()[1]);
    let of = w.shape()[0];
    let mut out = Tensor::zeros(&[bs, of]);
    let od = out.data_mut();
    for bi in 0..bs {
        let xrow = &x.data()[bi * inf..(bi + 1) * inf];
        let orow = &mut od[bi * of..(bi + 1) * of];
        for (o, orv) in orow.iter_mut().enumerate() {
            let mut acc = dot(xrow, &w.data()[o * inf..(o + 1) * inf]);
            if let Some(bias) = b {
                acc += bias.data()[o];
            }
            *orv = acc;
        }
    }
    out
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (bs, inf) = (x.shape()[0], x.shape()[1]);
    let of = w.shape()[0];
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[of]);

    for bi in 0..bs {
        let grow = &grad_out.data()[bi * of..(bi + 1) * of];
        let xrow = x.data()[bi * inf..(bi + 1) * inf].to_vec();
        let dxrow = &mut dx.data_mut()[bi * inf..(bi + 1) * inf];
        for (o, &g) in grow.iter().enumerate() {
            let wrow = &w.data()[o * inf..(o + 1) * inf];
            for i in 0..inf {
                dxrow[i] += g * wrow[i];
            }
            let dwrow = &mut dw.data_mut()[o * inf..(o + 1) * inf];
            for i in 0..inf {
                dwrow[i] += g * xrow[i];
            }
            db.data_mut()[o] += g;
        }
    }
    (dx, dw, db)
}

/// Batch-mean InfoNCE with per-row weights, computed with max-subtracted
/// log-sum-exp. Returns the scalar loss.
///
/// Per row: `L_b = -log( exp(q·k⁺/τ) / (exp(q·k⁺/τ) + Σ_i exp(q·k_i/τ)) )`,
/// output `= (1/B) Σ_b w_b · L_b`. Zero negatives give a zero loss.
pub fn info_nce_forward<T: Scalar>(
    q: &Tensor<T>,
    k_pos: &Tensor<T>,
    negatives: &Tensor<T>,
    weights: &[T],
    tau: f64,
) -> T {
    let (b, d) = (q.shape()[0], q.shape()[1]);
    let kn = negatives.shape()[0];
    let inv_tau = T::from_f64(1.0 / tau);
    let mut total = T::ZERO;
    for bi in 0..b {
        let qr = &q.data()[bi * d..(bi + 1) * d];
        let lp = dot(qr, &k_pos.data()[bi * d..(bi + 1) * d]) * inv_tau;
        let mut m = lp;
        let mut logits = Vec::with_capacity(kn);
        for i in 0..kn {
            let l = dot(qr, &negatives.data()[i * d..(i + 1) * d]) * inv_tau;
            m = m.maxv(l);
            logits.push(l);
        }
        let mut sum = (lp - m).exp();
        for &l in &logits {
            sum += (l - m).exp();
        }
        let lse = m + sum.ln();
        total += weights[bi] * (lse - lp);
    }
    total / T::from_f64(b as f64)
}

/// Gradient of [`info_nce_forward`] with respect to the queries only; keys
/// and negatives are contrast targets, not differentiable inputs.
pub fn info_nce_backward<T: Scalar>(
    q: &Tensor<T>,
    k_pos: &Tensor<T>,
    negatives: &Tensor<T>,
    weights: &[T],
    tau: f64,
    grad: T,
) -> Tensor<T> {
    let (b, d) = (q.shape()[0], q.shape()[1]);
    let kn = negatives.shape()[0];
    let inv_tau = T::from_f64(1.0 / tau);
    let scale_b = grad / T::from_f64(b as f64);
    let mut dq = Tensor::zeros(q.shape());
    for bi in 0..b {
        let qr = &q.data()[bi * d..(bi + 1) * d];
        let kp = &k_pos.data()[bi * d..(bi + 1) * d];
        let lp = dot(qr, kp) * inv_tau;
        let mut m = lp;
        let mut logits = Vec::with_capacity(kn);
        for i in 0..kn {
            let l = dot(qr, &negatives.data()[i * d..(i + 1) * d]) * inv_tau;
            m = m.maxv(l);
            logits.push(l);
        }
        let mut sum = (lp - m).exp();
        for &l in &logits {
            sum += (l - m).exp();
        }
        let lse = m + sum.ln();

        let coeff = scale_b * weights[bi] * inv_tau;
        let p_pos = (lp - lse).exp();
        let dqrow = &mut dq.data_mut()[bi * d..(bi + 1) * d];
        let cp = coeff * (p_pos - T::ONE);
        for i in 0..d {
            dqrow[i] += cp * kp[i];
        }
        for (i, &l) in logits.iter().enumerate() {
            let ci = coeff * (l - lse).exp();
            let neg = &negatives.data()[i * d..(i + 1) * d];
            for j in 0..d {
                dqrow[j] += ci * neg[j];
            }
        }
    }
    dq
}

/// Mean softmax cross-entropy over integer class targets.
pub fn softmax_ce_forward<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> T {
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    let mut total = T::ZERO;
    for bi in 0..b {
        let row = &logits.data()[bi * c..(bi + 1) * c];
        let mut m = row[0];
        for &v in row.iter() {
            m = m.maxv(v);
        }
        let mut sum = T::ZERO;
        for &v in row.iter() {
            sum += (v - m).exp();
        }
        let lse = m + sum.ln();
        total += lse - row[targets[bi]];
    }
    total / T::from_f64(b as f64)
}

pub fn softmax_ce_backward<T: Scalar>(logits: &Tensor<T>, targets: &[usize], grad: T) -> Tensor<T> {
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    let scale = grad / T::from_f64(b as f64);
    let mut dl = Tensor::zeros(logits.shape());
    for bi in 0..b {
        let row = &logits.data()[bi * c..(bi + 1) * c];
        let mut m = row[0];
        for &v in row.iter() {
            m = m.maxv(v);
        }
        let mut sum = T::ZERO;
        for &v in row.iter() {
            sum += (v - m).exp();
        }
        let drow = &mut dl.data_mut()[bi * c..(bi + 1) * c];
        for i in 0..c {
            let p = (row[i] - m).exp() / sum;
            let t = if i == targets[bi] { T::ONE } else { T::ZERO };
            drow[i] = scale * (p - t);
        }
    }
    dl
}
