//! Per-sample stochastic view augmentation and cross-sample mixing.
//!
//! Augmentation is a pure function of `(image, params, seed)`; the trainer
//! derives one seed per (run seed, epoch, sample, view). Mixing composes two
//! already-augmented query views into a new query, either by rectangular
//! patch replacement (CutMix) or by affine blending (MixUp).

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::rng::{stream_rng, StreamTag};

/// View pipeline: random resized crop, horizontal flip, color jitter,
/// random grayscale. Strengths follow the usual contrastive recipe minus
/// blur; zeroing every probability and pinning the crop to scale 1 turns
/// the pipeline into the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewParams {
    /// Crop area fraction range (min, max], within (0, 1].
    pub crop_scale: (f64, f64),
    /// Crop aspect ratio range.
    pub crop_aspect: (f64, f64),
    pub flip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub grayscale_prob: f64,
}

impl Default for ViewParams {
    fn default() -> Self {
        ViewParams {
            crop_scale: (0.2, 1.0),
            crop_aspect: (0.75, 4.0 / 3.0),
            flip_prob: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            grayscale_prob: 0.2,
        }
    }
}

impl ViewParams {
    /// Crop + flip only (the fine-tuning recipe).
    pub fn crop_flip_only() -> Self {
        ViewParams {
            crop_scale: (0.5, 1.0),
            crop_aspect: (0.75, 4.0 / 3.0),
            flip_prob: 0.5,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            grayscale_prob: 0.0,
        }
    }

    /// Identity pipeline (every stochastic step disabled).
    pub fn identity() -> Self {
        ViewParams {
            crop_scale: (1.0, 1.0),
            crop_aspect: (1.0, 1.0),
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            grayscale_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, p) in [
            ("augment.flip_prob", self.flip_prob),
            ("augment.grayscale_prob", self.grayscale_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                problems.push(format!("{name} must lie in [0,1], got {p}"));
            }
        }
        if !(self.crop_scale.0 > 0.0
            && self.crop_scale.0 <= self.crop_scale.1
            && self.crop_scale.1 <= 1.0)
        {
            problems.push(format!(
                "augment.crop_scale must satisfy 0 < min <= max <= 1, got {:?}",
                self.crop_scale
            ));
        }
        if !(self.crop_aspect.0 > 0.0 && self.crop_aspect.0 <= self.crop_aspect.1) {
            problems.push(format!(
                "augment.crop_aspect must satisfy 0 < min <= max, got {:?}",
                self.crop_aspect
            ));
        }
        for (name, s) in [
            ("augment.brightness", self.brightness),
            ("augment.contrast", self.contrast),
            ("augment.saturation", self.saturation),
        ] {
            if s < 0.0 {
                problems.push(format!("{name} must be >= 0, got {s}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

fn sample_crop(rng: &mut impl Rng, params: &ViewParams, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target = area * rng.gen_range(params.crop_scale.0..=params.crop_scale.1);
        let ratio = rng
            .gen_range(params.crop_aspect.0.ln()..=params.crop_aspect.1.ln())
            .exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let x0 = rng.gen_range(0..=(w - cw));
            let y0 = rng.gen_range(0..=(h - ch));
            return (y0, x0, ch, cw);
        }
    }
    (0, 0, h, w)
}

fn bilinear_crop_resize(
    img: &[f32],
    c: usize,
    h: usize,
    w: usize,
    (y0, x0, ch, cw): (usize, usize, usize, usize),
) -> Vec<f32> {
    if (y0, x0, ch, cw) == (0, 0, h, w) {
        return img.to_vec();
    }
    let sy = ch as f64 / h as f64;
    let sx = cw as f64 / w as f64;
    let mut out = vec![0.0f32; c * h * w];
    for ci in 0..c {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            let fy = ((y as f64 + 0.5) * sy - 0.5 + y0 as f64).clamp(0.0, (h - 1) as f64);
            let iy0 = fy.floor() as usize;
            let iy1 = (iy0 + 1).min(h - 1);
            let wy = (fy - iy0 as f64) as f32;
            for x in 0..w {
                let fx = ((x as f64 + 0.5) * sx - 0.5 + x0 as f64).clamp(0.0, (w - 1) as f64);
                let ix0 = fx.floor() as usize;
                let ix1 = (ix0 + 1).min(w - 1);
                let wx = (fx - ix0 as f64) as f32;
                let v00 = plane[iy0 * w + ix0];
                let v01 = plane[iy0 * w + ix1];
                let v10 = plane[iy1 * w + ix0];
                let v11 = plane[iy1 * w + ix1];
                let top = v00 + (v01 - v00) * wx;
                let bot = v10 + (v11 - v10) * wx;
                out[(ci * h + y) * w + x] = top + (bot - top) * wy;
            }
        }
    }
    out
}

fn luma(img: &[f32], c: usize, plane: usize, px: usize) -> f32 {
    if c == 3 {
        0.299 * img[px] + 0.587 * img[plane + px] + 0.114 * img[2 * plane + px]
    } else {
        (0..c).map(|ci| img[ci * plane + px]).sum::<f32>() / c as f32
    }
}

/// Apply the stochastic view pipeline. Pure in `(image, params, seed)`;
/// output values are clamped to `[0,1]` and keep the input shape.
pub fn augment_view(image: &Tensor<f32>, params: &ViewParams, seed: u64) -> Tensor<f32> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let mut rng = stream_rng(seed, StreamTag::Augment, 0, 0);

    let rect = sample_crop(&mut rng, params, h, w);
    let mut img = bilinear_crop_resize(image.data(), c, h, w, rect);

    if params.flip_prob > 0.0 && rng.gen_range(0.0..1.0) < params.flip_prob {
        for ci in 0..c {
            for y in 0..h {
                img[(ci * h + y) * w..(ci * h + y + 1) * w].reverse();
            }
        }
    }

    if params.brightness > 0.0 {
        let f = rng.gen_range((1.0 - params.brightness).max(0.0)..=1.0 + params.brightness) as f32;
        img.iter_mut().for_each(|v| *v *= f);
    }
    if params.contrast > 0.0 {
        let f = rng.gen_range((1.0 - params.contrast).max(0.0)..=1.0 + params.contrast) as f32;
        let mean = (0..plane).map(|px| luma(&img, c, plane, px)).sum::<f32>() / plane as f32;
        img.iter_mut().for_each(|v| *v = (*v - mean) * f + mean);
    }
    if params.saturation > 0.0 {
        let f = rng.gen_range((1.0 - params.saturation).max(0.0)..=1.0 + params.saturation) as f32;
        for px in 0..plane {
            let l = luma(&img, c, plane, px);
            for ci in 0..c {
                let v = &mut img[ci * plane + px];
                *v = (*v - l) * f + l;
            }
        }
    }
    if params.grayscale_prob > 0.0 && rng.gen_range(0.0..1.0) < params.grayscale_prob {
        for px in 0..plane {
            let l = luma(&img, c, plane, px);
            for ci in 0..c {
                img[ci * plane + px] = l;
            }
        }
    }

    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new(vec![c, h, w], img).expect("augment preserves shape")
}

/// One draw from Beta(alpha, alpha); alpha = 1 is Uniform[0,1].
pub fn sample_lambda(alpha: f64, seed: u64) -> Result<f64> {
    if alpha <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "beta parameter alpha must be positive, got {alpha}"
        )));
    }
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::InvalidArgument(format!("beta({alpha},{alpha}): {e}")))?;
    let mut rng = stream_rng(seed, StreamTag::Mix, 0, 0);
    Ok(beta.sample(&mut rng))
}

/// Binary CutMix mask: 1 keeps the anchor pixel, 0 takes the positive's.
/// The cut is a `round(H*sqrt(1-lambda)) x round(W*sqrt(1-lambda))`
/// rectangle centered at a uniform pixel and clipped to bounds; an
/// oversized side covers its whole axis. Returns the mask and the exact
/// post-clip one-fraction `lambda_adjusted`.
pub fn make_cutmix_mask(h: usize, w: usize, lambda: f64, seed: u64) -> Result<(Vec<u8>, f64)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "lambda must lie in [0,1], got {lambda}"
        )));
    }
    let cut = (1.0 - lambda).sqrt();
    let rh = (h as f64 * cut).round() as usize;
    let rw = (w as f64 * cut).round() as usize;

    let mut rng = stream_rng(seed, StreamTag::Mix, 1, 0);
    let cy = rng.gen_range(0..h);
    let cx = rng.gen_range(0..w);

    let (y0, y1) = if rh >= h {
        (0, h)
    } else {
        let lo = cy.saturating_sub(rh / 2);
        (lo.min(h - rh), lo.min(h - rh) + rh)
    };
    let (x0, x1) = if rw >= w {
        (0, w)
    } else {
        let lo = cx.saturating_sub(rw / 2);
        (lo.min(w - rw), lo.min(w - rw) + rw)
    };

    let mut mask = vec![1u8; h * w];
    if rh > 0 && rw > 0 {
        for y in y0..y1 {
            mask[y * w + x0..y * w + x1].fill(0);
        }
    }
    let ones = mask.iter().filter(|&&m| m == 1).count();
    Ok((mask, ones as f64 / (h * w) as f64))
}

/// A mixed query sample with its provenance.
#[derive(Clone, Debug)]
pub struct MixResult {
    pub mixed: Tensor<f32>,
    /// Binary mask (empty for MixUp).
    pub mask: Vec<u8>,
    /// Exact anchor-pixel fraction; the loss must consume this value, never
    /// the pre-clip lambda.
    pub lambda_adjusted: f64,
    /// (anchor id, positive id).
    pub parents: (u32, u32),
}

/// Rectangular patch replacement: `x_hat = M .* x_a + (1-M) .* x_p`. Every
/// output pixel equals the corresponding pixel of exactly one parent.
pub fn cutmix(
    x_a: &Tensor<f32>,
    x_p: &Tensor<f32>,
    mask: &[u8],
    parents: (u32, u32),
) -> Result<MixResult> {
    if x_a.shape() != x_p.shape() {
        return Err(Error::shape(
            "cutmix",
            format!("parents differ: {:?} vs {:?}", x_a.shape(), x_p.shape()),
        ));
    }
    let (c, h, w) = (x_a.shape()[0], x_a.shape()[1], x_a.shape()[2]);
    if mask.len() != h * w {
        return Err(Error::shape(
            "cutmix",
            format!("mask has {} cells for {}x{} image", mask.len(), h, w),
        ));
    }
    let mut mixed = x_a.clone();
    for ci in 0..c {
        let base = ci * h * w;
        for (px, &m) in mask.iter().enumerate() {
            if m == 0 {
                mixed.data_mut()[base + px] = x_p.data()[base + px];
            }
        }
    }
    let ones = mask.iter().filter(|&&m| m == 1).count();
    Ok(MixResult {
        mixed,
        mask: mask.to_vec(),
        lambda_adjusted: ones as f64 / (h * w) as f64,
        parents,
    })
}

/// Affine blending alternative: `x_hat = lambda*x_a + (1-lambda)*x_p`.
pub fn mixup(
    x_a: &Tensor<f32>,
    x_p: &Tensor<f32>,
    lambda: f64,
    parents: (u32, u32),
) -> Result<MixResult> {
    if x_a.shape() != x_p.shape() {
        return Err(Error::shape(
            "mixup",
            format!("parents differ: {:?} vs {:?}", x_a.shape(), x_p.shape()),
        ));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "lambda must lie in [0,1], got {lambda}"
        )));
    }
    let l = lambda as f32;
    let mut mixed = x_a.clone();
    for (m, &p) in mixed.data_mut().iter_mut().zip(x_p.data()) {
        *m = l * *m + (1.0 - l) * p;
    }
    Ok(MixResult {
        mixed,
        mask: Vec::new(),
        lambda_adjusted: lambda,
        parents,
    })
}
