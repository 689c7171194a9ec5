use rand::Rng;
use serde::{Deserialize, Serialize};

use super::InputPair;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const RGB_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const RGB_STD: [f64; 3] = [0.229, 0.224, 0.225];
pub const DEPTH_MEAN: f64 = RGB_MEAN[0];
pub const DEPTH_STD: f64 = RGB_STD[0];

/// Images are first resized to `target · RESIZE_NUM / RESIZE_DEN`.
pub const RESIZE_NUM: usize = 238;
pub const RESIZE_DEN: usize = 224;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub target_height: usize,
    pub target_width: usize,
    /// Probability of a flip; the axis is then chosen uniformly.
    pub flip_p: f64,
    pub sharpness_p: f64,
    pub sharpness_factor: f64,
    pub autocontrast_p: f64,
}

impl AugmentPolicy {
    pub fn train(target_height: usize, target_width: usize) -> Self {
        Self {
            target_height,
            target_width,
            flip_p: 0.5,
            sharpness_p: 0.005,
            sharpness_factor: 2.0,
            autocontrast_p: 0.10,
        }
    }

    /// Resize, crop and normalize only.
    pub fn eval(target_height: usize, target_width: usize) -> Self {
        Self {
            flip_p: 0.0,
            sharpness_p: 0.0,
            autocontrast_p: 0.0,
            ..Self::train(target_height, target_width)
        }
    }

    pub fn resize_dims(&self) -> (usize, usize) {
        let scale = |t: usize| ((t * RESIZE_NUM) as f64 / RESIZE_DEN as f64).round() as usize;
        (scale(self.target_height), scale(self.target_width))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipAxis {
    Horizontal,
    Vertical,
}

fn dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape()[..] {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::dim(format!("image must be [H, W, C], got {:?}", t.shape()))),
    }
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &Tensor, nh: usize, nw: usize) -> Result<Tensor> {
    let (h, w, c) = dims(img)?;
    if h == 0 || w == 0 || nh == 0 || nw == 0 {
        return Err(Error::dim("cannot resize an empty image"));
    }
    if (h, w) == (nh, nw) {
        return Ok(img.clone());
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ys = axis(h, nh);
    let xs = axis(w, nw);
    let src = img.data();
    let mut out = Vec::with_capacity(nh * nw * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for k in 0..c {
                let p = |y: usize, x: usize| src[(y * w + x) * c + k];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![nh, nw, c], out)
}

/// Centre crop; the offset is `floor((H − th) / 2)` per axis.
pub fn center_crop(img: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    let (h, w, c) = dims(img)?;
    if th > h || tw > w {
        return Err(Error::dim(format!("crop {th}x{tw} is larger than the {h}x{w} image")));
    }
    let (oy, ox) = crop_offset(h, w, th, tw);
    let mut out = Vec::with_capacity(th * tw * c);
    for y in oy..oy + th {
        out.extend_from_slice(&img.data()[(y * w + ox) * c..(y * w + ox + tw) * c]);
    }
    Tensor::new(vec![th, tw, c], out)
}

pub fn crop_offset(h: usize, w: usize, th: usize, tw: usize) -> (usize, usize) {
    ((h - th) / 2, (w - tw) / 2)
}

pub fn flip(img: &Tensor, axis: FlipAxis) -> Result<Tensor> {
    let (h, w, c) = dims(img)?;
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = match axis {
                FlipAxis::Horizontal => (y, w - 1 - x),
                FlipAxis::Vertical => (h - 1 - y, x),
            };
            out.extend_from_slice(&src[(sy * w + sx) * c..(sy * w + sx + 1) * c]);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Sharpness enhancement: blend between a 3×3 smoothed copy (centre weight
/// 5, neighbours 1) and the image; border pixels keep their values in the
/// smoothed copy. Output is clamped to `[0, 1]`.
pub fn adjust_sharpness(img: &Tensor, factor: f64) -> Result<Tensor> {
    let (h, w, c) = dims(img)?;
    let src = img.data();
    let mut smooth = src.to_vec();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            for k in 0..c {
                let mut acc = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let wgt = if dy == 1 && dx == 1 { 5.0 } else { 1.0 };
                        acc += wgt * src[((y + dy - 1) * w + x + dx - 1) * c + k];
                    }
                }
                smooth[(y * w + x) * c + k] = acc / 13.0;
            }
        }
    }
    let data = src
        .iter()
        .zip(&smooth)
        .map(|(&o, &s)| (s + factor * (o - s)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(vec![h, w, c], data)
}

/// Per-channel min–max stretch to `[0, 1]`; flat channels are unchanged.
pub fn autocontrast(img: &Tensor) -> Result<Tensor> {
    let (h, w, c) = dims(img)?;
    let mut out = img.clone();
    for k in 0..c {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in img.data().iter().skip(k).step_by(c) {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        if hi > lo {
            for v in out.data_mut().iter_mut().skip(k).step_by(c) {
                *v = (*v - lo) / (hi - lo);
            }
        }
    }
    debug_assert_eq!(out.shape(), &[h, w, c]);
    Ok(out)
}

pub fn normalize(img: &Tensor, mean: &[f64], std: &[f64]) -> Result<Tensor> {
    let (_, _, c) = dims(img)?;
    if mean.len() != c || std.len() != c {
        return Err(Error::dim(format!("normalization constants for {} channels, image has {c}", mean.len())));
    }
    let mut out = img.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let k = i % c;
        *v = (*v - mean[k]) / std[k];
    }
    Ok(out)
}

fn resize_crop(img: &Tensor, policy: &AugmentPolicy) -> Result<Tensor> {
    let (rh, rw) = policy.resize_dims();
    center_crop(&resize_bilinear(img, rh, rw)?, policy.target_height, policy.target_width)
}

fn finish(rgb: Tensor, depth: Tensor) -> Result<InputPair> {
    Ok(InputPair {
        rgb: normalize(&rgb, &RGB_MEAN, &RGB_STD)?,
        depth: normalize(&depth, &[DEPTH_MEAN], &[DEPTH_STD])?,
    })
}

/// Deterministic evaluation transform: resize, centre crop, normalize.
pub fn preprocess(input: &InputPair, policy: &AugmentPolicy) -> Result<InputPair> {
    finish(resize_crop(&input.rgb, policy)?, resize_crop(&input.depth, policy)?)
}

/// Training transform. Geometric steps are shared by RGB and depth;
/// sharpness and auto-contrast touch RGB only.
pub fn augment<R: Rng + ?Sized>(input: &InputPair, rng: &mut R, policy: &AugmentPolicy) -> Result<InputPair> {
    let mut rgb = resize_crop(&input.rgb, policy)?;
    let mut depth = resize_crop(&input.depth, policy)?;
    if rng.gen_bool(policy.flip_p.clamp(0.0, 1.0)) {
        let axis = if rng.gen_bool(0.5) {
            FlipAxis::Horizontal
        } else {
            FlipAxis::Vertical
        };
        rgb = flip(&rgb, axis)?;
        depth = flip(&depth, axis)?;
    }
    if rng.gen_bool(policy.sharpness_p.clamp(0.0, 1.0)) {
        rgb = adjust_sharpness(&rgb, policy.sharpness_factor)?;
    }
    if rng.gen_bool(policy.autocontrast_p.clamp(0.0, 1.0)) {
        rgb = autocontrast(&rgb)?;
    }
    finish(rgb, depth)
}
