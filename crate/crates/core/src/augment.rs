//! Patch transformations. A sampled [`Transform`] carries every parameter
//! explicitly, so applying it to two different patches uses identical
//! crop, flips, jitter, blur and noise realisation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::slidegen::PatchDims;

pub const JITTER_SCALE_LIMITS: (f64, f64) = (0.6, 1.4);
pub const JITTER_SHIFT_LIMITS: (f64, f64) = (-0.2, 0.2);
pub const MIN_CROP: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AugmentError {
    #[error("invalid augment config: {0}")]
    Config(String),
    #[error("patch has {actual} values, expected {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("crop box {0:?} does not fit the patch")]
    CropOutOfBounds(CropBox),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
    pub crop_prob: f64,
    /// Crop side as a fraction of the shorter patch side.
    pub crop_scale: (f64, f64),
    pub jitter_prob: f64,
    pub jitter_scale: (f64, f64),
    pub jitter_shift: (f64, f64),
    pub blur_prob: f64,
    pub blur_passes: u32,
    pub noise_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_h_prob: 0.5,
            flip_v_prob: 0.5,
            crop_prob: 0.8,
            crop_scale: (0.5, 1.0),
            jitter_prob: 0.8,
            jitter_scale: (0.6, 1.4),
            jitter_shift: (-0.2, 0.2),
            blur_prob: 0.5,
            blur_passes: 3,
            noise_std: 0.02,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            flip_h_prob: 0.0,
            flip_v_prob: 0.0,
            crop_prob: 0.0,
            crop_scale: (1.0, 1.0),
            jitter_prob: 0.0,
            jitter_scale: (1.0, 1.0),
            jitter_shift: (0.0, 0.0),
            blur_prob: 0.0,
            blur_passes: 3,
            noise_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: String| Err(AugmentError::Config(m));
        for (name, p) in [
            ("flip_h_prob", self.flip_h_prob),
            ("flip_v_prob", self.flip_v_prob),
            ("crop_prob", self.crop_prob),
            ("jitter_prob", self.jitter_prob),
            ("blur_prob", self.blur_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        let within = |r: (f64, f64), lim: (f64, f64)| r.0 <= r.1 && r.0 >= lim.0 && r.1 <= lim.1;
        if !within(self.crop_scale, (f64::MIN_POSITIVE, 1.0)) {
            return bad(format!("crop_scale {:?} must lie in (0, 1]", self.crop_scale));
        }
        if !within(self.jitter_scale, JITTER_SCALE_LIMITS) {
            return bad(format!("jitter_scale {:?} outside {JITTER_SCALE_LIMITS:?}", self.jitter_scale));
        }
        if !within(self.jitter_shift, JITTER_SHIFT_LIMITS) {
            return bad(format!("jitter_shift {:?} outside {JITTER_SHIFT_LIMITS:?}", self.jitter_shift));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub flip_h: bool,
    pub flip_v: bool,
    /// `None` keeps the full patch.
    pub crop: Option<CropBox>,
    /// Per-channel `(scale, shift)`.
    pub jitter: Vec<(f64, f64)>,
    pub blur_passes: u32,
    pub noise_std: f64,
    pub noise_seed: u64,
}

impl Transform {
    pub fn identity(channels: usize) -> Self {
        Self {
            flip_h: false,
            flip_v: false,
            crop: None,
            jitter: vec![(1.0, 0.0); channels],
            blur_passes: 0,
            noise_std: 0.0,
            noise_seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip_h
            && !self.flip_v
            && self.crop.is_none()
            && self.jitter.iter().all(|&j| j == (1.0, 0.0))
            && self.blur_passes == 0
            && self.noise_std == 0.0
    }
}

fn range<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draws one transform. Every random decision is taken in a fixed order, so
/// the number of draws from `rng` does not depend on the outcomes.
pub fn sample_transform<R: Rng + ?Sized>(config: &AugmentConfig, dims: PatchDims, rng: &mut R) -> Transform {
    let flip_h = rng.random_bool(config.flip_h_prob);
    let flip_v = rng.random_bool(config.flip_v_prob);

    let do_crop = rng.random_bool(config.crop_prob);
    let side = dims.height.min(dims.width);
    let scale = range(rng, config.crop_scale);
    let size = ((scale * side as f64).round() as usize).clamp(MIN_CROP.min(side), side);
    let top = rng.random_range(0..=dims.height - size);
    let left = rng.random_range(0..=dims.width - size);
    let crop = (do_crop && !(size == dims.height && size == dims.width)).then_some(CropBox { top, left, size });

    let do_jitter = rng.random_bool(config.jitter_prob);
    let jitter = (0..dims.channels)
        .map(|_| {
            let s = range(rng, config.jitter_scale);
            let t = range(rng, config.jitter_shift);
            if do_jitter { (s, t) } else { (1.0, 0.0) }
        })
        .collect();

    let blur_passes = if rng.random_bool(config.blur_prob) { config.blur_passes } else { 0 };
    let noise_seed = rng.random();
    Transform { flip_h, flip_v, crop, jitter, blur_passes, noise_std: config.noise_std, noise_seed }
}

/// Parameters actually used by one [`apply_traced`] call.
#[derive(Clone, Debug, PartialEq)]
pub struct AppliedParams {
    pub crop: CropBox,
    pub jitter: Vec<(f64, f64)>,
    pub noise_seed: u64,
}

pub fn apply(t: &Transform, patch: &[f32], dims: PatchDims) -> Result<Vec<f32>, AugmentError> {
    apply_traced(t, patch, dims).map(|(img, _)| img)
}

pub fn apply_traced(
    t: &Transform,
    patch: &[f32],
    dims: PatchDims,
) -> Result<(Vec<f32>, AppliedParams), AugmentError> {
    let PatchDims { height: h, width: w, channels: c } = dims;
    if patch.len() != dims.len() || t.jitter.len() != c {
        return Err(AugmentError::DimensionMismatch { expected: dims.len(), actual: patch.len() });
    }
    let full = CropBox { top: 0, left: 0, size: h.max(w) };
    let mut out = match t.crop {
        None => patch.to_vec(),
        Some(b) => {
            if b.size == 0 || b.top + b.size > h || b.left + b.size > w {
                return Err(AugmentError::CropOutOfBounds(b));
            }
            let mut out = Vec::with_capacity(patch.len());
            for y in 0..h {
                let sy = b.top + y * b.size / h;
                for x in 0..w {
                    let sx = b.left + x * b.size / w;
                    let src = (sy * w + sx) * c;
                    out.extend_from_slice(&patch[src..src + c]);
                }
            }
            out
        }
    };
    if t.flip_h || t.flip_v {
        let src = out.clone();
        for y in 0..h {
            let sy = if t.flip_v { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if t.flip_h { w - 1 - x } else { x };
                let (d, s) = ((y * w + x) * c, (sy * w + sx) * c);
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
    if t.jitter.iter().any(|&j| j != (1.0, 0.0)) {
        for px in out.chunks_mut(c) {
            for (v, &(scale, shift)) in px.iter_mut().zip(&t.jitter) {
                *v = (f64::from(*v) * scale + shift).clamp(0.0, 1.0) as f32;
            }
        }
    }
    for _ in 0..t.blur_passes {
        out = box_blur(&out, dims);
    }
    if t.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(t.noise_seed);
        let normal = Normal::new(0.0, t.noise_std).expect("validated noise std");
        for v in &mut out {
            *v = (f64::from(*v) + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    let applied = AppliedParams { crop: t.crop.unwrap_or(full), jitter: t.jitter.clone(), noise_seed: t.noise_seed };
    Ok((out, applied))
}

/// One 3×3 box-blur pass with edge replication.
fn box_blur(img: &[f32], dims: PatchDims) -> Vec<f32> {
    let PatchDims { height: h, width: w, channels: c } = dims;
    let mut out = vec![0.0f32; img.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0f32;
                for dy in [-1isize, 0, 1] {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    for dx in [-1isize, 0, 1] {
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        acc += img[(yy * w + xx) * c + ch];
                    }
                }
                out[(y * w + x) * c + ch] = acc / 9.0;
            }
        }
    }
    out
}
