//! Samples, preprocessing and augmentation.
//!
//! Images live in model space as `[1,h,w]` tensors in `[0,1]`; masks are
//! `[1,h,w]` tensors in `{0,1}`. Diffusion targets use `{−1,+1}`.

mod io;
mod patch;
mod synth;

use rand::Rng;

use crate::diffusion::gaussian;
use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

pub use io::{image_files, load_folder, read_image, read_mask, write_gray};
pub use patch::{extract_patches, reassemble, PatchGrid};
pub use synth::{gen_synthetic_vessels, gen_synthetic_with, SynthParams};

/// Luma weights for RGB to gray conversion.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
/// Standard deviation of the white noise drawn by [`augment`].
pub const AUG_NOISE_SIGMA: f64 = 0.03;
/// Side of the smoothing kernel applied to augmentation noise.
pub const AUG_KERNEL_SIZE: usize = 5;
/// Standard deviation, in pixels, of that smoothing kernel.
pub const AUG_KERNEL_SIGMA: f64 = 1.0;

/// One image with its binary ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub image: Tensor,
    pub mask: Tensor,
}

impl SampleRecord {
    pub fn new(id: impl Into<String>, image: Tensor, mask: Tensor) -> Result<Self> {
        if image.ndim() != 3 || image.dim(0) != 1 || image.shape() != mask.shape() {
            return shape_err(format!(
                "record needs congruent [1,h,w] image and mask, got {:?} and {:?}",
                image.shape(),
                mask.shape()
            ));
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return invalid("image values must lie in [0, 1]");
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return invalid("mask must be strictly binary");
        }
        Ok(Self {
            id: id.into(),
            image,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.image.dim(1)
    }

    pub fn width(&self) -> usize {
        self.image.dim(2)
    }
}

/// Converts a `[c,h,w]` image with `c ∈ {1,3}` to gray `[1,h,w]` in `[0,1]`.
///
/// Values are divided by `scale` first (255 for 8-bit data, 1 for data
/// already in unit range).
pub fn to_model_space(image: &Tensor, scale: f64) -> Result<Tensor> {
    if image.ndim() != 3 {
        return shape_err(format!("expected [c,h,w], got {:?}", image.shape()));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return invalid(format!("bad intensity scale {scale}"));
    }
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    let hw = h * w;
    let d = image.data();
    let gray: Vec<f64> = match c {
        1 => d.to_vec(),
        3 => (0..hw)
            .map(|i| LUMA[0] * d[i] + LUMA[1] * d[hw + i] + LUMA[2] * d[2 * hw + i])
            .collect(),
        _ => return invalid(format!("expected 1 or 3 channels, got {c}")),
    };
    let out = gray.into_iter().map(|v| (v / scale).clamp(0.0, 1.0)).collect();
    Tensor::new(&[1, h, w], out)
}

/// `{0,1}` mask to `{−1,+1}` diffusion target.
pub fn mask_to_diffusion(mask: &Tensor) -> Tensor {
    mask.map(|v| 2.0 * v - 1.0)
}

/// `{−1,+1}` (or any `[−1,1]` map) back to `[0,1]`.
pub fn diffusion_to_unit(x: &Tensor) -> Tensor {
    x.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// Thresholds a `[0,1]` map into a `{0,1}` mask (`v ≥ threshold` is foreground).
pub fn binarize(prob: &Tensor, threshold: f64) -> Tensor {
    prob.map(|v| if v >= threshold { 1.0 } else { 0.0 })
}

/// Mirrors a `[c,h,w]` tensor left to right.
pub fn flip_horizontal(t: &Tensor) -> Tensor {
    let (h, w) = (t.dim(1), t.dim(2));
    let d = t.data();
    Tensor::from_fn(t.shape(), |i| {
        let (plane, r, c) = (i / (h * w), (i / w) % h, i % w);
        d[plane * h * w + r * w + (w - 1 - c)]
    })
}

/// Mirrors a `[c,h,w]` tensor top to bottom.
pub fn flip_vertical(t: &Tensor) -> Tensor {
    let (h, w) = (t.dim(1), t.dim(2));
    let d = t.data();
    Tensor::from_fn(t.shape(), |i| {
        let (plane, r, c) = (i / (h * w), (i / w) % h, i % w);
        d[plane * h * w + (h - 1 - r) * w + c]
    })
}

/// Normalised 1-D Gaussian taps of odd length `size`.
pub fn gaussian_kernel_1d(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - half;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable blur of each `[h,w]` plane with edge replication.
pub fn blur_separable(t: &Tensor, kernel: &[f64]) -> Tensor {
    let (h, w) = (t.dim(t.ndim() - 2), t.dim(t.ndim() - 1));
    let half = (kernel.len() / 2) as isize;
    let src = t.data();
    let mut tmp = vec![0.0; src.len()];
    let mut out = vec![0.0; src.len()];
    for (s, o) in src.chunks(h * w).zip(tmp.chunks_mut(h * w)) {
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let cc = (c as isize + k as isize - half).clamp(0, w as isize - 1) as usize;
                    acc += kv * s[r * w + cc];
                }
                o[r * w + c] = acc;
            }
        }
    }
    for (s, o) in tmp.chunks(h * w).zip(out.chunks_mut(h * w)) {
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let rr = (r as isize + k as isize - half).clamp(0, h as isize - 1) as usize;
                    acc += kv * s[rr * w + c];
                }
                o[r * w + c] = acc;
            }
        }
    }
    Tensor::new(t.shape(), out).expect("blur keeps the shape")
}

/// Random `patch × patch` window of a record, image and mask together.
///
/// Records no larger than `patch` are returned whole.
pub fn random_crop(record: &SampleRecord, patch: usize, rng: &mut impl Rng) -> Result<SampleRecord> {
    let (h, w) = (record.height(), record.width());
    if patch == 0 || patch > h || patch > w {
        return invalid(format!("crop {patch} does not fit a {h}x{w} record"));
    }
    if patch == h && patch == w {
        return Ok(record.clone());
    }
    let r0 = rng.random_range(0..=h - patch);
    let c0 = rng.random_range(0..=w - patch);
    let cut = |t: &Tensor| {
        Tensor::from_fn(&[1, patch, patch], |i| t.data()[(r0 + i / patch) * w + c0 + i % patch])
    };
    Ok(SampleRecord {
        id: record.id.clone(),
        image: cut(&record.image),
        mask: cut(&record.mask),
    })
}

/// Which augmentations [`augment_with`] applies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flips: bool,
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flips: true,
            noise_sigma: AUG_NOISE_SIGMA,
        }
    }
}

/// Random flips plus smoothed Gaussian noise on the image.
pub fn augment(record: &SampleRecord, rng: &mut impl Rng) -> SampleRecord {
    augment_with(record, AugmentConfig::default(), rng)
}

/// [`augment`] with explicit switches.
///
/// Each flip axis is chosen independently with probability 1/2 and applied
/// to image and mask together. Noise is white Gaussian smoothed by a
/// normalised 5×5 Gaussian kernel, added to the image only and clipped.
pub fn augment_with(record: &SampleRecord, cfg: AugmentConfig, rng: &mut impl Rng) -> SampleRecord {
    let mut image = record.image.clone();
    let mut mask = record.mask.clone();
    if cfg.flips {
        if rng.random_bool(0.5) {
            image = flip_horizontal(&image);
            mask = flip_horizontal(&mask);
        }
        if rng.random_bool(0.5) {
            image = flip_vertical(&image);
            mask = flip_vertical(&mask);
        }
    }
    if cfg.noise_sigma > 0.0 {
        let white = gaussian(image.shape(), rng).map(|v| v * cfg.noise_sigma);
        let smooth = blur_separable(&white, &gaussian_kernel_1d(AUG_KERNEL_SIZE, AUG_KERNEL_SIGMA));
        for (p, n) in image.data_mut().iter_mut().zip(smooth.data()) {
            *p = (*p + n).clamp(0.0, 1.0);
        }
    }
    SampleRecord {
        id: record.id.clone(),
        image,
        mask,
    }
}
