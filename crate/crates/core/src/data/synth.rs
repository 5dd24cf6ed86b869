//! Procedural curvilinear "vessel" images with exact ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{blur_separable, gaussian_kernel_1d, SampleRecord};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Knobs of the generator beyond size and curve count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthParams {
    pub n_curves: usize,
    pub width_range: (f64, f64),
    /// Darkening of vessel pixels relative to the background.
    pub contrast: f64,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Blur applied to the vessel layer, in pixels.
    pub blur_sigma: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_curves: 4,
            width_range: (1.5, 3.5),
            contrast: 0.35,
            noise: 0.03,
            blur_sigma: 0.8,
        }
    }
}

const CONTROL_POINTS: usize = 5;
const SAMPLE_SPACING: f64 = 0.25;

/// Generates one record with default appearance parameters.
pub fn gen_synthetic_vessels(
    seed: u64,
    h: usize,
    w: usize,
    n_curves: usize,
    width_range: (f64, f64),
) -> Result<SampleRecord> {
    let params = SynthParams {
        n_curves,
        width_range,
        ..SynthParams::default()
    };
    gen_synthetic_with(seed, h, w, &params)
}

fn catmull_rom(p0: (f64, f64), p1: (f64, f64), p2: (f64, f64), p3: (f64, f64), t: f64) -> (f64, f64) {
    let t2 = t * t;
    let t3 = t2 * t;
    let f = |a: f64, b: f64, c: f64, d: f64| {
        0.5 * (2.0 * b + (c - a) * t + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2 + (3.0 * b - a - 3.0 * c + d) * t3)
    };
    (f(p0.0, p1.0, p2.0, p3.0), f(p0.1, p1.1, p2.1, p3.1))
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Stamps a disc of `radius` centred at `(row, col)`.
fn stamp(mask: &mut [f64], h: usize, w: usize, (row, col): (f64, f64), radius: f64) {
    let r0 = (row - radius).floor().max(0.0) as isize;
    let r1 = (row + radius).ceil().min(h as f64 - 1.0) as isize;
    let c0 = (col - radius).floor().max(0.0) as isize;
    let c1 = (col + radius).ceil().min(w as f64 - 1.0) as isize;
    let rr = radius * radius;
    for r in r0..=r1 {
        for c in c0..=c1 {
            let (dr, dc) = (r as f64 - row, c as f64 - col);
            if dr * dr + dc * dc <= rr {
                mask[r as usize * w + c as usize] = 1.0;
            }
        }
    }
}

/// Random smooth curve: a jittered walk of control points joined by
/// Catmull-Rom segments, sampled at sub-pixel spacing.
fn random_curve(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<(f64, f64)> {
    let (hf, wf) = (h as f64, w as f64);
    let step = 0.3 * hf.min(wf);
    let mut p = (rng.random_range(0.1 * hf..0.9 * hf), rng.random_range(0.1 * wf..0.9 * wf));
    let mut theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut ctrl = vec![p];
    for _ in 1..CONTROL_POINTS {
        theta += 0.5 * rng.sample::<f64, _>(StandardNormal);
        p = (p.0 + step * theta.sin(), p.1 + step * theta.cos());
        ctrl.push(p);
    }
    let n = ctrl.len();
    let ext = |a: (f64, f64), b: (f64, f64)| (2.0 * a.0 - b.0, 2.0 * a.1 - b.1);
    let mut padded = vec![ext(ctrl[0], ctrl[1])];
    padded.extend_from_slice(&ctrl);
    padded.push(ext(ctrl[n - 1], ctrl[n - 2]));
    let mut pts = Vec::new();
    for s in 0..n - 1 {
        let (p0, p1, p2, p3) = (padded[s], padded[s + 1], padded[s + 2], padded[s + 3]);
        let k = (dist(p1, p2) / SAMPLE_SPACING).ceil().max(1.0) as usize;
        for i in 0..k {
            pts.push(catmull_rom(p0, p1, p2, p3, i as f64 / k as f64));
        }
    }
    pts.push(ctrl[n - 1]);
    pts
}

/// Generates one record; identical inputs give bit-identical outputs.
///
/// The mask is the union of `n_curves` smooth curves drawn at a width that
/// tapers from a random start value inside `width_range`. The image is a
/// vignetted, tilted background darkened along the blurred vessel layer,
/// with additive Gaussian noise, clipped to `[0,1]`.
pub fn gen_synthetic_with(seed: u64, h: usize, w: usize, params: &SynthParams) -> Result<SampleRecord> {
    if h < 32 || w < 32 {
        return invalid(format!("synthetic images need h, w >= 32, got {h}x{w}"));
    }
    let (lo, hi) = params.width_range;
    if !(1.0 <= lo && lo <= hi && hi <= 4.0) {
        return invalid(format!("width range ({lo}, {hi}) must lie inside [1, 4]"));
    }
    if !(params.contrast >= 0.0 && params.noise >= 0.0 && params.blur_sigma > 0.0) {
        return invalid("contrast and noise must be non-negative, blur positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![0.0; h * w];
    for _ in 0..params.n_curves {
        let pts = random_curve(&mut rng, h, w);
        let w0 = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let w1 = (0.75 * w0).max(lo);
        let last = (pts.len() - 1).max(1) as f64;
        for (i, &pt) in pts.iter().enumerate() {
            let width = w0 + (w1 - w0) * i as f64 / last;
            stamp(&mut mask, h, w, pt, (width / 2.0).max(0.5));
        }
    }
    let mask = Tensor::new(&[1, h, w], mask)?;
    let vessels = blur_separable(&mask, &gaussian_kernel_1d(5, params.blur_sigma));

    let g_r: f64 = rng.random_range(-0.15..0.15);
    let g_c: f64 = rng.random_range(-0.15..0.15);
    let cr = h as f64 * rng.random_range(0.4..0.6);
    let cc = w as f64 * rng.random_range(0.4..0.6);
    let half_diag = 0.5 * ((h * h + w * w) as f64).sqrt();
    let vd = vessels.data();
    let mut image = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let rho2 = ((r as f64 - cr).powi(2) + (c as f64 - cc).powi(2)) / (half_diag * half_diag);
            let bg = (0.55 + g_r * (r as f64 / h as f64 - 0.5) + g_c * (c as f64 / w as f64 - 0.5))
                * (1.0 - 0.35 * rho2);
            let n: f64 = rng.sample(StandardNormal);
            let i = r * w + c;
            image[i] = (bg - params.contrast * vd[i] + params.noise * n).clamp(0.0, 1.0);
        }
    }
    SampleRecord::new(format!("synth_{seed}"), Tensor::new(&[1, h, w], image)?, mask)
}
