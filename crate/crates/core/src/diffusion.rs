//! Denoising diffusion: noise schedule, forward noising and ancestral sampling.
//!
//! Steps are indexed `1..=T`. The forward process has the closed-form marginal
//! `x_t = √ᾱ_t·x_0 + √(1−ᾱ_t)·ε`; the reverse step uses the fixed posterior
//! standard deviation `σ_t = √((1−ᾱ_{t−1})/(1−ᾱ_t)·β_t)`, with `ᾱ_0 = 1` so the
//! last step is deterministic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// Reference step count the default `[1e-4, 0.02]` β range is tuned for.
pub const REFERENCE_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear β schedule from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return invalid("diffusion needs at least one step");
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return invalid(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            ));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                ((1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]).sqrt()
            })
            .collect();
        Ok(Self {
            steps,
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    /// The default β range rescaled so `steps` steps cover the same total
    /// noise as the reference 1000-step schedule.
    pub fn scaled_default(steps: usize) -> Result<Self> {
        let (start, end) = scaled_beta_range(steps);
        Self::linear(steps, start, end)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps {
            return invalid(format!("step {t} outside 1..={}", self.steps));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// `ᾱ_{t−1}`, with `ᾱ_0 = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            self.alpha_bar[t - 2]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    /// Samples `x_t` from `x_0` with the given noise.
    pub fn q_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        let i = self.idx(t)?;
        same_shape(x0, eps, "q_sample")?;
        let (a, b) = (self.alpha_bar[i].sqrt(), (1.0 - self.alpha_bar[i]).sqrt());
        combine(x0, eps, |x, e| a * x + b * e)
    }

    /// `(x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t` without clipping.
    pub fn predict_x0_unclipped(&self, xt: &Tensor, t: usize, eps_pred: &Tensor) -> Result<Tensor> {
        let i = self.idx(t)?;
        same_shape(xt, eps_pred, "predict_x0")?;
        let (a, b) = (self.alpha_bar[i].sqrt(), (1.0 - self.alpha_bar[i]).sqrt());
        combine(xt, eps_pred, |x, e| (x - b * e) / a)
    }

    /// Clean-sample estimate clipped to `[−1, 1]`.
    pub fn predict_x0(&self, xt: &Tensor, t: usize, eps_pred: &Tensor) -> Result<Tensor> {
        Ok(self.predict_x0_unclipped(xt, t, eps_pred)?.map(|v| v.clamp(-1.0, 1.0)))
    }

    /// One reverse step in noise-prediction form:
    /// `x_{t−1} = (x_t − (1−α_t)/√(1−ᾱ_t)·ε̂)/√α_t + σ_t·z`.
    ///
    /// `z` is ignored at `t = 1`.
    pub fn p_sample_step(&self, xt: &Tensor, t: usize, eps_pred: &Tensor, z: &Tensor) -> Result<Tensor> {
        let i = self.idx(t)?;
        same_shape(xt, eps_pred, "p_sample_step")?;
        same_shape(xt, z, "p_sample_step")?;
        let inv_sqrt_alpha = 1.0 / self.alpha[i].sqrt();
        let coef = (1.0 - self.alpha[i]) / (1.0 - self.alpha_bar[i]).sqrt();
        let sigma = if t == 1 { 0.0 } else { self.sigma[i] };
        let data = xt
            .data()
            .iter()
            .zip(eps_pred.data())
            .zip(z.data())
            .map(|((x, e), z)| inv_sqrt_alpha * (x - coef * e) + sigma * z)
            .collect();
        Tensor::new(xt.shape(), data)
    }

    /// Reverse step through the clipped `x̂_0`: posterior mean
    /// `c₀·clip(x̂_0) + c₁·x_t` plus `σ_t·z`. Identical to
    /// [`Self::p_sample_step`] whenever clipping is inactive.
    pub fn p_sample_step_clipped(
        &self,
        xt: &Tensor,
        t: usize,
        eps_pred: &Tensor,
        z: &Tensor,
    ) -> Result<Tensor> {
        let i = self.idx(t)?;
        same_shape(xt, z, "p_sample_step")?;
        let x0 = self.predict_x0(xt, t, eps_pred)?;
        let ab = self.alpha_bar[i];
        let ab_prev = self.alpha_bar_prev(t);
        let c0 = ab_prev.sqrt() * self.beta[i] / (1.0 - ab);
        let c1 = self.alpha[i].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = if t == 1 { 0.0 } else { self.sigma[i] };
        let data = x0
            .data()
            .iter()
            .zip(xt.data())
            .zip(z.data())
            .map(|((x0, x), z)| c0 * x0 + c1 * x + sigma * z)
            .collect();
        Tensor::new(xt.shape(), data)
    }
}

/// `[1e-4, 0.02]` scaled by `1000 / steps`, capped below one.
pub fn scaled_beta_range(steps: usize) -> (f64, f64) {
    let scale = REFERENCE_STEPS as f64 / steps.max(1) as f64;
    (
        (DEFAULT_BETA_START * scale).min(0.999),
        (DEFAULT_BETA_END * scale).min(0.999),
    )
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn combine(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    let t = Tensor::new(a.shape(), data)?;
    t.ensure_finite("diffusion update")?;
    Ok(t)
}

/// Standard-normal tensor drawn from `rng`.
pub fn gaussian(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// Noise predictor `ε_θ(x_t, t | condition)`.
///
/// `prepare` runs once per condition image so work that does not depend on
/// `t` (such as condition feature extraction) is not repeated every step.
pub trait NoisePredictor {
    type Prepared;

    fn prepare(&self, condition: &Tensor) -> Result<Self::Prepared>;

    fn predict_eps(&self, x_t: &Tensor, t: usize, prepared: &Self::Prepared) -> Result<Tensor>;
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to a clipped `x_0` estimate.
///
/// The output is `[1, h, w]` for a `[c, h, w]` condition and depends only on
/// the inputs and `seed`.
pub fn sample_loop<P: NoisePredictor>(
    denoiser: &P,
    condition: &Tensor,
    sched: &DiffusionSchedule,
    seed: u64,
) -> Result<Tensor> {
    let shape = match *condition.shape() {
        [_, h, w] => [1, h, w],
        ref s => return shape_err(format!("condition must be [c,h,w], got {s:?}")),
    };
    let prepared = denoiser.prepare(condition)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = gaussian(&shape, &mut rng);
    for t in (1..=sched.steps()).rev() {
        let eps = denoiser.predict_eps(&x, t, &prepared)?;
        let z = if t > 1 {
            gaussian(&shape, &mut rng)
        } else {
            Tensor::zeros(&shape)
        };
        x = sched.p_sample_step_clipped(&x, t, &eps, &z)?;
    }
    Ok(x.map(|v| v.clamp(-1.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invalid_ranges() {
        assert!(DiffusionSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(DiffusionSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(DiffusionSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(DiffusionSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn single_step_schedule() {
        let s = DiffusionSchedule::linear(1, 0.3, 0.3).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - 0.3);
        assert_eq!(s.sigma(1), 0.0);
    }

    #[test]
    fn reference_schedule_nearly_destroys_signal() {
        let s = DiffusionSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bar(1000) < 0.01);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn step_bounds_are_checked() {
        let s = DiffusionSchedule::scaled_default(10).unwrap();
        let x = Tensor::zeros(&[1, 2, 2]);
        assert!(s.q_sample(&x, 0, &x).is_err());
        assert!(s.q_sample(&x, 11, &x).is_err());
        assert!(s.predict_x0(&x, 11, &x).is_err());
        assert!(s.p_sample_step(&x, 0, &x, &x).is_err());
    }

    #[test]
    fn zero_noise_and_zero_signal() {
        let s = DiffusionSchedule::scaled_default(50).unwrap();
        let x0 = Tensor::from_fn(&[4], |i| i as f64 * 0.25 - 0.5);
        let eps = Tensor::from_fn(&[4], |i| 1.0 - i as f64 * 0.7);
        let zero = Tensor::zeros(&[4]);
        let a = s.q_sample(&x0, 20, &zero).unwrap();
        let b = s.q_sample(&zero, 20, &eps).unwrap();
        for i in 0..4 {
            assert_eq!(a.data()[i], s.alpha_bar(20).sqrt() * x0.data()[i]);
            assert_eq!(b.data()[i], (1.0 - s.alpha_bar(20)).sqrt() * eps.data()[i]);
        }
        let p = s.predict_x0(&a, 20, &zero).unwrap();
        let want = a.map(|v| (v / s.alpha_bar(20).sqrt()).clamp(-1.0, 1.0));
        assert_eq!(p, want);
    }

    #[test]
    fn final_step_is_deterministic() {
        let s = DiffusionSchedule::scaled_default(10).unwrap();
        let x = Tensor::from_fn(&[3], |i| i as f64 * 0.1);
        let e = Tensor::from_fn(&[3], |i| 0.3 - i as f64 * 0.2);
        let z1 = Tensor::full(&[3], 5.0);
        let z2 = Tensor::full(&[3], -7.0);
        assert_eq!(s.p_sample_step(&x, 1, &e, &z1).unwrap(), s.p_sample_step(&x, 1, &e, &z2).unwrap());
    }
}
