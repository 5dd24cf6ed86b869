//! Per-sample training gradients and ensembled patch segmentation.
//!
//! Gradients are computed one sample at a time on independent tapes and
//! reduced in sample order, so a batch gives the same update however the
//! per-sample work is scheduled.

use rayon::prelude::*;

use crate::data::{diffusion_to_unit, extract_patches, mask_to_diffusion, reassemble};
use crate::diffusion::{sample_loop, DiffusionSchedule};
use crate::error::{invalid, Error, Result};
use crate::loss::total_loss;
use crate::model::ModelBundle;
use crate::params::Graph;
use crate::tensor::Tensor;

/// Gradient per parameter; `None` where a parameter took no part.
pub type Grads = Vec<Option<Vec<f64>>>;

/// One training draw: condition image, binary mask, step and noise.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub image: Tensor,
    pub mask: Tensor,
    pub t: usize,
    pub eps: Tensor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub noise: f64,
    pub cldice: f64,
    pub total: f64,
}

impl LossValues {
    pub fn is_finite(&self) -> bool {
        self.noise.is_finite() && self.cldice.is_finite() && self.total.is_finite()
    }
}

/// Loss and parameter gradients for one sample.
pub fn sample_gradients(
    model: &ModelBundle,
    sched: &DiffusionSchedule,
    sample: &TrainSample,
    cldice_weight: f64,
) -> Result<(LossValues, Grads)> {
    let x0 = mask_to_diffusion(&sample.mask);
    let xt = sched.q_sample(&x0, sample.t, &sample.eps)?;
    let mut g = Graph::new(&model.params, true);
    let img = g.input(sample.image.clone());
    let cond = model.extractor_forward(&mut g, img)?;
    let xv = g.input(xt);
    let pred = model.denoiser_forward(&mut g, xv, sample.t, &cond)?;
    let eps = g.input(sample.eps.clone());
    let gt = g.input(sample.mask.clone());
    let parts = total_loss(&mut g.tape, eps, pred, xv, sample.t, gt, sched, cldice_weight)?;
    let scalar = |v| g.value(v).data()[0];
    let values = LossValues {
        noise: scalar(parts.noise),
        cldice: scalar(parts.cldice),
        total: scalar(parts.total),
    };
    if !values.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    g.tape.backward(parts.total)?;
    Ok((values, g.param_grads()))
}

/// Mean of per-sample gradients, accumulated in the given order.
pub fn mean_gradients(per_sample: &[Grads]) -> Result<Grads> {
    let Some(first) = per_sample.first() else {
        return invalid("cannot average an empty batch");
    };
    let mut acc: Grads = vec![None; first.len()];
    for grads in per_sample {
        if grads.len() != acc.len() {
            return invalid("gradient lists of different lengths");
        }
        for (a, g) in acc.iter_mut().zip(grads) {
            match (a.as_mut(), g) {
                (Some(a), Some(g)) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                (None, Some(g)) => *a = Some(g.clone()),
                _ => {}
            }
        }
    }
    let n = per_sample.len() as f64;
    for v in acc.iter_mut().flatten() {
        v.iter_mut().for_each(|x| *x /= n);
    }
    Ok(acc)
}

/// Mixes a base seed with two indices (splitmix64 finaliser).
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(b.wrapping_mul(0xd1b5_4a32_d192_ed03));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Averages `ensemble` sampled `x̂_0` maps and maps the mean to `[0,1]`.
pub fn ensemble_probability(
    model: &ModelBundle,
    sched: &DiffusionSchedule,
    image: &Tensor,
    ensemble: usize,
    seed: u64,
) -> Result<Tensor> {
    if ensemble == 0 {
        return invalid("ensemble size must be at least 1");
    }
    let mut mean: Option<Tensor> = None;
    for k in 0..ensemble {
        let x = sample_loop(model, image, sched, derive_seed(seed, k as u64, 0))?;
        match mean.as_mut() {
            None => mean = Some(x),
            Some(m) => m.data_mut().iter_mut().zip(x.data()).for_each(|(a, b)| *a += b),
        }
    }
    let mean = mean.expect("at least one member").map(|v| v / ensemble as f64);
    Ok(diffusion_to_unit(&mean))
}

/// Probability map of a whole image from overlapping ensembled patches.
///
/// Patch `i` uses seed `derive_seed(seed, i, 1)`; patches run in parallel and
/// are reassembled in grid order.
pub fn segment_image(
    model: &ModelBundle,
    sched: &DiffusionSchedule,
    image: &Tensor,
    patch: usize,
    stride: usize,
    ensemble: usize,
    seed: u64,
) -> Result<Tensor> {
    let (patches, grid) = extract_patches(image, patch, stride)?;
    let probs = patches
        .par_iter()
        .enumerate()
        .map(|(i, p)| ensemble_probability(model, sched, p, ensemble, derive_seed(seed, i as u64, 1)))
        .collect::<Result<Vec<_>>>()?;
    reassemble(&probs, &grid)
}
