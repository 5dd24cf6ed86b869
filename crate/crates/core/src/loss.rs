//! Training objectives: noise MSE, soft skeletons and centreline Dice.

use crate::diffusion::DiffusionSchedule;
use crate::error::{invalid, shape_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Smoothing added to numerators and denominators of the centreline ratios.
pub const CLDICE_SMOOTH: f64 = 1e-6;
/// Soft-skeleton iterations used inside the training loss.
pub const LOSS_SKELETON_ITERS: usize = 10;
/// Soft-skeleton iterations used by the evaluation metric.
pub const METRIC_SKELETON_ITERS: usize = 25;

/// Mean squared error between true and predicted noise.
pub fn noise_loss(tape: &mut Tape, eps: Var, eps_pred: Var) -> Result<Var> {
    if tape.shape(eps) != tape.shape(eps_pred) {
        return shape_err(format!(
            "noise loss on {:?} and {:?}",
            tape.shape(eps),
            tape.shape(eps_pred)
        ));
    }
    let d = tape.sub(eps, eps_pred)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

fn check_unit_range(t: &Tensor, what: &str) -> Result<()> {
    if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return invalid(format!("{what} values must lie in [0, 1]"));
    }
    Ok(())
}

fn open(tape: &mut Tape, x: Var) -> Result<Var> {
    let e = tape.min_pool3(x)?;
    tape.max_pool3(e)
}

/// Differentiable soft skeleton of a `[1,h,w]` map in `[0,1]`.
///
/// Repeatedly erodes the map (3×3 min filter) and keeps what each erosion
/// level loses under a morphological opening (erode then 3×3 max filter);
/// contributions are merged as `skel + relu(delta − skel·delta)` so the
/// result stays in `[0,1]`.
pub fn soft_skeleton(tape: &mut Tape, mask: Var, iters: usize) -> Result<Var> {
    if iters == 0 {
        return invalid("soft skeleton needs at least one iteration");
    }
    check_unit_range(tape.value(mask), "soft skeleton input")?;
    let mut img = mask;
    let opened = open(tape, img)?;
    let diff = tape.sub(img, opened)?;
    let mut skel = tape.relu(diff)?;
    for _ in 0..iters {
        img = tape.min_pool3(img)?;
        let opened = open(tape, img)?;
        let diff = tape.sub(img, opened)?;
        let delta = tape.relu(diff)?;
        let overlap = tape.mul(skel, delta)?;
        let fresh = tape.sub(delta, overlap)?;
        let fresh = tape.relu(fresh)?;
        skel = tape.add(skel, fresh)?;
    }
    Ok(skel)
}

/// `(Σ a·b + ε) / (Σ a + ε)`.
fn smoothed_ratio(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let inter = tape.mul(a, b)?;
    let num = tape.sum(inter)?;
    let num = tape.add_scalar(num, CLDICE_SMOOTH)?;
    let den = tape.sum(a)?;
    let den = tape.add_scalar(den, CLDICE_SMOOTH)?;
    tape.div(num, den)
}

/// Soft centreline Dice between a predicted and a reference map in `[0,1]`.
///
/// Topology precision is the fraction of the predicted skeleton inside the
/// reference, topology sensitivity the fraction of the reference skeleton
/// inside the prediction; the score is their harmonic mean.
pub fn cl_dice(tape: &mut Tape, pred: Var, gt: Var, iters: usize) -> Result<Var> {
    if tape.shape(pred) != tape.shape(gt) {
        return shape_err(format!(
            "cl_dice on {:?} and {:?}",
            tape.shape(pred),
            tape.shape(gt)
        ));
    }
    let skel_pred = soft_skeleton(tape, pred, iters)?;
    let skel_gt = soft_skeleton(tape, gt, iters)?;
    let tprec = smoothed_ratio(tape, skel_pred, gt)?;
    let tsens = smoothed_ratio(tape, skel_gt, pred)?;
    let prod = tape.mul(tprec, tsens)?;
    let num = tape.scale(prod, 2.0)?;
    let den = tape.add(tprec, tsens)?;
    tape.div(num, den)
}

/// Soft skeleton of a plain tensor.
pub fn soft_skeleton_of(mask: &Tensor, iters: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let m = tape.constant(mask.clone());
    let s = soft_skeleton(&mut tape, m, iters)?;
    Ok(tape.value(s).clone())
}

/// Centreline Dice of plain tensors.
pub fn cl_dice_of(pred: &Tensor, gt: &Tensor, iters: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let g = tape.constant(gt.clone());
    let v = cl_dice(&mut tape, p, g, iters)?;
    Ok(tape.value(v).data()[0])
}

/// The three scalars of one training objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub noise: Var,
    pub cldice: Var,
}

/// `L_N + weight · (1 − clDice((x̂_0 + 1)/2, gt))`.
///
/// `x̂_0` is the clipped clean estimate implied by `eps_pred` at step `t`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    eps: Var,
    eps_pred: Var,
    x_t: Var,
    t: usize,
    gt_mask: Var,
    sched: &DiffusionSchedule,
    cldice_weight: f64,
) -> Result<LossParts> {
    if t == 0 || t > sched.steps() {
        return invalid(format!("step {t} outside 1..={}", sched.steps()));
    }
    if tape.shape(x_t) != tape.shape(eps_pred) || tape.shape(gt_mask) != tape.shape(eps_pred) {
        return shape_err("total loss inputs must share one shape");
    }
    check_unit_range(tape.value(gt_mask), "ground-truth mask")?;
    let noise = noise_loss(tape, eps, eps_pred)?;
    let a = sched.alpha_bar(t).sqrt();
    let b = (1.0 - sched.alpha_bar(t)).sqrt();
    let xs = tape.scale(x_t, 1.0 / a)?;
    let es = tape.scale(eps_pred, b / a)?;
    let x0 = tape.sub(xs, es)?;
    let x0 = tape.clamp(x0, -1.0, 1.0)?;
    let prob = tape.add_scalar(x0, 1.0)?;
    let prob = tape.scale(prob, 0.5)?;
    let cl = cl_dice(tape, prob, gt_mask, LOSS_SKELETON_ITERS)?;
    let miss = tape.scale(cl, -1.0)?;
    let miss = tape.add_scalar(miss, 1.0)?;
    let weighted = tape.scale(miss, cldice_weight)?;
    let total = tape.add(noise, weighted)?;
    Ok(LossParts {
        total,
        noise,
        cldice: miss,
    })
}

/// Evaluates [`total_loss`] on plain tensors, returning `(total, noise, 1 − clDice)`.
pub fn total_loss_of(
    eps: &Tensor,
    eps_pred: &Tensor,
    x_t: &Tensor,
    t: usize,
    gt_mask: &Tensor,
    sched: &DiffusionSchedule,
) -> Result<(f64, f64, f64)> {
    let mut tape = Tape::new();
    let e = tape.constant(eps.clone());
    let p = tape.constant(eps_pred.clone());
    let x = tape.constant(x_t.clone());
    let m = tape.constant(gt_mask.clone());
    let parts = total_loss(&mut tape, e, p, x, t, m, sched, 1.0)?;
    let v = |v: Var| tape.value(v).data()[0];
    Ok((v(parts.total), v(parts.noise), v(parts.cldice)))
}
