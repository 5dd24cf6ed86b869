//! Segmentation metrics over binary masks and score maps.

use std::fmt;

use crate::error::{invalid, shape_err, Result};
use crate::loss::{cl_dice_of, soft_skeleton_of, CLDICE_SMOOTH, METRIC_SKELETON_ITERS};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn binary(v: f64) -> Option<bool> {
    if v == 0.0 {
        Some(false)
    } else if v == 1.0 {
        Some(true)
    } else {
        None
    }
}

/// Pixel-wise confusion counts of two `{0,1}` maps.
pub fn confusion(pred: &Tensor, gt: &Tensor) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return shape_err(format!("confusion of {:?} and {:?}", pred.shape(), gt.shape()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (Some(p), Some(g)) = (binary(p), binary(g)) else {
            return invalid("confusion needs binary {0,1} inputs");
        };
        match (p, g) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarMetrics {
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub dice: f64,
    pub iou: f64,
}

/// `num / den`, with `0/0` defined as 0.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, sensitivity, specificity, Dice (F1) and IoU from counts.
///
/// A metric whose denominator is zero (for example sensitivity on an image
/// with no positive pixels) is reported as 0.
pub fn scalar_metrics(c: &ConfusionCounts) -> Result<ScalarMetrics> {
    if c.total() == 0 {
        return invalid("metrics of an empty confusion table");
    }
    Ok(ScalarMetrics {
        acc: ratio(c.tp + c.tn, c.total()),
        sen: ratio(c.tp, c.tp + c.fn_),
        spe: ratio(c.tn, c.tn + c.fp),
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
    })
}

/// Area under the ROC curve via the Mann–Whitney rank statistic.
///
/// Tied scores share their average rank, which matches the trapezoidal ROC
/// area.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return shape_err(format!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return invalid("AUC scores contain NaN");
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return invalid("AUC needs both positive and negative labels");
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based: i+1 ..= j+1
        let avg = (i + j) as f64 / 2.0 + 1.0;
        let pos_here = order[i..=j].iter().filter(|&&k| labels[k]).count();
        pos_rank_sum += avg * pos_here as f64;
        i = j + 1;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Full metric set for one image or one pooled evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub counts: ConfusionCounts,
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub auc: f64,
    pub dice: f64,
    pub iou: f64,
    pub cl_dice: f64,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "acc,sen,spe,auc,dice,iou,cl_dice,tp,tn,fp,fn";

    pub fn from_parts(counts: ConfusionCounts, auc: f64, cl_dice: f64) -> Result<Self> {
        let s = scalar_metrics(&counts)?;
        Ok(Self {
            counts,
            acc: s.acc,
            sen: s.sen,
            spe: s.spe,
            auc,
            dice: s.dice,
            iou: s.iou,
            cl_dice,
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{}",
            self.acc,
            self.sen,
            self.spe,
            self.auc,
            self.dice,
            self.iou,
            self.cl_dice,
            self.counts.tp,
            self.counts.tn,
            self.counts.fp,
            self.counts.fn_
        )
    }
}

impl fmt::Display for MetricsReport {
    /// Flat `key=value` block, one metric per line.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "acc={:.6}", self.acc)?;
        writeln!(f, "sen={:.6}", self.sen)?;
        writeln!(f, "spe={:.6}", self.spe)?;
        writeln!(f, "auc={:.6}", self.auc)?;
        writeln!(f, "dice={:.6}", self.dice)?;
        writeln!(f, "iou={:.6}", self.iou)?;
        writeln!(f, "cl_dice={:.6}", self.cl_dice)?;
        writeln!(f, "tp={}", self.counts.tp)?;
        writeln!(f, "tn={}", self.counts.tn)?;
        writeln!(f, "fp={}", self.counts.fp)?;
        write!(f, "fn={}", self.counts.fn_)
    }
}

/// Centreline Dice of two binary masks, using deep skeleton recursion.
pub fn cl_dice_metric(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    confusion(pred, gt)?;
    cl_dice_of(pred, gt, METRIC_SKELETON_ITERS)
}

/// Skeleton overlap sums behind the centreline Dice, poolable across images.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SkeletonOverlap {
    /// `Σ skel(pred)·gt`
    pub pred_in_gt: f64,
    /// `Σ skel(pred)`
    pub pred: f64,
    /// `Σ skel(gt)·pred`
    pub gt_in_pred: f64,
    /// `Σ skel(gt)`
    pub gt: f64,
}

impl SkeletonOverlap {
    /// Overlap sums of two binary masks.
    pub fn of(pred: &Tensor, gt: &Tensor) -> Result<Self> {
        confusion(pred, gt)?;
        let sp = soft_skeleton_of(pred, METRIC_SKELETON_ITERS)?;
        let sg = soft_skeleton_of(gt, METRIC_SKELETON_ITERS)?;
        let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
        Ok(Self {
            pred_in_gt: dot(&sp, gt),
            pred: sp.sum(),
            gt_in_pred: dot(&sg, pred),
            gt: sg.sum(),
        })
    }

    pub fn merge(&mut self, other: &SkeletonOverlap) {
        self.pred_in_gt += other.pred_in_gt;
        self.pred += other.pred;
        self.gt_in_pred += other.gt_in_pred;
        self.gt += other.gt;
    }

    /// Harmonic mean of the smoothed topology precision and sensitivity.
    pub fn cl_dice(&self) -> f64 {
        let tprec = (self.pred_in_gt + CLDICE_SMOOTH) / (self.pred + CLDICE_SMOOTH);
        let tsens = (self.gt_in_pred + CLDICE_SMOOTH) / (self.gt + CLDICE_SMOOTH);
        2.0 * tprec * tsens / (tprec + tsens)
    }
}

/// AUC, or `None` when only one class is present and there is no pair to rank.
pub fn auc_if_defined(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Ok(None);
    }
    auc(scores, labels).map(Some)
}

/// Every metric for one prediction: `scores` in `[0,1]`, `pred` and `gt` binary.
pub fn evaluate(scores: &Tensor, pred: &Tensor, gt: &Tensor) -> Result<MetricsReport> {
    if scores.shape() != gt.shape() {
        return shape_err(format!("scores {:?} vs mask {:?}", scores.shape(), gt.shape()));
    }
    let counts = confusion(pred, gt)?;
    let labels: Vec<bool> = gt.data().iter().map(|&v| v == 1.0).collect();
    let auc = auc_if_defined(scores.data(), &labels)?.unwrap_or(0.0);
    MetricsReport::from_parts(counts, auc, cl_dice_metric(pred, gt)?)
}
