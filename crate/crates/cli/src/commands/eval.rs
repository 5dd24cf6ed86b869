use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use kldd::data::{image_files, read_image, read_mask};
use kldd::metrics::{auc_if_defined, confusion, evaluate, ConfusionCounts, MetricsReport, SkeletonOverlap};

use crate::error::{data_err, Result};

pub const METRICS_CSV: &str = "metrics.csv";
pub const AGGREGATE_ID: &str = "aggregate";

/// Per-image reports plus the pooled aggregate.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_image: Vec<(String, MetricsReport)>,
    /// Counts and skeleton sums pooled over images, AUC over pooled scores.
    pub aggregate: MetricsReport,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("id,{}\n", MetricsReport::CSV_HEADER);
        for (id, r) in &self.per_image {
            writeln!(s, "{id},{}", r.csv_row()).expect("writing to a string");
        }
        writeln!(s, "{AGGREGATE_ID},{}", self.aggregate.csv_row()).expect("writing to a string");
        s
    }
}

fn sub_or_self(dir: &Path, sub: &str) -> PathBuf {
    let p = dir.join(sub);
    if p.is_dir() {
        p
    } else {
        dir.to_path_buf()
    }
}

fn by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(data_err(dir, "directory does not exist"));
    }
    Ok(image_files(dir)?
        .into_iter()
        .map(|p| (p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(), p))
        .collect())
}

/// Scores predicted masks against ground truth, matched by file stem.
///
/// Predictions come from `pred_dir/masks/` (or `pred_dir`), scores from
/// `pred_dir/prob/` when present and otherwise the masks themselves; ground
/// truth from `gt_dir/masks/` (or `gt_dir`). A per-image AUC is 0 when the
/// ground truth holds a single class. Writes `metrics.csv` to `out` if given.
pub fn cmd_eval(pred_dir: &Path, gt_dir: &Path, out: Option<&Path>) -> Result<EvalReport> {
    let preds = by_stem(&sub_or_self(pred_dir, "masks"))?;
    let gts = by_stem(&sub_or_self(gt_dir, "masks"))?;
    let prob_dir = pred_dir.join("prob");
    let probs = if prob_dir.is_dir() { Some(by_stem(&prob_dir)?) } else { None };
    if gts.is_empty() {
        return Err(data_err(gt_dir, "no ground-truth masks"));
    }
    if let Some(id) = preds.keys().find(|k| !gts.contains_key(*k)) {
        return Err(data_err(&preds[id], "prediction has no ground-truth mask of the same name"));
    }

    let mut per_image = Vec::with_capacity(gts.len());
    let mut counts = ConfusionCounts::default();
    let mut overlap = SkeletonOverlap::default();
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for (id, gt_path) in &gts {
        let pred_path = preds
            .get(id)
            .ok_or_else(|| data_err(gt_path, "ground truth has no prediction of the same name"))?;
        let gt = read_mask(gt_path)?;
        let pred = read_mask(pred_path)?;
        let score = match &probs {
            Some(p) => {
                let sp = p.get(id).ok_or_else(|| data_err(&prob_dir, format!("no probability map for {id}")))?;
                read_image(sp)?
            }
            None => pred.clone(),
        };
        if pred.shape() != gt.shape() || score.shape() != gt.shape() {
            return Err(data_err(pred_path, format!("size differs from ground truth {:?}", gt.shape())));
        }
        let report = evaluate(&score, &pred, &gt)?;
        counts.merge(&confusion(&pred, &gt)?);
        overlap.merge(&SkeletonOverlap::of(&pred, &gt)?);
        scores.extend_from_slice(score.data());
        labels.extend(gt.data().iter().map(|&v| v == 1.0));
        per_image.push((id.clone(), report));
    }
    let auc = auc_if_defined(&scores, &labels)?.unwrap_or(0.0);
    let aggregate = MetricsReport::from_parts(counts, auc, overlap.cl_dice())?;
    let report = EvalReport { per_image, aggregate };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| data_err(dir, e))?;
        let path = dir.join(METRICS_CSV);
        fs::write(&path, report.to_csv()).map_err(|e| data_err(&path, e))?;
    }
    Ok(report)
}
