use std::fs;
use std::path::{Path, PathBuf};

use kldd::data::{binarize, image_files, read_image, write_gray};
use kldd::diffusion::DiffusionSchedule;
use kldd::train::{derive_seed, segment_image};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{config_err, data_err, Result};

pub const PROB_DIR: &str = "prob";
pub const MASK_DIR: &str = "masks";

/// Images to segment: `dir/images/` when present, otherwise `dir` itself.
pub fn input_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let sub = dir.join("images");
    let root = if sub.is_dir() { sub } else { dir.to_path_buf() };
    if !root.is_dir() {
        return Err(data_err(dir, "input directory does not exist"));
    }
    let files = image_files(&root)?;
    if files.is_empty() {
        return Err(data_err(&root, "no images to segment"));
    }
    Ok(files)
}

/// Segments every input image with the checkpointed model.
///
/// `run` supplies the sampling settings (seed, ensemble size, threshold,
/// patch and stride); its model section must equal the checkpoint's. Image
/// `k` in sorted order is sampled with base seed `derive_seed(seed, k, 2)`.
/// Writes `prob/<stem>.png` and `masks/<stem>.png` and returns the stems.
pub fn cmd_segment(checkpoint: &Path, run: &RunConfig, input_dir: &Path, out_dir: &Path) -> Result<Vec<String>> {
    let ck = Checkpoint::load(checkpoint)?;
    if ck.config.model != run.model {
        return config_err("checkpoint/config mismatch: model settings differ from the checkpoint");
    }
    run.validate()?;
    let model = ck.model()?;
    let sched = DiffusionSchedule::scaled_default(run.model.steps)?;
    let files = input_images(input_dir)?;
    let (prob_dir, mask_dir) = (out_dir.join(PROB_DIR), out_dir.join(MASK_DIR));
    for d in [&prob_dir, &mask_dir] {
        fs::create_dir_all(d).map_err(|e| data_err(d, e))?;
    }
    let mut ids = Vec::with_capacity(files.len());
    for (k, path) in files.iter().enumerate() {
        let image = read_image(path)?;
        if image.dim(1) < run.patch || image.dim(2) < run.patch {
            return Err(data_err(path, format!("image smaller than the {}px patch", run.patch)));
        }
        let seed = derive_seed(run.seed, k as u64, 2);
        let prob = segment_image(&model, &sched, &image, run.patch, run.stride, run.ensemble, seed)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        write_gray(&prob_dir.join(format!("{stem}.png")), &prob)?;
        write_gray(&mask_dir.join(format!("{stem}.png")), &binarize(&prob, run.threshold))?;
        ids.push(stem);
    }
    Ok(ids)
}
