//! PNG and binary PNM reading and writing, and dataset folders.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage};

use super::{to_model_space, SampleRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

fn data_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn is_supported(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Raw 8-bit planes `[c,h,w]` with values in `0..=255`.
fn read_planes(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| data_err(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, raw): (usize, Vec<u8>) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            (1, img.to_luma8().into_raw())
        }
        other => (3, other.to_rgb8().into_raw()),
    };
    let hw = h * w;
    // interleaved to planar
    let planar = Tensor::from_fn(&[c, h, w], |i| raw[(i % hw) * c + i / hw] as f64);
    Ok(planar)
}

/// Reads an image as model-space gray `[1,h,w]` in `[0,1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    to_model_space(&read_planes(path)?, 255.0)
}

/// Reads a mask, binarised at 127 (values above 127 are foreground).
pub fn read_mask(path: &Path) -> Result<Tensor> {
    let planes = read_planes(path)?;
    let (h, w) = (planes.dim(1), planes.dim(2));
    let hw = h * w;
    let d = planes.data();
    let c = planes.dim(0);
    Ok(Tensor::from_fn(&[1, h, w], |i| {
        let v = (0..c).map(|k| d[k * hw + i]).fold(0.0, f64::max);
        if v > 127.0 {
            1.0
        } else {
            0.0
        }
    }))
}

/// Writes a `[1,h,w]` map in `[0,1]` as an 8-bit gray PNG or PGM,
/// chosen by extension.
pub fn write_gray(path: &Path, map: &Tensor) -> Result<()> {
    if map.ndim() != 3 || map.dim(0) != 1 {
        return Err(data_err(path, format!("expected [1,h,w] map, got {:?}", map.shape())));
    }
    let (h, w) = (map.dim(1), map.dim(2));
    let bytes: Vec<u8> = map
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer sized from the map");
    img.save(path).map_err(|e| data_err(path, e.to_string()))
}

/// Supported image files directly inside `dir`, sorted by path.
pub fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| data_err(dir, e.to_string()))? {
        let path = entry.map_err(|e| data_err(dir, e.to_string()))?.path();
        if path.is_file() && is_supported(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loads `dir/images/*` with the mask of the same file stem from
/// `dir/masks/`, sorted by file name.
///
/// A directory without an `images/` folder yields no records.
pub fn load_folder(dir: &Path) -> Result<Vec<SampleRecord>> {
    if !dir.is_dir() {
        return Err(data_err(dir, "not a directory"));
    }
    let images = dir.join("images");
    if !images.is_dir() {
        return Ok(Vec::new());
    }
    let masks_dir = dir.join("masks");
    let masks = if masks_dir.is_dir() { image_files(&masks_dir)? } else { Vec::new() };
    let mut out = Vec::new();
    for img_path in image_files(&images)? {
        let id = stem(&img_path);
        let mask_path = masks
            .iter()
            .find(|m| stem(m) == id)
            .ok_or_else(|| data_err(&img_path, format!("no mask named {id}.* in {}", masks_dir.display())))?;
        let image = read_image(&img_path)?;
        let mask = read_mask(mask_path)?;
        if image.shape() != mask.shape() {
            return Err(data_err(
                mask_path,
                format!("mask {:?} does not match image {:?}", mask.shape(), image.shape()),
            ));
        }
        out.push(SampleRecord::new(id, image, mask)?);
    }
    Ok(out)
}
