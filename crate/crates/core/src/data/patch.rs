//! Sliding-window patch extraction and overlap-averaged reassembly.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// Geometry of one extraction, enough to put the patches back.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch: usize,
    pub stride: usize,
    /// Top-left `(row, col)` of each patch, row-major over the grid.
    pub origins: Vec<(usize, usize)>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Window starts along one axis; the last window is pushed inward so it
/// ends exactly at the border.
fn starts(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut v = Vec::new();
    let mut p = 0;
    loop {
        if p + patch >= extent {
            v.push(extent - patch);
            break;
        }
        v.push(p);
        p += stride;
    }
    v.dedup();
    v
}

/// Cuts a `[c,h,w]` tensor into `[c,patch,patch]` windows.
pub fn extract_patches(image: &Tensor, patch: usize, stride: usize) -> Result<(Vec<Tensor>, PatchGrid)> {
    if image.ndim() != 3 {
        return shape_err(format!("expected [c,h,w], got {:?}", image.shape()));
    }
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    if patch == 0 || stride == 0 || stride > patch {
        return invalid(format!("need 0 < stride <= patch, got patch {patch} stride {stride}"));
    }
    if patch > h || patch > w {
        return invalid(format!("patch {patch} larger than image {h}x{w}"));
    }
    let rows = starts(h, patch, stride);
    let cols = starts(w, patch, stride);
    let d = image.data();
    let mut patches = Vec::with_capacity(rows.len() * cols.len());
    let mut origins = Vec::with_capacity(rows.len() * cols.len());
    for &r0 in &rows {
        for &c0 in &cols {
            let mut buf = Vec::with_capacity(c * patch * patch);
            for ch in 0..c {
                for r in r0..r0 + patch {
                    let base = ch * h * w + r * w;
                    buf.extend_from_slice(&d[base + c0..base + c0 + patch]);
                }
            }
            patches.push(Tensor::new(&[c, patch, patch], buf)?);
            origins.push((r0, c0));
        }
    }
    let grid = PatchGrid {
        patch,
        stride,
        origins,
        channels: c,
        height: h,
        width: w,
    };
    Ok((patches, grid))
}

/// Inverse of [`extract_patches`]: overlapping pixels are averaged.
pub fn reassemble(patches: &[Tensor], grid: &PatchGrid) -> Result<Tensor> {
    if patches.len() != grid.origins.len() {
        return shape_err(format!("{} patches for {} grid cells", patches.len(), grid.origins.len()));
    }
    let (c, h, w, p) = (grid.channels, grid.height, grid.width, grid.patch);
    let mut sum = vec![0.0; c * h * w];
    let mut count = vec![0u32; h * w];
    for (t, &(r0, c0)) in patches.iter().zip(&grid.origins) {
        if t.shape() != [c, p, p] {
            return shape_err(format!("patch of shape {:?}, expected {:?}", t.shape(), [c, p, p]));
        }
        let d = t.data();
        for ch in 0..c {
            for r in 0..p {
                for q in 0..p {
                    sum[ch * h * w + (r0 + r) * w + c0 + q] += d[ch * p * p + r * p + q];
                }
            }
        }
        for r in 0..p {
            for q in 0..p {
                count[(r0 + r) * w + c0 + q] += 1;
            }
        }
    }
    if count.contains(&0) {
        return invalid("patch grid does not cover the image");
    }
    for (i, v) in sum.iter_mut().enumerate() {
        *v /= count[i % (h * w)] as f64;
    }
    Tensor::new(&[c, h, w], sum)
}
