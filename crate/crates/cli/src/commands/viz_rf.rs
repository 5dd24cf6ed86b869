use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use kldd::data::read_image;
use kldd::kalman::KERNEL_TAPS;
use kldd::{ChainMode, Orientation, Tensor};

use crate::checkpoint::Checkpoint;
use crate::error::{config_err, data_err, Result};

pub const RF_CSV: &str = "rf.csv";
pub const RF_PNG: &str = "rf.png";
pub const MODES: [ChainMode; 2] = [ChainMode::Cumulative, ChainMode::Kalman];
pub const ORIENTATIONS: [Orientation; 2] = [Orientation::Horizontal, Orientation::Vertical];
/// Upscaling of the overlay so individual taps stay visible.
const ZOOM: u32 = 4;
const GAP: u32 = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TapRow {
    /// Index into the queried positions.
    pub position: usize,
    pub mode: ChainMode,
    pub orientation: Orientation,
    pub tap: usize,
    pub row: f64,
    pub col: f64,
}

/// Parses `r,c;r,c;…` into positions.
pub fn parse_positions(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (r, c) = p
                .split_once(',')
                .ok_or_else(|| crate::CliError::Config(format!("position {p:?} is not row,col")))?;
            let n = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| crate::CliError::Config(format!("bad coordinate {v:?}")))
            };
            Ok((n(r)?, n(c)?))
        })
        .collect()
}

/// Tap coordinates of the first deformable layer pair at each position.
///
/// Both chain modes are evaluated on the same raw offsets. Writes `rf.csv`
/// (`position,mode,orientation,tap,row,col`) and `rf.png`, the image with
/// cumulative taps on the left and Kalman taps on the right.
pub fn cmd_viz_rf(checkpoint: &Path, image_path: &Path, positions: &[(usize, usize)], out_dir: &Path) -> Result<Vec<TapRow>> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model()?;
    let Some(pair) = model.first_deformable() else {
        return config_err("the checkpointed model has no deformable layers (ld_enabled=false)");
    };
    let image = read_image(image_path)?;
    let (h, w) = (image.dim(1), image.dim(2));
    if positions.is_empty() {
        return config_err("no positions given");
    }
    if let Some(p) = positions.iter().find(|p| p.0 >= h || p.1 >= w) {
        return config_err(format!("position {p:?} is outside the {h}x{w} image"));
    }
    let mut rows = Vec::with_capacity(positions.len() * KERNEL_TAPS * 4);
    for (i, &pos) in positions.iter().enumerate() {
        for mode in MODES {
            for (layer, orientation) in [(&pair.horizontal, ORIENTATIONS[0]), (&pair.vertical, ORIENTATIONS[1])] {
                let taps = layer.receptive_field(&model.params, &image, pos, Some(mode))?;
                for (tap, &(row, col)) in taps.iter().enumerate() {
                    rows.push(TapRow {
                        position: i,
                        mode,
                        orientation,
                        tap,
                        row,
                        col,
                    });
                }
            }
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| data_err(out_dir, e))?;
    let mut csv = String::from("position,mode,orientation,tap,row,col\n");
    for r in &rows {
        writeln!(csv, "{},{},{},{},{},{}", r.position, r.mode.name(), r.orientation.name(), r.tap, r.row, r.col)
            .expect("writing to a string");
    }
    let csv_path = out_dir.join(RF_CSV);
    fs::write(&csv_path, csv).map_err(|e| data_err(&csv_path, e))?;
    let png = out_dir.join(RF_PNG);
    render(&image, &rows).save(&png).map_err(|e| data_err(&png, e))?;
    Ok(rows)
}

fn render(image: &Tensor, rows: &[TapRow]) -> RgbImage {
    let (h, w) = (image.dim(1) as u32, image.dim(2) as u32);
    let (pw, ph) = (w * ZOOM, h * ZOOM);
    let mut out = RgbImage::from_pixel(2 * pw + GAP, ph, Rgb([255, 255, 255]));
    for panel in 0..2 {
        let x0 = panel * (pw + GAP);
        for y in 0..ph {
            for x in 0..pw {
                let v = image.data()[((y / ZOOM) * w + x / ZOOM) as usize];
                let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                out.put_pixel(x0 + x, y, Rgb([g, g, g]));
            }
        }
    }
    for r in rows {
        let panel = if r.mode == ChainMode::Cumulative { 0 } else { 1 };
        let colour = match (r.tap == KERNEL_TAPS / 2, r.orientation) {
            (true, _) => Rgb([40, 200, 40]),
            (false, Orientation::Horizontal) => Rgb([230, 40, 40]),
            (false, Orientation::Vertical) => Rgb([40, 90, 240]),
        };
        let cy = ((r.row + 0.5) * ZOOM as f64).round() as i64;
        let cx = ((r.col + 0.5) * ZOOM as f64).round() as i64;
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (x, y) = (cx + dx, cy + dy);
                if x >= 0 && y >= 0 && (x as u32) < pw && (y as u32) < ph {
                    out.put_pixel(panel * (pw + GAP) + x as u32, y as u32, colour);
                }
            }
        }
    }
    out
}
