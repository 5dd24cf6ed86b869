use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use kldd::data::{gen_synthetic_vessels, write_gray};
use sha2::{Digest, Sha256};

use crate::error::{data_err, Result};

pub const MANIFEST: &str = "manifest.csv";
pub const N_CURVES: usize = 4;
pub const WIDTH_RANGE: (f64, f64) = (1.5, 3.5);

/// Writes `train/` and `val/` splits of synthetic vessel images.
///
/// Training record `i` uses generator seed `seed + i`, validation record `j`
/// seed `seed + n_train + j`. `manifest.csv` lists every file with its seed and
/// the SHA-256 of the image and mask files.
pub fn cmd_gen_data(n_train: usize, n_val: usize, size: usize, seed: u64, out_dir: &Path) -> Result<()> {
    let mut manifest = String::from("split,id,seed,image_sha256,mask_sha256\n");
    for (split, n, first) in [("train", n_train, seed), ("val", n_val, seed + n_train as u64)] {
        let images = out_dir.join(split).join("images");
        let masks = out_dir.join(split).join("masks");
        for d in [&images, &masks] {
            fs::create_dir_all(d).map_err(|e| data_err(d, e))?;
        }
        for i in 0..n as u64 {
            let s = first + i;
            let rec = gen_synthetic_vessels(s, size, size, N_CURVES, WIDTH_RANGE)?;
            let name = format!("{}.png", rec.id);
            let (ip, mp) = (images.join(&name), masks.join(&name));
            write_gray(&ip, &rec.image)?;
            write_gray(&mp, &rec.mask)?;
            writeln!(manifest, "{split},{},{s},{},{}", rec.id, file_hash(&ip)?, file_hash(&mp)?)
                .expect("writing to a string");
        }
    }
    let path = out_dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| data_err(&path, e))
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| data_err(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
