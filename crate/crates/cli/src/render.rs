//! Prediction images.
//!
//! For an input `<stem>.png` three files are written:
//! `<stem>_mask.png` (pixel value = class id), `<stem>_boundary.png`
//! (`round(255·p)`) and `<stem>_overlay.png` (RGB, see [`PALETTE`]).

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};
use tbnet::data::save_gray;
use tbnet::grid::{Grid, LabelMap};

/// Overlay colour per class id. Background (0) shows the input unchanged;
/// ids past the end reuse the table cyclically from 1.
pub const PALETTE: [[u8; 3]; 9] = [
    [0, 0, 0],       // background
    [255, 0, 0],     // crack
    [255, 128, 0],   // corner fracture
    [255, 255, 0],   // seam broken
    [0, 200, 0],     // patch
    [0, 255, 255],   // repair
    [0, 64, 255],    // slab
    [255, 0, 255],   // track
    [255, 255, 255], // light
];

/// Opacity of class colours over the input.
pub const OVERLAY_ALPHA: f64 = 0.5;

pub fn color(id: u8) -> [u8; 3] {
    let i = id as usize;
    PALETTE[if i < PALETTE.len() { i } else { 1 + (i - 1) % (PALETTE.len() - 1) }]
}

pub fn quantize(p: f64) -> u8 {
    (255.0 * p.clamp(0.0, 1.0)).round() as u8
}

pub fn overlay(image: &Grid<f64>, labels: &LabelMap) -> RgbImage {
    RgbImage::from_fn(image.width() as u32, image.height() as u32, |x, y| {
        let (y, x) = (y as usize, x as usize);
        let g = 255.0 * image.get(y, x).clamp(0.0, 1.0);
        let id = labels.get(y, x);
        if id == 0 {
            let g = g.round() as u8;
            return Rgb([g, g, g]);
        }
        let c = color(id);
        Rgb(c.map(|c| ((1.0 - OVERLAY_ALPHA) * g + OVERLAY_ALPHA * c as f64).round() as u8))
    })
}

/// Writes the mask, boundary (when the network has a boundary stream) and overlay images.
pub fn write_prediction(
    dir: &Path,
    stem: &str,
    image: &Grid<f64>,
    labels: &LabelMap,
    boundary: Option<&Grid<f64>>,
) -> Result<Vec<PathBuf>> {
    let mut files = vec![dir.join(format!("{stem}_mask.png"))];
    save_gray(labels, &files[0])?;
    if let Some(b) = boundary {
        let p = dir.join(format!("{stem}_boundary.png"));
        save_gray(&b.map(quantize), &p)?;
        files.push(p);
    }
    let p = dir.join(format!("{stem}_overlay.png"));
    overlay(image, labels).save(&p).with_context(|| format!("writing {}", p.display()))?;
    files.push(p);
    Ok(files)
}
