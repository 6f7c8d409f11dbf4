//! On-disk dataset layout:
//!
//! ```text
//! <root>/taxonomy.txt                 `id name` per line
//! <root>/<split>/images/<id>.png      8-bit gray-scale
//! <root>/<split>/masks/<id>.png       8-bit, pixel value = class id
//! <root>/<split>/boundaries/<id>.png  8-bit, 0 or 255 (optional)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};

use super::{extract_boundary, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::taxonomy::ClassTaxonomy;

pub const TAXONOMY_FILE: &str = "taxonomy.txt";

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn save_png(img: &GrayImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn to_gray<T: Copy>(g: &Grid<T>, f: impl Fn(T) -> u8) -> GrayImage {
    GrayImage::from_fn(g.width() as u32, g.height() as u32, |x, y| {
        Luma([f(g.get(y as usize, x as usize))])
    })
}

fn read_gray(path: &Path) -> Result<Grid<u8>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Grid::from_vec(h as usize, w as usize, img.into_raw())
}

/// Reads any image file as gray-scale intensities `k/255`.
pub fn load_image(path: &Path) -> Result<Grid<f64>> {
    Ok(read_gray(path)?.map(|v| v as f64 / 255.0))
}

/// Writes an 8-bit single-channel PNG.
pub fn save_gray(grid: &Grid<u8>, path: &Path) -> Result<()> {
    save_png(&to_gray(grid, |v| v), path)
}

/// Writes `dataset` under `root/<split>/` and the taxonomy at `root`.
pub fn save_dataset(root: &Path, dataset: &Dataset) -> Result<()> {
    let split_dir = root.join(dataset.split.as_str());
    let dirs = ["images", "masks", "boundaries"].map(|d| split_dir.join(d));
    for d in &dirs {
        create_dir(d)?;
    }
    let tax_path = root.join(TAXONOMY_FILE);
    fs::write(&tax_path, dataset.taxonomy.to_text()).map_err(|e| Error::io(&tax_path, e))?;
    for s in &dataset.samples {
        let file = format!("{}.png", s.id);
        save_png(&to_gray(&s.image, |v| (v.clamp(0.0, 1.0) * 255.0).round() as u8), &dirs[0].join(&file))?;
        save_png(&to_gray(&s.labels, |v| v), &dirs[1].join(&file))?;
        let boundary = s.boundary_or_extract();
        save_png(&to_gray(&boundary, |v| v * 255), &dirs[2].join(&file))?;
    }
    Ok(())
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// Reads `root/<split>/`, pairing images and masks by file stem.
///
/// Boundary targets are read when present and derived from the masks otherwise.
pub fn load_dataset(root: &Path, split: Split) -> Result<Dataset> {
    let tax_path = root.join(TAXONOMY_FILE);
    let taxonomy = if tax_path.exists() {
        let text = fs::read_to_string(&tax_path).map_err(|e| Error::io(&tax_path, e))?;
        ClassTaxonomy::from_text(&text)?
    } else {
        ClassTaxonomy::default()
    };
    let split_dir = root.join(split.as_str());
    let image_dir = split_dir.join("images");
    let stems = png_stems(&image_dir)?;
    if stems.is_empty() {
        return Err(Error::Load(format!("no samples found in {}", image_dir.display())));
    }
    let mut samples = Vec::with_capacity(stems.len());
    for stem in stems {
        let file = format!("{stem}.png");
        let mask_path: PathBuf = split_dir.join("masks").join(&file);
        if !mask_path.exists() {
            return Err(Error::Load(format!("image `{stem}` has no mask at {}", mask_path.display())));
        }
        let image = read_gray(&image_dir.join(&file))?.map(|v| v as f64 / 255.0);
        let labels = read_gray(&mask_path)?;
        if labels.dims() != image.dims() {
            return Err(Error::Load(format!(
                "{}: mask size {:?} differs from image size {:?}",
                mask_path.display(),
                labels.dims(),
                image.dims()
            )));
        }
        if let Some(i) = labels.data().iter().position(|&l| !taxonomy.is_valid(l)) {
            return Err(Error::Load(format!(
                "{}: label value {} at (row {}, col {}) outside 0..{}",
                mask_path.display(),
                labels.data()[i],
                i / labels.width(),
                i % labels.width(),
                taxonomy.num_classes()
            )));
        }
        let boundary_path = split_dir.join("boundaries").join(&file);
        let boundary = if boundary_path.exists() {
            let raw = read_gray(&boundary_path)?;
            if raw.dims() != labels.dims() || raw.data().iter().any(|&v| v != 0 && v != 255) {
                return Err(Error::Load(format!(
                    "{}: boundary must match the mask size and hold only 0 or 255",
                    boundary_path.display()
                )));
            }
            raw.map(|v| (v == 255) as u8)
        } else {
            extract_boundary(&labels)
        };
        samples.push(Sample {
            id: stem,
            image,
            labels,
            boundary: Some(boundary),
        });
    }
    Dataset::new(split, taxonomy, samples)
}
