//! Procedural pavement images with pixel-exact label maps.
//!
//! Each image is a mid-gray grain texture under a low-frequency illumination
//! gradient. Defect and landmark instances are painted on top as intensity
//! offsets, in a fixed back-to-front class order, so later classes own the
//! pixels they cover.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use tbnet_tensor::par;

use super::{extract_boundary, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::grid::{Grid, LabelMap};
use crate::rng::substream;
use crate::taxonomy::{
    ClassTaxonomy, CORNER_FRACTURE, CRACK, LIGHT, PATCH, REPAIR, SEAM_BROKEN, SLAB, TRACK,
};

/// Annotated-area counts per class of the reference airport pavement
/// collection, and the number of images they were counted over.
const REFERENCE_AREA_COUNTS: [(u8, f64); 8] = [
    (CRACK, 3586.0),
    (CORNER_FRACTURE, 151.0),
    (SEAM_BROKEN, 557.0),
    (PATCH, 312.0),
    (REPAIR, 893.0),
    (SLAB, 3040.0),
    (TRACK, 3749.0),
    (LIGHT, 58.0),
];
const REFERENCE_IMAGES: f64 = 3946.0;

/// Painting order, back to front.
const PAINT_ORDER: [u8; 8] = [SLAB, REPAIR, PATCH, TRACK, SEAM_BROKEN, CORNER_FRACTURE, CRACK, LIGHT];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub num_samples: usize,
    /// `(height, width)`.
    pub image_size: (usize, usize),
    pub seed: u64,
    /// Expected number of instances per image for each foreground class.
    pub class_mix: BTreeMap<u8, f64>,
    /// Peak amplitude of the illumination gradient.
    pub illumination: f64,
    /// Standard deviation of the per-pixel grain.
    pub grain: f64,
    pub split: Split,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            num_samples: 16,
            image_size: (128, 128),
            seed: 0,
            class_mix: Self::reference_mix(),
            illumination: 0.12,
            grain: 0.03,
            split: Split::Train,
        }
    }
}

impl GeneratorSpec {
    /// Instance rates proportional to the reference per-class area counts,
    /// i.e. the average number of annotated areas per image.
    pub fn reference_mix() -> BTreeMap<u8, f64> {
        REFERENCE_AREA_COUNTS
            .iter()
            .map(|&(c, n)| (c, n / REFERENCE_IMAGES))
            .collect()
    }

    pub fn validate(&self, taxonomy: &ClassTaxonomy) -> Result<()> {
        let mut v = Vec::new();
        if self.num_samples == 0 {
            v.push("num_samples must be > 0".to_string());
        }
        if self.image_size.0 < 16 || self.image_size.1 < 16 {
            v.push("image_size must be at least 16x16".to_string());
        }
        for (&c, &rate) in &self.class_mix {
            if !taxonomy.is_valid(c) || c == taxonomy.background_id() {
                v.push(format!("class_mix key {c} is not a foreground class"));
            }
            if !(rate >= 0.0 && rate.is_finite()) {
                v.push(format!("class_mix rate for {c} must be finite and >= 0"));
            }
        }
        if !self.class_mix.values().any(|&r| r > 0.0) {
            v.push("class_mix needs at least one positive rate".to_string());
        }
        if !(self.illumination >= 0.0) || !(self.grain >= 0.0) {
            v.push("noise parameters must be >= 0".to_string());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// Generates `spec.num_samples` samples under the default taxonomy.
///
/// Sample `i` draws only from the random stream `(seed, i)`, so output is a
/// pure function of `spec`.
pub fn generate_dataset(spec: &GeneratorSpec) -> Result<Dataset> {
    let taxonomy = ClassTaxonomy::default();
    spec.validate(&taxonomy)?;
    let samples = par::map_indices(spec.num_samples, |i| {
        let mut rng = substream(spec.seed, "generator", i as u64);
        render_sample(spec, &mut rng, format!("{:05}", i))
    });
    Dataset::new(spec.split, taxonomy, samples)
}

fn render_sample(spec: &GeneratorSpec, rng: &mut ChaCha8Rng, id: String) -> Sample {
    let (h, w) = spec.image_size;
    let mut canvas = Canvas::new(h, w, rng);
    let mut counts: BTreeMap<u8, u64> = BTreeMap::new();
    for &class in &PAINT_ORDER {
        let rate = spec.class_mix.get(&class).copied().unwrap_or(0.0);
        if rate > 0.0 {
            let n = Poisson::new(rate).map(|p| p.sample(rng) as u64).unwrap_or(0);
            counts.insert(class, n);
        }
    }
    for &class in &PAINT_ORDER {
        for _ in 0..counts.get(&class).copied().unwrap_or(0) {
            canvas.paint(class, rng);
        }
    }
    // at least one foreground region per image
    let positive: Vec<(u8, f64)> = spec
        .class_mix
        .iter()
        .filter(|(_, &r)| r > 0.0)
        .map(|(&c, &r)| (c, r))
        .collect();
    let total: f64 = positive.iter().map(|(_, r)| r).sum();
    while canvas.labels.data().iter().all(|&l| l == 0) {
        let mut pick = rng.gen_range(0.0..total);
        let mut class = positive[0].0;
        for &(c, r) in &positive {
            class = c;
            if pick < r {
                break;
            }
            pick -= r;
        }
        canvas.paint(class, rng);
    }

    let grain = Normal::new(0.0, spec.grain.max(1e-12)).expect("valid std");
    let theta = rng.gen_range(0.0..2.0 * PI);
    let amp = spec.illumination * rng.gen_range(0.5..1.0);
    let image = Grid::from_fn(h, w, |y, x| {
        let u = (x as f64 + 0.5) / w as f64 - 0.5;
        let v = (y as f64 + 0.5) / h as f64 - 0.5;
        let light = 0.5 + amp * 2.0 * (theta.cos() * u + theta.sin() * v);
        let noise = if spec.grain > 0.0 { grain.sample(rng) } else { 0.0 };
        let value = (light + noise + canvas.delta.get(y, x)).clamp(0.0, 1.0);
        (value * 255.0).round() / 255.0
    });
    let boundary = extract_boundary(&canvas.labels);
    Sample {
        id,
        image,
        labels: canvas.labels,
        boundary: Some(boundary),
    }
}

/// Label map plus intensity offsets, with a virtual slab grid that seams,
/// joints and corner fractures align to.
struct Canvas {
    labels: LabelMap,
    delta: Grid<f64>,
    grid_spacing: f64,
    grid_offset: (f64, f64),
}

impl Canvas {
    fn new(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Self {
        let m = h.min(w) as f64;
        let spacing = rng.gen_range(0.35..0.6) * m;
        Self {
            labels: Grid::filled(h, w, 0),
            delta: Grid::filled(h, w, 0.0),
            grid_spacing: spacing,
            grid_offset: (rng.gen_range(0.2..0.8) * spacing, rng.gen_range(0.2..0.8) * spacing),
        }
    }

    fn min_side(&self) -> f64 {
        self.labels.height().min(self.labels.width()) as f64
    }

    fn grid_lines(&self, offset: f64, extent: usize) -> Vec<f64> {
        let mut v = Vec::new();
        let mut p = offset;
        while p < extent as f64 {
            v.push(p);
            p += self.grid_spacing;
        }
        v
    }

    fn set(&mut self, y: i64, x: i64, class: u8, delta: f64) {
        self.labels.put(y, x, class);
        self.delta.put(y, x, delta);
    }

    /// Fills every pixel whose centre satisfies `inside`, within a bounding box.
    fn fill(
        &mut self,
        class: u8,
        delta: f64,
        (y0, y1, x0, x1): (f64, f64, f64, f64),
        inside: impl Fn(f64, f64) -> bool,
    ) {
        let (h, w) = self.labels.dims();
        let ylo = y0.floor().max(0.0) as usize;
        let yhi = (y1.ceil().max(0.0) as usize).min(h);
        let xlo = x0.floor().max(0.0) as usize;
        let xhi = (x1.ceil().max(0.0) as usize).min(w);
        for y in ylo..yhi {
            for x in xlo..xhi {
                if inside(y as f64 + 0.5, x as f64 + 0.5) {
                    self.set(y as i64, x as i64, class, delta);
                }
            }
        }
    }

    /// Stamps a `width`-pixel brush along the segment `a -> b`.
    fn stroke(&mut self, class: u8, delta: f64, a: (f64, f64), b: (f64, f64), width: usize) {
        let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        let steps = (len / 0.35).ceil().max(1.0) as usize;
        let lo = -((width as i64 - 1) / 2);
        let hi = width as i64 / 2;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let y = (a.0 + t * (b.0 - a.0)).floor() as i64;
            let x = (a.1 + t * (b.1 - a.1)).floor() as i64;
            for dy in lo..=hi {
                for dx in lo..=hi {
                    self.set(y + dy, x + dx, class, delta);
                }
            }
        }
    }

    fn paint(&mut self, class: u8, rng: &mut ChaCha8Rng) {
        let (h, w) = self.labels.dims();
        let (hf, wf) = (h as f64, w as f64);
        let m = self.min_side();
        let jitter = rng.gen_range(0.8..1.2);
        match class {
            CRACK => {
                let delta = -0.28 * jitter;
                let width = rng.gen_range(1..=3);
                let mut p = (rng.gen_range(0.0..hf), rng.gen_range(0.0..wf));
                let mut heading = rng.gen_range(0.0..2.0 * PI);
                for _ in 0..rng.gen_range(3..=6) {
                    heading += rng.gen_range(-0.6..0.6);
                    let len = rng.gen_range(0.08..0.2) * m;
                    let q = (p.0 + len * heading.sin(), p.1 + len * heading.cos());
                    self.stroke(class, delta, p, q, width);
                    p = q;
                }
            }
            CORNER_FRACTURE => {
                let ys = self.grid_lines(self.grid_offset.0, h);
                let xs = self.grid_lines(self.grid_offset.1, w);
                let cy = ys[rng.gen_range(0..ys.len())];
                let cx = xs[rng.gen_range(0..xs.len())];
                let sy = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let sx = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let a = rng.gen_range(0.06..0.14) * m;
                let b = rng.gen_range(0.06..0.14) * m;
                // right triangle with its right angle on the block corner
                let inside = move |y: f64, x: f64| {
                    let u = (y - cy) * sy / a;
                    let v = (x - cx) * sx / b;
                    u >= 0.0 && v >= 0.0 && u + v <= 1.0
                };
                let bbox = (cy - a, cy + a, cx - b, cx + b);
                self.fill(class, -0.2 * jitter, bbox, inside);
            }
            SEAM_BROKEN => {
                let horizontal = rng.gen_bool(0.5);
                let (cy, cx) = if horizontal {
                    let ys = self.grid_lines(self.grid_offset.0, h);
                    (ys[rng.gen_range(0..ys.len())], rng.gen_range(0.0..wf))
                } else {
                    let xs = self.grid_lines(self.grid_offset.1, w);
                    (rng.gen_range(0.0..hf), xs[rng.gen_range(0..xs.len())])
                };
                let ry = (rng.gen_range(0.02..0.05) * m).max(2.0);
                let rx = (rng.gen_range(0.02..0.05) * m).max(2.0);
                self.fill(class, -0.18 * jitter, (cy - ry, cy + ry, cx - rx, cx + rx), |y, x| {
                    ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0
                });
            }
            PATCH => {
                let ph = rng.gen_range(0.1..0.25) * m;
                let pw = rng.gen_range(0.1..0.25) * m;
                let y0 = rng.gen_range(0.0..(hf - ph).max(1.0));
                let x0 = rng.gen_range(0.0..(wf - pw).max(1.0));
                self.fill(class, 0.12 * jitter, (y0, y0 + ph, x0, x0 + pw), |_, _| true);
            }
            REPAIR => {
                let thick = (rng.gen_range(0.04..0.08) * m).max(3.0);
                let delta = -0.1 * jitter;
                if rng.gen_bool(0.5) {
                    let len = rng.gen_range(0.5..1.0) * wf;
                    let y0 = rng.gen_range(0.0..hf - thick);
                    let x0 = rng.gen_range(0.0..=(wf - len));
                    self.fill(class, delta, (y0, y0 + thick, x0, x0 + len), |_, _| true);
                } else {
                    let len = rng.gen_range(0.5..1.0) * hf;
                    let x0 = rng.gen_range(0.0..wf - thick);
                    let y0 = rng.gen_range(0.0..=(hf - len));
                    self.fill(class, delta, (y0, y0 + len, x0, x0 + thick), |_, _| true);
                }
            }
            SLAB => {
                let width = rng.gen_range(1..=2);
                let delta = -0.16 * jitter;
                if rng.gen_bool(0.5) {
                    let ys = self.grid_lines(self.grid_offset.0, h);
                    let y = ys[rng.gen_range(0..ys.len())];
                    self.stroke(class, delta, (y, 0.0), (y, wf - 1.0), width);
                } else {
                    let xs = self.grid_lines(self.grid_offset.1, w);
                    let x = xs[rng.gen_range(0..xs.len())];
                    self.stroke(class, delta, (0.0, x), (hf - 1.0, x), width);
                }
            }
            TRACK => {
                let delta = -0.07 * jitter;
                let (cy, cx) = (rng.gen_range(0.0..hf), rng.gen_range(0.0..wf));
                match rng.gen_range(0..3) {
                    0 => {
                        let outer = rng.gen_range(0.06..0.12) * m;
                        let inner = outer - rng.gen_range(2.0..4.0);
                        self.fill(class, delta, (cy - outer, cy + outer, cx - outer, cx + outer), |y, x| {
                            let r = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                            r <= outer && r >= inner
                        });
                    }
                    1 => {
                        let theta = rng.gen_range(0.0..PI);
                        let half = rng.gen_range(0.2..0.4) * m;
                        let a = (cy - half * theta.sin(), cx - half * theta.cos());
                        let b = (cy + half * theta.sin(), cx + half * theta.cos());
                        self.stroke(class, delta, a, b, rng.gen_range(3..=6));
                    }
                    _ => {
                        let ry = rng.gen_range(0.05..0.1) * m;
                        let rx = rng.gen_range(0.05..0.1) * m;
                        self.fill(class, delta, (cy - ry, cy + ry, cx - rx, cx + rx), |y, x| {
                            ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0
                        });
                    }
                }
            }
            LIGHT => {
                let r = (rng.gen_range(0.015..0.03) * m).max(2.0);
                let (cy, cx) = (rng.gen_range(r..hf - r), rng.gen_range(r..wf - r));
                self.fill(class, 0.35 * jitter, (cy - r, cy + r, cx - r, cx + r), |y, x| {
                    (y - cy).powi(2) + (x - cx).powi(2) <= r * r
                });
            }
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            num_samples: 4,
            image_size: (128, 128),
            seed,
            ..GeneratorSpec::default()
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(generate_dataset(&small(7)).unwrap(), generate_dataset(&small(7)).unwrap());
        assert_ne!(generate_dataset(&small(7)).unwrap(), generate_dataset(&small(8)).unwrap());
    }

    #[test]
    fn shapes_and_label_ranges() {
        let d = generate_dataset(&small(3)).unwrap();
        assert_eq!(d.len(), 4);
        for s in &d.samples {
            assert_eq!(s.image.dims(), (128, 128));
            assert_eq!(s.labels.dims(), (128, 128));
            assert!(s.labels.data().iter().all(|&l| l < 9));
            assert!(s.labels.data().iter().any(|&l| l != 0));
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(s.boundary.as_ref().unwrap(), &extract_boundary(&s.labels));
        }
    }

    #[test]
    fn single_class_mix_paints_only_that_class() {
        let spec = GeneratorSpec {
            num_samples: 6,
            class_mix: [(CRACK, 2.0)].into_iter().collect(),
            ..small(11)
        };
        let d = generate_dataset(&spec).unwrap();
        for s in &d.samples {
            let mut seen = [false; 9];
            s.labels.data().iter().for_each(|&l| seen[l as usize] = true);
            assert!(seen[0] && seen[CRACK as usize]);
            assert_eq!(seen.iter().filter(|&&b| b).count(), 2);
        }
    }

    #[test]
    fn every_class_renders() {
        for &c in &PAINT_ORDER {
            let spec = GeneratorSpec {
                num_samples: 3,
                class_mix: [(c, 1.0)].into_iter().collect(),
                ..small(5)
            };
            let d = generate_dataset(&spec).unwrap();
            assert!(d.class_pixel_counts()[c as usize] > 0, "class {c}");
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = GeneratorSpec {
            num_samples: 0,
            class_mix: [(0, 1.0)].into_iter().collect(),
            grain: -1.0,
            ..GeneratorSpec::default()
        };
        match generate_dataset(&bad) {
            Err(Error::Config(v)) => assert_eq!(v.len(), 3, "{v:?}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn reference_mix_is_proportional_to_area_counts() {
        let mix = GeneratorSpec::reference_mix();
        assert!((mix[&CRACK] / mix[&LIGHT] - 3586.0 / 58.0).abs() < 1e-9);
        assert_eq!(mix.len(), 8);
    }
}
