//! Samples, datasets, synthetic generation, boundary targets and class weights.

mod boundary;
mod generator;
mod io;
mod weights;

use serde::{Deserialize, Serialize};

pub use boundary::extract_boundary;
pub use generator::{generate_dataset, GeneratorSpec};
pub use io::{load_dataset, load_image, save_dataset, save_gray, TAXONOMY_FILE};
pub use weights::{compute_class_weights, ClassWeights};

use crate::error::{Error, Result};
use crate::grid::{Grid, LabelMap};
use crate::taxonomy::ClassTaxonomy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split `{other}`"))),
        }
    }
}

/// One gray-scale image with its label map and (optional) boundary target.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Intensities in `[0, 1]`.
    pub image: Grid<f64>,
    pub labels: LabelMap,
    /// `{0, 1}` boundary target, same shape as `labels`.
    pub boundary: Option<Grid<u8>>,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        image: Grid<f64>,
        labels: LabelMap,
        boundary: Option<Grid<u8>>,
        taxonomy: &ClassTaxonomy,
    ) -> Result<Self> {
        let s = Self {
            id: id.into(),
            image,
            labels,
            boundary,
        };
        s.validate(taxonomy)?;
        Ok(s)
    }

    pub fn validate(&self, taxonomy: &ClassTaxonomy) -> Result<()> {
        if self.image.dims() != self.labels.dims() {
            return Err(Error::Shape(format!(
                "sample {}: image {:?} and labels {:?} differ in size",
                self.id,
                self.image.dims(),
                self.labels.dims()
            )));
        }
        if let Some(i) = self.labels.data().iter().position(|&l| !taxonomy.is_valid(l)) {
            let w = self.labels.width();
            return Err(Error::Validation(format!(
                "sample {}: label {} at (row {}, col {}) is not a class id",
                self.id,
                self.labels.data()[i],
                i / w,
                i % w
            )));
        }
        if let Some(b) = &self.boundary {
            if b.dims() != self.labels.dims() {
                return Err(Error::Shape(format!("sample {}: boundary size differs", self.id)));
            }
            if b.data().iter().any(|&v| v > 1) {
                return Err(Error::Validation(format!("sample {}: boundary is not binary", self.id)));
            }
        }
        Ok(())
    }

    /// The boundary target, derived from the labels when not stored.
    pub fn boundary_or_extract(&self) -> Grid<u8> {
        self.boundary
            .clone()
            .unwrap_or_else(|| extract_boundary(&self.labels))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub taxonomy: ClassTaxonomy,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(split: Split, taxonomy: ClassTaxonomy, samples: Vec<Sample>) -> Result<Self> {
        for s in &samples {
            s.validate(&taxonomy)?;
        }
        Ok(Self {
            split,
            taxonomy,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Per-class pixel counts over all samples.
    pub fn class_pixel_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.taxonomy.num_classes()];
        for s in &self.samples {
            for &l in s.labels.data() {
                counts[l as usize] += 1;
            }
        }
        counts
    }

    /// The first `n` samples as a dataset of the same split.
    pub fn take(&self, n: usize) -> Dataset {
        Dataset {
            split: self.split,
            taxonomy: self.taxonomy.clone(),
            samples: self.samples.iter().take(n).cloned().collect(),
        }
    }
}
