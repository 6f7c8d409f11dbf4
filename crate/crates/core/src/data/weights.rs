use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// Inverse-frequency class weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    /// Total pixel count divided by the class's pixel count; 0 for absent classes.
    pub raw: Vec<f64>,
    /// `raw` divided by its sum.
    pub normalized: Vec<f64>,
}

impl ClassWeights {
    /// Equal weights `1/C` for every class.
    pub fn uniform(num_classes: usize) -> Self {
        Self {
            raw: vec![1.0; num_classes],
            normalized: vec![1.0 / num_classes as f64; num_classes],
        }
    }

    /// Weights from per-class pixel counts.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Validation("class weights need at least one pixel".into()));
        }
        let raw: Vec<f64> = counts
            .iter()
            .map(|&c| if c == 0 { 0.0 } else { total as f64 / c as f64 })
            .collect();
        let sum: f64 = raw.iter().sum();
        let normalized = raw.iter().map(|r| r / sum).collect();
        Ok(Self { raw, normalized })
    }

    pub fn num_classes(&self) -> usize {
        self.normalized.len()
    }
}

/// Class weights over all pixels of the training set.
pub fn compute_class_weights(train: &Dataset) -> Result<ClassWeights> {
    if train.is_empty() {
        return Err(Error::Validation("class weights need a non-empty training set".into()));
    }
    ClassWeights::from_counts(&train.class_pixel_counts())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::data::{Sample, Split};
    use crate::grid::Grid;
    use crate::taxonomy::ClassTaxonomy;

    fn two_class() -> ClassTaxonomy {
        ClassTaxonomy::new(vec![(0, "bg".into()), (1, "fg".into())], 0).unwrap()
    }

    fn dataset(labels: Vec<Grid<u8>>) -> Dataset {
        let tax = two_class();
        let samples = labels
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                let (h, w) = l.dims();
                Sample::new(format!("{i}"), Grid::filled(h, w, 0.5), l, None, &tax).unwrap()
            })
            .collect();
        Dataset::new(Split::Train, tax, samples).unwrap()
    }

    #[test]
    fn hand_computed_example() {
        let d = dataset(vec![Grid::from_vec(2, 2, vec![0, 0, 0, 1]).unwrap()]);
        let w = compute_class_weights(&d).unwrap();
        assert_eq!(w.raw, vec![4.0 / 3.0, 4.0]);
        assert_eq!(w.normalized, vec![0.25, 0.75]);
    }

    #[test]
    fn balanced_is_half_half() {
        let d = dataset(vec![Grid::from_vec(1, 2, vec![0, 1]).unwrap()]);
        assert_eq!(compute_class_weights(&d).unwrap().normalized, vec![0.5, 0.5]);
    }

    #[test]
    fn duplicated_images_give_identical_weights() {
        let g = Grid::from_vec(2, 3, vec![0, 0, 1, 0, 0, 0]).unwrap();
        let one = compute_class_weights(&dataset(vec![g.clone()])).unwrap();
        let two = compute_class_weights(&dataset(vec![g.clone(), g])).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn absent_class_gets_zero_weight() {
        let w = ClassWeights::from_counts(&[3, 0, 1]).unwrap();
        assert_eq!(w.raw[1], 0.0);
        assert_eq!(w.normalized[1], 0.0);
        assert!((w.normalized.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(compute_class_weights(&dataset(vec![])).is_err());
    }

    proptest! {
        #[test]
        fn normalized_sums_to_one_and_rarer_is_heavier(counts in proptest::collection::vec(0u64..10_000, 2..10)) {
            prop_assume!(counts.iter().any(|&c| c > 0));
            let w = ClassWeights::from_counts(&counts).unwrap();
            prop_assert!((w.normalized.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(w.normalized.iter().all(|&v| v >= 0.0));
            for i in 0..counts.len() {
                for j in 0..counts.len() {
                    if counts[i] > 0 && counts[j] > 0 && counts[i] < counts[j] {
                        prop_assert!(w.normalized[i] > w.normalized[j]);
                    }
                }
            }
        }
    }
}
