//! Confusion matrices and per-class pixel accuracy / intersection-over-union.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LabelMap;
use crate::taxonomy::ClassTaxonomy;

/// `counts[i][j]` = pixels of true class `i` predicted as class `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self {
            num_classes: c,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        (0..self.num_classes).map(|j| self.get(i, j)).sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.num_classes).map(|i| self.get(i, j)).sum()
    }

    /// Tallies one prediction against its ground truth.
    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.dims() != truth.dims() {
            return Err(Error::Shape(format!(
                "prediction {:?} and truth {:?} differ in size",
                pred.dims(),
                truth.dims()
            )));
        }
        let c = self.num_classes;
        if let Some(&bad) = pred.data().iter().chain(truth.data()).find(|&&v| v as usize >= c) {
            return Err(Error::Validation(format!("class id {bad} outside 0..{c}")));
        }
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            self.counts[t as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    /// Elementwise sum of two matrices.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape("cannot merge confusion matrices of different sizes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Functional form of [`ConfusionMatrix::add`].
pub fn accumulate(mut cm: ConfusionMatrix, pred: &LabelMap, truth: &LabelMap) -> Result<ConfusionMatrix> {
    cm.add(pred, truth)?;
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub id: u8,
    pub name: String,
    /// `None` when the class has no ground-truth pixels.
    pub cpa: Option<f64>,
    /// `None` when the class is absent from both truth and prediction.
    pub iou: Option<f64>,
    /// Ground-truth pixel count.
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    pub background_id: u8,
    /// Mean CPA over defined foreground classes.
    pub mean_cpa: Option<f64>,
    /// Mean IoU over defined foreground classes.
    pub mean_iou: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-class CPA and IoU plus their means over the non-background classes.
pub fn compute_metrics(cm: &ConfusionMatrix, taxonomy: &ClassTaxonomy) -> MetricsReport {
    let classes: Vec<ClassMetrics> = (0..cm.num_classes())
        .map(|i| {
            let tp = cm.get(i, i);
            let row = cm.row_sum(i);
            let col = cm.col_sum(i);
            ClassMetrics {
                id: i as u8,
                name: taxonomy
                    .name(i as u8)
                    .map_or_else(|| format!("class{i}"), str::to_string),
                cpa: ratio(tp, row),
                iou: ratio(tp, row + col - tp),
                support: row,
            }
        })
        .collect();
    let bg = taxonomy.background_id();
    let fg = || classes.iter().filter(|c| c.id != bg);
    MetricsReport {
        mean_cpa: mean(fg().map(|c| c.cpa)),
        mean_iou: mean(fg().map(|c| c.iou)),
        classes,
        background_id: bg,
    }
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table: one column per foreground class plus `Mean`, one
    /// row each for CPA and IoU, values in percent.
    pub fn to_text_table(&self) -> String {
        let fg: Vec<&ClassMetrics> = self.classes.iter().filter(|c| c.id != self.background_id).collect();
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x));
        let mut headers: Vec<String> = fg.iter().map(|c| c.name.clone()).collect();
        headers.push("Mean".to_string());
        let cpa: Vec<String> = fg.iter().map(|c| cell(c.cpa)).chain([cell(self.mean_cpa)]).collect();
        let iou: Vec<String> = fg.iter().map(|c| cell(c.iou)).chain([cell(self.mean_iou)]).collect();
        let widths: Vec<usize> = (0..headers.len())
            .map(|i| headers[i].len().max(cpa[i].len()).max(iou[i].len()))
            .collect();
        let mut out = String::new();
        let mut row = |label: &str, cells: &[String]| {
            let _ = write!(out, "{label:<6}|");
            for (i, c) in cells.iter().enumerate() {
                if i + 1 == cells.len() {
                    out.push_str(" |");
                }
                let _ = write!(out, " {:>w$}", c, w = widths[i]);
            }
            out.push('\n');
        };
        row("", &headers);
        row("CPA", &cpa);
        row("IoU", &iou);
        out
    }
}
