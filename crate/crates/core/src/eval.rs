//! Confusion counts and IoU metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::LabelId;

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: Vec<LabelId>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<LabelId>) -> Self {
        let n = classes.len();
        Self {
            classes,
            counts: vec![0; n * n],
        }
    }

    pub fn classes(&self) -> &[LabelId] {
        &self.classes
    }

    fn index(&self, class: LabelId) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| *c == class)
            .ok_or_else(|| Error::LabelSpace(format!("class {class} not tracked by the confusion matrix")))
    }

    pub fn count(&self, gt: LabelId, pred: LabelId) -> u64 {
        match (self.index(gt), self.index(pred)) {
            (Ok(r), Ok(c)) => self.counts[r * self.classes.len() + c],
            _ => 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, ground_truth: &[Option<LabelId>], predicted: &[LabelId]) -> Result<()> {
        if ground_truth.len() != predicted.len() {
            return Err(Error::Shape(format!(
                "ground truth has {} pixels, prediction has {}",
                ground_truth.len(),
                predicted.len()
            )));
        }
        let n = self.classes.len();
        for (gt, pred) in ground_truth.iter().zip(predicted) {
            let Some(gt) = gt else { continue };
            let r = self.index(*gt)?;
            let c = self.index(*pred)?;
            self.counts[r * n + c] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::Shape("confusion matrices track different classes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU and their mean, background included. Classes absent
    /// from both ground truth and prediction are left out of the mean.
    pub fn miou(&self) -> Result<MiouReport> {
        let n = self.classes.len();
        let mut per_class = BTreeMap::new();
        let mut undefined = Vec::new();
        for (k, &class) in self.classes.iter().enumerate() {
            let tp = self.counts[k * n + k];
            let row: u64 = self.counts[k * n..(k + 1) * n].iter().sum();
            let col: u64 = (0..n).map(|r| self.counts[r * n + k]).sum();
            let denom = row + col - tp;
            if denom == 0 {
                undefined.push(class);
            } else {
                per_class.insert(class, tp as f64 / denom as f64);
            }
        }
        if per_class.is_empty() {
            return Err(Error::UndefinedMetric);
        }
        let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
        Ok(MiouReport {
            per_class,
            undefined,
            mean,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub per_class: BTreeMap<LabelId, f64>,
    /// Classes excluded from the mean for a zero denominator.
    pub undefined: Vec<LabelId>,
    pub mean: f64,
}

pub fn imiou(per_task: &[f64]) -> Result<f64> {
    if per_task.is_empty() {
        return Err(Error::Domain("incremental mean IoU of an empty task list"));
    }
    Ok(per_task.iter().sum::<f64>() / per_task.len() as f64)
}
