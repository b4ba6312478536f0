use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::IGNORE_INDEX;

/// `counts[truth * k + pred]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::Invalid("confusion matrix must be square and non-empty".into()));
        }
        Ok(Confusion {
            classes: k,
            counts: rows.concat(),
        })
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    /// Accumulates one prediction map; ignored truth pixels are skipped.
    pub fn add(&mut self, pred: &[usize], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape("confusion", format!("{} predictions vs {} labels", pred.len(), truth.len())));
        }
        for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
            if t == IGNORE_INDEX {
                continue;
            }
            if t as usize >= self.classes || p >= self.classes {
                return Err(Error::LabelOutOfRange {
                    label: t,
                    index: i,
                    classes: self.classes,
                });
            }
            self.counts[t as usize * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total: u64 = self.counts.iter().sum();
        let hit: u64 = (0..self.classes).map(|k| self.get(k, k)).sum();
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub miou: f64,
    /// `None` for classes absent from both prediction and truth.
    pub per_class: Vec<Option<f64>>,
}

/// Per-class IoU and their mean over classes with a non-empty union.
pub fn miou(c: &Confusion) -> Result<IouReport> {
    let k = c.classes;
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|i| {
            let tp = c.get(i, i);
            let fn_: u64 = (0..k).map(|j| c.get(i, j)).sum::<u64>() - tp;
            let fp: u64 = (0..k).map(|j| c.get(j, i)).sum::<u64>() - tp;
            let union = tp + fp + fn_;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Invalid("every class is empty in the confusion matrix".into()));
    }
    Ok(IouReport {
        miou: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
    })
}
