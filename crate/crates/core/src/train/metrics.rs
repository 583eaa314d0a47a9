//! Confusion-matrix segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts indexed `[truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::dim("class", "confusion matrix must be square"));
        }
        Ok(ConfusionMatrix {
            num_classes: n,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks(self.num_classes)
            .map(<[u64]>::to_vec)
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Pixels whose truth equals `ignore_index` are skipped.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8], ignore_index: u8) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::dim(
                "numel",
                format!("{} predictions for {} labels", pred.len(), truth.len()),
            ));
        }
        let n = self.num_classes;
        for (&p, &t) in pred.iter().zip(truth) {
            if t == ignore_index {
                continue;
            }
            let (p, t) = (usize::from(p), usize::from(t));
            if p >= n || t >= n {
                return Err(Error::Validation(format!(
                    "label pair ({t}, {p}) outside {n} classes"
                )));
            }
            self.counts[t * n + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class is absent from both
    /// truth and prediction.
    pub fn iou(&self, k: usize) -> Option<f64> {
        let tp = self.get(k, k);
        let fn_: u64 = (0..self.num_classes).map(|p| self.get(k, p)).sum::<u64>() - tp;
        let fp: u64 = (0..self.num_classes).map(|t| self.get(t, k)).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    pub fn report(&self, iters_seen: usize) -> MetricsReport {
        let per_class_iou: Vec<Option<f64>> = (0..self.num_classes).map(|k| self.iou(k)).collect();
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        let total = self.total();
        let trace: u64 = (0..self.num_classes).map(|k| self.get(k, k)).sum();
        MetricsReport {
            confusion: self.rows(),
            per_class_iou,
            miou,
            pixel_acc: if total == 0 {
                0.0
            } else {
                trace as f64 / total as f64
            },
            iters_seen,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    /// Rows are ground truth, columns prediction.
    pub confusion: Vec<Vec<u64>>,
    /// `null` for classes absent from both truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_acc: f64,
    /// Training iterations behind the evaluated weights.
    pub iters_seen: usize,
}

impl MetricsReport {
    /// Aligned plain-text table.
    pub fn table(&self) -> String {
        let mut s = format!("{:<8}{:>10}{:>14}\n", "class", "IoU", "pixels");
        for (k, iou) in self.per_class_iou.iter().enumerate() {
            let iou = iou.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            let pixels: u64 = self.confusion[k].iter().sum();
            s += &format!("{k:<8}{iou:>10}{pixels:>14}\n");
        }
        s += &format!("{:<8}{:>10.4}\n", "mIoU", self.miou);
        s += &format!("{:<8}{:>10.4}\n", "pixacc", self.pixel_acc);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_class_hand_count() {
        let cm = ConfusionMatrix::from_rows(&[vec![3, 1], vec![1, 3]]).unwrap();
        let r = cm.report(0);
        assert_eq!(r.per_class_iou, vec![Some(0.6), Some(0.6)]);
        assert!((r.miou - 0.6).abs() < 1e-12);
        assert_eq!(r.pixel_acc, 0.75);
    }

    #[test]
    fn absent_classes_excluded() {
        let mut cm = ConfusionMatrix::new(5);
        cm.accumulate(&[0; 10], &[0; 10], 255).unwrap();
        let r = cm.report(0);
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.pixel_acc, 1.0);
        assert_eq!(r.per_class_iou[1..], [None; 4]);
    }

    #[test]
    fn ignored_pixels_not_counted() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1, 1], &[0, 255, 1], 255).unwrap();
        assert_eq!(cm.total(), 2);
        assert!(cm.accumulate(&[2], &[0], 255).is_err());
    }
}
