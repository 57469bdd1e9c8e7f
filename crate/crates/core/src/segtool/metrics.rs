//! Confusion matrix and mean intersection-over-union.
//!
//! A pixel counts only when neither the prediction nor the ground truth
//! carries the ignore label. Classes that appear in neither map have no IoU
//! and are left out of the mean.

use crate::error::{bail, Result};
use crate::tensor::ClassMap;

/// `counts[gt * k + pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
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

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    /// Number of counted (non-ignored) pixels.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &ClassMap, gt: &ClassMap, ignore: u8) -> Result<()> {
        if (pred.n, pred.h, pred.w) != (gt.n, gt.h, gt.w) {
            bail!(
                ShapeMismatch,
                "prediction is {}x{}x{}, ground truth {}x{}x{}",
                pred.n,
                pred.h,
                pred.w,
                gt.n,
                gt.h,
                gt.w
            );
        }
        let k = self.num_classes;
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if p == ignore || g == ignore {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= k || g >= k {
                bail!(InvalidInput, "label {} outside {} classes", p.max(g), k);
            }
            self.counts[g * k + p] += 1;
        }
        Ok(())
    }

    /// Adds another matrix's counts; the order of merges does not matter.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            bail!(
                ShapeMismatch,
                "merging {}-class and {}-class matrices",
                self.num_classes,
                other.num_classes
            );
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)` per class, `None` when the class is absent from
    /// both maps.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let gt_total: u64 = (0..k).map(|p| self.get(c, p)).sum();
                let pred_total: u64 = (0..k).map(|g| self.get(g, c)).sum();
                let union = gt_total + pred_total - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn mean_iou(&self) -> Option<f64> {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    }

    /// Fraction of counted pixels predicted correctly.
    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        let correct: u64 = (0..self.num_classes).map(|c| self.get(c, c)).sum();
        (total > 0).then(|| correct as f64 / total as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouResult {
    pub per_class: Vec<Option<f64>>,
    /// `None` when no class is present at all.
    pub mean: Option<f64>,
}

pub fn miou(pred: &ClassMap, gt: &ClassMap, num_classes: usize, ignore: u8) -> Result<MiouResult> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(pred, gt, ignore)?;
    Ok(MiouResult {
        per_class: cm.iou(),
        mean: cm.mean_iou(),
    })
}
