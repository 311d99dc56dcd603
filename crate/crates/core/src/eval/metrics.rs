//! Precision / recall / F1 for detections and for alignment outcomes.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::align::{AlignmentResult, GroupStatus};
use crate::model::{iou, Detection};

pub const DEFAULT_IOU_MIN: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MetricReport {
    /// Undefined ratios are reported as 0.
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let ratio = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { tp, fp, fn_, precision, recall, f1 }
    }

    /// Pools the counts of two reports.
    pub fn merge(&self, other: &MetricReport) -> MetricReport {
        Self::from_counts(self.tp + other.tp, self.fp + other.fp, self.fn_ + other.fn_)
    }
}

/// Greedy one-to-one matching, highest predicted weight first. A prediction
/// is a true positive when an unmatched truth box of the same label overlaps
/// it with IoU at least `iou_min` (the best such box is taken).
pub fn detection_metrics(predicted: &[Detection], truth: &[Detection], iou_min: f64) -> MetricReport {
    let mut order: Vec<usize> = (0..predicted.len()).collect();
    order.sort_by(|&a, &b| {
        predicted[b]
            .weight
            .total_cmp(&predicted[a].weight)
            .then_with(|| crate::model::detection_order(&predicted[a], &predicted[b]))
    });
    let mut used = vec![false; truth.len()];
    let mut tp = 0;
    for i in order {
        let p = &predicted[i];
        let best = truth
            .iter()
            .enumerate()
            .filter(|(j, t)| !used[*j] && t.label == p.label)
            .map(|(j, t)| (j, iou(&p.rect, &t.rect)))
            .filter(|(_, v)| *v >= iou_min)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((j, _)) = best {
            used[j] = true;
            tp += 1;
        }
    }
    let tp = tp as u64;
    MetricReport::from_counts(tp, predicted.len() as u64 - tp, truth.len() as u64 - tp)
}

/// Identity of one aligned position: both sides and the status.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PositionKey {
    pub ref_label: String,
    pub ref_quantity: u32,
    pub det_label: String,
    pub det_quantity: u32,
    pub status: GroupStatus,
}

pub fn position_keys(result: &AlignmentResult) -> Vec<PositionKey> {
    result
        .ref_aligned
        .iter()
        .zip(result.det_aligned.iter())
        .zip(&result.statuses)
        .map(|((r, d), s)| PositionKey {
            ref_label: r.label.clone().into(),
            ref_quantity: r.quantity,
            det_label: d.label.clone().into(),
            det_quantity: d.quantity,
            status: *s,
        })
        .collect()
}

/// Group-level comparison of a produced alignment with the ground-truth one.
///
/// Positions are compared as multisets of (reference group, detected group,
/// status). Produced positions found in the truth are true positives, the
/// remaining produced positions are false positives and the remaining truth
/// positions false negatives.
pub fn compliance_metrics(result: &AlignmentResult, truth: &AlignmentResult) -> MetricReport {
    let mut pool: HashMap<PositionKey, u64> = HashMap::new();
    for k in position_keys(truth) {
        *pool.entry(k).or_default() += 1;
    }
    let mut tp = 0;
    let produced = position_keys(result);
    for k in &produced {
        if let Some(n) = pool.get_mut(k) {
            if *n > 0 {
                *n -= 1;
                tp += 1;
            }
        }
    }
    let fn_: u64 = pool.values().sum();
    MetricReport::from_counts(tp, produced.len() as u64 - tp, fn_)
}
