//! ROC and precision-recall curves with their areas.
//!
//! Scores are swept from high to low; samples sharing a score form one block
//! and enter a curve together. ROC-AUC is accumulated in integer pair counts,
//! so it equals the Mann-Whitney concordance probability with tied
//! cross-class pairs credited one half.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("degenerate labels: need at least one positive and one negative ({positives} positive of {total})")]
    DegenerateLabels { positives: usize, total: usize },
    #[error("no positive labels: precision-recall is undefined")]
    NoPositives,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Per-block `(positives, negatives)` in descending score order.
fn tie_blocks(scores: &[f64], labels: &[bool]) -> Result<Vec<(u64, u64)>> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricError::NonFiniteScore(i));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut blocks: Vec<(u64, u64)> = Vec::new();
    let mut prev: Option<f64> = None;
    for i in order {
        // total_cmp separates -0.0 from 0.0; a threshold cannot.
        if prev != Some(scores[i]) {
            blocks.push((0, 0));
            prev = Some(scores[i]);
        }
        let block = blocks.last_mut().expect("pushed above");
        if labels[i] {
            block.0 += 1;
        } else {
            block.1 += 1;
        }
    }
    Ok(blocks)
}

fn class_totals(blocks: &[(u64, u64)]) -> (u64, u64) {
    blocks.iter().fold((0, 0), |(p, n), &(bp, bn)| (p + bp, n + bn))
}

fn require_both(blocks: &[(u64, u64)]) -> Result<(u64, u64)> {
    let (p, n) = class_totals(blocks);
    if p == 0 || n == 0 {
        return Err(MetricError::DegenerateLabels { positives: p as usize, total: (p + n) as usize });
    }
    Ok((p, n))
}

/// ROC points from `(0, 0)` to `(1, 1)`, one per distinct score.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    let blocks = tie_blocks(scores, labels)?;
    let (p, n) = require_both(&blocks)?;
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0u64, 0u64);
    for (bp, bn) in blocks {
        tp += bp;
        fp += bn;
        points.push(RocPoint { fpr: fp as f64 / n as f64, tpr: tp as f64 / p as f64 });
    }
    Ok(points)
}

/// Trapezoidal area under the ROC curve.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let blocks = tie_blocks(scores, labels)?;
    let (p, n) = require_both(&blocks)?;
    // Twice the trapezoid area in units of 1/(p*n).
    let mut doubled: u128 = 0;
    let mut tp: u128 = 0;
    for (bp, bn) in blocks {
        doubled += bn as u128 * (2 * tp + bp as u128);
        tp += bp as u128;
    }
    Ok(doubled as f64 / (2 * p as u128 * n as u128) as f64)
}

/// Precision-recall points after each score block, starting at recall 0.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<PrPoint>> {
    let blocks = tie_blocks(scores, labels)?;
    let (p, _) = class_totals(&blocks);
    if p == 0 {
        return Err(MetricError::NoPositives);
    }
    let mut points = vec![PrPoint { recall: 0.0, precision: 1.0 }];
    let (mut tp, mut seen) = (0u64, 0u64);
    for (bp, bn) in blocks {
        tp += bp;
        seen += bp + bn;
        points.push(PrPoint { recall: tp as f64 / p as f64, precision: tp as f64 / seen as f64 });
    }
    Ok(points)
}

/// Average precision: recall increments weighted by precision at each block.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let curve = pr_curve(scores, labels)?;
    Ok(curve.windows(2).map(|w| (w[1].recall - w[0].recall) * w[1].precision).sum())
}
