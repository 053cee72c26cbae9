//! Ranking and threshold metrics for schema linking.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("no scores")]
    Empty,
    #[error("metric needs both positive and negative labels")]
    DegenerateLabels,
}

type Result<T> = core::result::Result<T, MetricError>;

fn check(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    /// Counts with "predicted" meaning `score > threshold`.
    pub fn at(scores: &[f64], labels: &[u8], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s > threshold, l != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    /// 1 when nothing is predicted.
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    /// 1 when there are no positives.
    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }
}

pub fn precision_recall(scores: &[f64], labels: &[u8], threshold: f64) -> Result<(f64, f64)> {
    check(scores, labels)?;
    let c = Confusion::at(scores, labels, threshold);
    Ok((c.precision(), c.recall()))
}

/// Mann–Whitney AUC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half. Computed from midranks.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives, kept integral
    let mut rank2_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the midrank (i + j + 2) / 2
        let mid2 = (i + j + 2) as u64;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k] != 0).count() as u64;
        rank2_sum += mid2 * tied_pos;
        i = j + 1;
    }
    let (p, n) = (pos as u64, neg as u64);
    // 2·U = 2·R − P(P+1)
    let u2 = rank2_sum - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Average precision: over the descending ranking (ties by index), the mean
/// of precision at each positive's cut.
pub fn pr_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l != 0).count();
    if pos == 0 {
        return Err(MetricError::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &k) in order.iter().enumerate() {
        if labels[k] != 0 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / pos as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Pool all columns of all examples.
    #[default]
    Micro,
    /// Mean of per-example values (AUCs over examples where defined).
    Macro,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkMetrics {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub roc_auc: f64,
    pub pr_auc: f64,
}

/// Link metrics over per-example `(scores, labels)` lists.
pub fn link_metrics(examples: &[(Vec<f64>, Vec<u8>)], threshold: f64, averaging: Averaging) -> Result<LinkMetrics> {
    if examples.is_empty() {
        return Err(MetricError::Empty);
    }
    match averaging {
        Averaging::Micro => {
            let scores: Vec<f64> = examples.iter().flat_map(|e| e.0.iter().copied()).collect();
            let labels: Vec<u8> = examples.iter().flat_map(|e| e.1.iter().copied()).collect();
            let (precision, recall) = precision_recall(&scores, &labels, threshold)?;
            Ok(LinkMetrics { threshold, precision, recall, roc_auc: roc_auc(&scores, &labels)?, pr_auc: pr_auc(&scores, &labels)? })
        }
        Averaging::Macro => {
            let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
            let (mut p, mut r, mut roc, mut ap) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for (s, l) in examples {
                let (pi, ri) = precision_recall(s, l, threshold)?;
                p.push(pi);
                r.push(ri);
                if let Ok(v) = roc_auc(s, l) {
                    roc.push(v);
                }
                if let Ok(v) = pr_auc(s, l) {
                    ap.push(v);
                }
            }
            Ok(LinkMetrics { threshold, precision: mean(&p), recall: mean(&r), roc_auc: mean(&roc), pr_auc: mean(&ap) })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_values() {
        let s = [0.9, 0.8, 0.1];
        let l = [1, 0, 1];
        assert_eq!(precision_recall(&s, &l, 0.5).unwrap(), (0.5, 0.5));
        assert_eq!(roc_auc(&s, &l).unwrap(), 0.5);
        assert!((pr_auc(&s, &l).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(roc_auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 4], &[1, 0, 1, 0]).unwrap(), 0.5);
        assert!((pr_auc(&[0.9, 0.8, 0.1], &[0, 0, 1]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(pr_auc(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 1.0);
    }

    #[test]
    fn edge_cases() {
        assert_eq!(precision_recall(&[0.9, 0.1], &[1, 0], 0.5).unwrap(), (1.0, 1.0));
        assert_eq!(precision_recall(&[0.06, 0.07], &[1, 1], 0.05).unwrap().1, 1.0);
        assert_eq!(precision_recall(&[0.9], &[1], 1.0).unwrap().1, 0.0);
        assert_eq!(roc_auc(&[0.1], &[1]), Err(MetricError::DegenerateLabels));
        assert_eq!(pr_auc(&[0.1], &[0]), Err(MetricError::DegenerateLabels));
        assert!(matches!(precision_recall(&[0.1], &[], 0.5), Err(MetricError::LengthMismatch { .. })));
    }

    #[test]
    fn averaging_modes() {
        let ex = alloc::vec![(alloc::vec![0.9, 0.1], alloc::vec![1, 0]), (alloc::vec![0.6, 0.7, 0.2], alloc::vec![0, 1, 1])];
        let micro = link_metrics(&ex, 0.5, Averaging::Micro).unwrap();
        assert_eq!((micro.precision, micro.recall), (2.0 / 3.0, 2.0 / 3.0));
        let mac = link_metrics(&ex, 0.5, Averaging::Macro).unwrap();
        assert_eq!(mac.precision, 0.75);
        assert_eq!(mac.recall, 0.75);
    }
}
