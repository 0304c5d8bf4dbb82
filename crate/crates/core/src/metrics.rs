//! AUC, per-group AUC disparities and hypergradient alignment rates.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AucResult {
    pub value: f64,
    /// Only one class present; `value` is then fixed at 0.5.
    pub degenerate: bool,
}

/// Mann–Whitney AUC: the probability that a random positive outranks a random
/// negative, ties counted one half. Computed from mid-ranks in `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<AucResult> {
    crate::linalg::check_len("labels", labels.len(), scores.len())?;
    if scores.is_empty() {
        return Err(Error::input("AUC of an empty set"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(AucResult {
            value: 0.5,
            degenerate: true,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; ties share the mean rank of their block
        let mid = (i + j) as f64 / 2.0 + 1.0;
        pos_rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    let u = pos_rank_sum - p * (p + 1.0) / 2.0;
    Ok(AucResult {
        value: u / (p * n),
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub overall_auc: f64,
    pub group_auc: Vec<f64>,
    /// `max_i AUC_i − min_i AUC_i`
    pub max_gaucd: f64,
    /// `min_i AUC_i`
    pub worst_gauc: f64,
    pub degenerate_groups: Vec<bool>,
}

/// Overall AUC on the pooled set plus the per-group AUC spread.
/// `groups[i]` must be in `0..num_groups` and every group must be present.
pub fn group_auc_metrics(
    scores: &[f64],
    labels: &[bool],
    groups: &[usize],
    num_groups: usize,
) -> Result<GroupMetrics> {
    crate::linalg::check_len("groups", groups.len(), scores.len())?;
    let overall = auc(scores, labels)?;
    let mut group_auc = Vec::with_capacity(num_groups);
    let mut degenerate_groups = Vec::with_capacity(num_groups);
    for k in 0..num_groups {
        let idx: Vec<usize> = (0..groups.len()).filter(|&i| groups[i] == k).collect();
        if idx.is_empty() {
            return Err(Error::input(format!("group {k} has no examples")));
        }
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
        let r = auc(&s, &l)?;
        group_auc.push(r.value);
        degenerate_groups.push(r.degenerate);
    }
    if let Some(&g) = groups.iter().find(|&&g| g >= num_groups) {
        return Err(Error::input(format!("group id {g} out of range")));
    }
    let worst = group_auc.iter().cloned().fold(f64::INFINITY, f64::min);
    let best = group_auc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(GroupMetrics {
        overall_auc: overall.value,
        max_gaucd: best - worst,
        worst_gauc: worst,
        group_auc,
        degenerate_groups,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentStats {
    pub epoch: usize,
    pub steps: usize,
    /// Smallest `min_i g_iᵀε` seen in the epoch.
    pub min_utility: Option<f64>,
    /// 1 when `min_utility > 0`.
    pub aligned: Option<bool>,
    /// Fraction of steps whose `min_i g_iᵀε` is positive; `None` for an empty epoch.
    pub rate: Option<f64>,
}

/// Per-epoch alignment from the per-step minimum utilities.
///
/// `epoch_boundaries` holds the start index of every epoch followed by the
/// end index of the last one, so epoch `e` covers
/// `boundaries[e]..boundaries[e + 1]`.
pub fn alignment_rate(min_utilities: &[f64], epoch_boundaries: &[usize]) -> Vec<AlignmentStats> {
    epoch_boundaries
        .windows(2)
        .enumerate()
        .map(|(epoch, w)| {
            let (lo, hi) = (w[0].min(min_utilities.len()), w[1].min(min_utilities.len()));
            let slice = if lo < hi {
                &min_utilities[lo..hi]
            } else {
                &[][..]
            };
            if slice.is_empty() {
                return AlignmentStats {
                    epoch,
                    steps: 0,
                    min_utility: None,
                    aligned: None,
                    rate: None,
                };
            }
            let min = slice.iter().cloned().fold(f64::INFINITY, f64::min);
            let positive = slice.iter().filter(|&&u| u > 0.0).count();
            AlignmentStats {
                epoch,
                steps: slice.len(),
                min_utility: Some(min),
                aligned: Some(min > 0.0),
                rate: Some(positive as f64 / slice.len() as f64),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auc_examples() {
        let r = auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(r.value, 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[true, false]).unwrap().value, 0.5);
        let r = auc(&[0.1, 0.7], &[true, true]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.value, 0.5);
        assert!(auc(&[], &[]).is_err());
    }

    /// O(n²) pair count, independent of the rank formula.
    fn auc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    proptest! {
        #[test]
        fn rank_auc_matches_pair_count(
            data in proptest::collection::vec((0u8..6, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 5.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            let r = auc(&scores, &labels).unwrap();
            if !r.degenerate {
                prop_assert!((r.value - auc_pairs(&scores, &labels)).abs() < 1e-12);
            }
        }

        #[test]
        fn auc_invariant_under_monotone_transform(
            data in proptest::collection::vec((-5.0f64..5.0, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            let warped: Vec<f64> = scores.iter().map(|s| (0.7 * s).exp() * 3.0 + 1.0).collect();
            let a = auc(&scores, &labels).unwrap();
            let b = auc(&warped, &labels).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn group_metric_arithmetic() {
        let scores = [0.9, 0.1, 0.8, 0.2, 0.3, 0.6, 0.4, 0.5];
        let labels = [true, false, true, false, true, false, true, false];
        let groups = [0, 0, 0, 0, 1, 1, 1, 1];
        let m = group_auc_metrics(&scores, &labels, &groups, 2).unwrap();
        assert_eq!(m.group_auc[0], 1.0);
        assert_eq!(m.group_auc[1], 0.0);
        assert_eq!(m.max_gaucd, 1.0);
        assert_eq!(m.worst_gauc, 0.0);
        for &g in &m.group_auc {
            assert!(m.worst_gauc <= g);
        }
    }

    #[test]
    fn group_metrics_definitions() {
        let make = |wins: usize| -> (Vec<f64>, Vec<bool>) {
            // one positive against five negatives: AUC = wins / 5
            let mut s = vec![0.5];
            let mut l = vec![true];
            for i in 0..5 {
                s.push(if i < wins { 0.1 } else { 0.9 });
                l.push(false);
            }
            (s, l)
        };
        let (s0, l0) = make(4);
        let (s1, l1) = make(3);
        let scores: Vec<f64> = s0.iter().chain(&s1).cloned().collect();
        let labels: Vec<bool> = l0.iter().chain(&l1).cloned().collect();
        let groups: Vec<usize> = [vec![0; 6], vec![1; 6]].concat();
        let m = group_auc_metrics(&scores, &labels, &groups, 2).unwrap();
        assert!((m.group_auc[0] - 0.8).abs() < 1e-15);
        assert!((m.group_auc[1] - 0.6).abs() < 1e-15);
        assert!((m.max_gaucd - 0.2).abs() < 1e-12);
        assert_eq!(m.worst_gauc, m.group_auc[1]);
    }

    #[test]
    fn single_group_and_symmetric_groups() {
        let scores = [0.2, 0.7, 0.4, 0.9];
        let labels = [false, true, true, false];
        let m = group_auc_metrics(&scores, &labels, &[0, 0, 0, 0], 1).unwrap();
        assert_eq!(m.max_gaucd, 0.0);

        let scores = [0.2, 0.7, 0.4, 0.2, 0.7, 0.4];
        let labels = [false, true, true, false, true, true];
        let m = group_auc_metrics(&scores, &labels, &[0, 0, 0, 1, 1, 1], 2).unwrap();
        assert_eq!(m.max_gaucd, 0.0);
    }

    #[test]
    fn empty_group_is_error() {
        assert!(group_auc_metrics(&[0.1, 0.2], &[true, false], &[0, 0], 2).is_err());
    }

    #[test]
    fn alignment_examples() {
        let s = alignment_rate(&[0.1, 0.2, -0.3, 0.5], &[0, 2, 2, 4]);
        assert_eq!(s.len(), 3);
        assert_eq!(s[0].rate, Some(1.0));
        assert_eq!(s[0].aligned, Some(true));
        assert_eq!(s[1].rate, None);
        assert_eq!(s[2].rate, Some(0.5));
        assert_eq!(s[2].aligned, Some(false));
    }
}
