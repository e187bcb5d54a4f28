use serde::{Deserialize, Serialize};

use super::matching::Counts;
use crate::error::{Error, Result};

// 0/0 is read as "no instances, no mistakes" and scores 1.

pub fn precision(tp: u64, fp: u64) -> f64 {
    if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 }
}

pub fn recall(tp: u64, fn_: u64) -> f64 {
    if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 }
}

/// F-beta with beta 2 in count form: `TP / (TP + 0.2 FP + 0.8 FN)`.
pub fn f2(tp: u64, fp: u64, fn_: u64) -> f64 {
    let d = tp as f64 + 0.2 * fp as f64 + 0.8 * fn_ as f64;
    if d == 0.0 { 1.0 } else { tp as f64 / d }
}

/// One line of the metric report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub class: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f2: f64,
}

impl MetricRow {
    pub fn from_counts(class: impl Into<String>, c: Counts) -> Self {
        MetricRow {
            class: class.into(),
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            precision: precision(c.tp, c.fp),
            recall: recall(c.tp, c.fn_),
            f2: f2(c.tp, c.fp, c.fn_),
        }
    }

    pub fn counts(&self) -> Counts {
        Counts { tp: self.tp, fp: self.fp, fn_: self.fn_ }
    }
}

/// Precision/recall points of a ranked list of detections, one per detection.
pub fn pr_curve(ranked_tp: &[bool], n_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0u64;
    ranked_tp
        .iter()
        .enumerate()
        .map(|(i, &hit)| {
            tp += hit as u64;
            let r = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
            (r, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

/// All-point interpolated average precision of detections ranked by
/// descending score: the area under the precision envelope
/// `p(r) = max precision at recall >= r`. `None` when there is no ground truth.
pub fn average_precision(ranked_tp: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let curve = pr_curve(ranked_tp, n_gt);
    let mut envelope: Vec<(f64, f64)> = curve;
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i].1 = envelope[i].1.max(envelope[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in envelope {
        ap += (r - prev_r) * p;
        prev_r = r;
    }
    Some(ap)
}

/// Unweighted mean over the classes that have ground truth.
pub fn mean_average_precision(aps: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Undefined("mAP needs at least one class with ground truth".into()));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Orders `(score, is_tp)` pairs by descending score (stable) and returns the flags.
pub fn rank_by_score(scored: &[(f32, bool)]) -> Vec<bool> {
    let mut v = scored.to_vec();
    v.sort_by(|a, b| b.0.total_cmp(&a.0));
    v.into_iter().map(|(_, t)| t).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_counts_score_one_and_empty_counts_follow_convention() {
        assert_eq!((precision(7, 0), recall(7, 0), f2(7, 0, 0)), (1.0, 1.0, 1.0));
        assert_eq!((precision(0, 0), recall(0, 0), f2(0, 0, 0)), (1.0, 1.0, 1.0));
        assert_eq!((precision(0, 3), recall(0, 3), f2(0, 3, 3)), (0.0, 0.0, 0.0));
    }

    #[test]
    fn count_form_values() {
        let row = MetricRow::from_counts("Overall", Counts { tp: 915, fp: 35, fn_: 18 });
        assert_eq!(row.precision, 915.0 / 950.0);
        assert_eq!(row.recall, 915.0 / 933.0);
        assert_eq!(row.f2, 915.0 / 936.4);
        let mites = MetricRow::from_counts("Spider Mites", Counts { tp: 98, fp: 6, fn_: 4 });
        assert!((mites.precision - 0.9422).abs() <= 2e-4);
        assert!((mites.recall - 0.9607).abs() <= 2e-4);
    }

    #[test]
    fn perfect_ranking_has_unit_ap_and_map_averages() {
        assert_eq!(average_precision(&[true, true, true, false, false], 3), Some(1.0));
        assert_eq!(average_precision(&[], 0), None);
        assert_eq!(average_precision(&[false], 2), Some(0.0));
        assert_eq!(mean_average_precision(&[Some(1.0), Some(0.5), None]).unwrap(), 0.75);
        assert!(mean_average_precision(&[None, None]).is_err());
    }

    /// Integrates the precision envelope over recall on a fine grid.
    fn numeric_ap(ranked: &[bool], n_gt: usize) -> f64 {
        let pts: Vec<(f64, f64)> = {
            let mut tp = 0;
            ranked
                .iter()
                .enumerate()
                .map(|(i, &h)| {
                    tp += h as usize;
                    (tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64)
                })
                .collect()
        };
        let steps = 200_000;
        (0..steps)
            .map(|k| {
                let r = (k as f64 + 0.5) / steps as f64;
                pts.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max)
            })
            .sum::<f64>()
            / steps as f64
    }

    #[test]
    fn ap_equals_pr_integration_oracle() {
        let ap = average_precision(&[true, false, true], 2).unwrap();
        assert!((ap - numeric_ap(&[true, false, true], 2)).abs() < 1e-4);
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn ap_matches_oracle_on_random_rankings(flags in proptest::collection::vec(any::<bool>(), 1..12), extra in 0usize..3) {
            let n_gt = flags.iter().filter(|&&f| f).count() + extra;
            prop_assume!(n_gt > 0);
            let ap = average_precision(&flags, n_gt).unwrap();
            prop_assert!((ap - numeric_ap(&flags, n_gt)).abs() < 1e-4);
            prop_assert!((0.0..=1.0).contains(&ap));
        }

        #[test]
        fn ap_ignores_uniform_score_rescaling(
            scored in proptest::collection::vec((0.001f32..1.0, any::<bool>()), 1..20),
            factor in 0.01f32..0.99,
        ) {
            let n_gt = scored.len();
            let scaled: Vec<(f32, bool)> = scored.iter().map(|&(s, t)| (s * factor, t)).collect();
            prop_assume!({
                // rescaling must not create or break ties
                let order = |v: &[(f32, bool)]| { let mut i: Vec<usize> = (0..v.len()).collect(); i.sort_by(|&a, &b| v[b].0.total_cmp(&v[a].0)); i };
                order(&scored) == order(&scaled)
            });
            prop_assert_eq!(
                average_precision(&rank_by_score(&scored), n_gt),
                average_precision(&rank_by_score(&scaled), n_gt)
            );
        }

        #[test]
        fn metric_identities(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500) {
            let (p, r, f) = (precision(tp, fp), recall(tp, fn_), f2(tp, fp, fn_));
            for v in [p, r, f] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if tp > 0 {
                prop_assert!(f >= p.min(r) - 1e-12 && f <= p.max(r) + 1e-12);
                prop_assert!((f - 5.0 * p * r / (4.0 * p + r)).abs() < 1e-9);
            }
        }
    }
}
