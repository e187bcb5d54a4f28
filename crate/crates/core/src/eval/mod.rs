//! Matching, precision/recall/F2, AP/mAP, confusion matrices and per-class
//! score-threshold selection.

mod confusion;
mod matching;
mod metrics;
mod report;
mod thresholds;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxgeom::Detection;
use crate::data::{ClassMap, GroundTruth};
use crate::error::{Error, Result};

pub use confusion::ConfusionMatrix;
pub use matching::{match_detections, Counts, MatchResult};
pub use metrics::{average_precision, f2, mean_average_precision, pr_curve, precision, rank_by_score, recall, MetricRow};
pub use report::{
    read_counts, read_detections, read_thresholds, write_confusion, write_detections, write_metrics, write_pr_curves,
    write_thresholds,
};
pub use thresholds::{
    choose_threshold, classification_accuracy, optimize_thresholds, threshold_grid, ThresholdRow, ThresholdTable,
};

/// Detections and ground truth of one image, in the same pixel frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub filename: String,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruth>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationReport {
    /// One row per class, in class-id order.
    pub rows: Vec<MetricRow>,
    pub overall: MetricRow,
    /// Per-class AP over all detections; `None` for classes without ground truth.
    pub ap: Vec<Option<f64>>,
    pub map: Option<f64>,
    pub confusion: ConfusionMatrix,
    /// Per-class `(recall, precision)` points in rank order.
    pub pr_curves: Vec<Vec<(f64, f64)>>,
}

/// Evaluates detections against ground truth. Counts, metric rows and the
/// confusion matrix use only detections scoring at least their class's
/// entry in `score_thresholds`; AP and the PR curves rank every detection.
pub fn evaluate(
    images: &[ImageDetections],
    classes: &ClassMap,
    iou_threshold: f32,
    score_thresholds: &[f64],
) -> Result<EvaluationReport> {
    let n = classes.len();
    if images.is_empty() {
        return Err(Error::Contract("evaluation needs at least one image".into()));
    }
    if score_thresholds.len() != n {
        return Err(Error::Validation(format!("{} score thresholds for {n} classes", score_thresholds.len())));
    }
    let per_image: Vec<(MatchResult, MatchResult, ConfusionMatrix)> = images
        .par_iter()
        .map(|img| {
            let kept: Vec<Detection> = img
                .detections
                .iter()
                .filter(|d| d.class_id < n && d.score as f64 >= score_thresholds[d.class_id])
                .copied()
                .collect();
            let mut cm = ConfusionMatrix::new(n);
            cm.add_image(&kept, &img.ground_truth, iou_threshold)?;
            Ok((
                match_detections(&kept, &img.ground_truth, n, iou_threshold),
                match_detections(&img.detections, &img.ground_truth, n, iou_threshold),
                cm,
            ))
        })
        .collect::<Result<_>>()?;

    let mut counts = vec![Counts::default(); n];
    let mut confusion = ConfusionMatrix::new(n);
    let mut scored: Vec<Vec<(f32, bool)>> = vec![vec![]; n];
    let mut n_gt = vec![0usize; n];
    for (img, (thresholded, all, cm)) in images.iter().zip(&per_image) {
        for (c, k) in counts.iter_mut().zip(&thresholded.per_class) {
            *c += *k;
        }
        confusion.merge(cm);
        for (d, &tp) in img.detections.iter().zip(&all.is_tp) {
            if d.class_id < n {
                scored[d.class_id].push((d.score, tp));
            }
        }
        for g in img.ground_truth.iter().filter(|g| g.class_id < n) {
            n_gt[g.class_id] += 1;
        }
    }
    let rows: Vec<MetricRow> =
        counts.iter().enumerate().map(|(c, k)| MetricRow::from_counts(classes.names()[c].clone(), *k)).collect();
    let mut total = Counts::default();
    for k in &counts {
        total += *k;
    }
    let ranked: Vec<Vec<bool>> = scored.iter().map(|s| rank_by_score(s)).collect();
    let ap: Vec<Option<f64>> = ranked.iter().zip(&n_gt).map(|(r, &g)| average_precision(r, g)).collect();
    Ok(EvaluationReport {
        rows,
        overall: MetricRow::from_counts("Overall", total),
        map: mean_average_precision(&ap).ok(),
        ap,
        confusion,
        pr_curves: ranked.iter().zip(&n_gt).map(|(r, &g)| pr_curve(r, g)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxgeom::BBox;

    #[test]
    fn report_conserves_ground_truth_and_applies_thresholds() {
        let classes = ClassMap::new(vec!["a".into(), "b".into()]).unwrap();
        let b = |x: f32| BBox::from_xywh(x, 0.0, 10.0, 10.0).unwrap();
        let images = vec![
            ImageDetections {
                filename: "1".into(),
                detections: vec![Detection::new(b(0.0), 0, 0.9).unwrap(), Detection::new(b(40.0), 1, 0.3).unwrap()],
                ground_truth: vec![GroundTruth { class_id: 0, bbox: b(0.0) }, GroundTruth { class_id: 1, bbox: b(40.0) }],
            },
            ImageDetections {
                filename: "2".into(),
                detections: vec![Detection::new(b(80.0), 0, 0.6).unwrap()],
                ground_truth: vec![GroundTruth { class_id: 1, bbox: b(0.0) }],
            },
        ];
        let r = evaluate(&images, &classes, 0.5, &[0.5, 0.5]).unwrap();
        assert_eq!(r.rows[0].counts(), Counts { tp: 1, fp: 1, fn_: 0 });
        assert_eq!(r.rows[1].counts(), Counts { tp: 0, fp: 0, fn_: 2 });
        assert_eq!(r.overall.tp + r.overall.fn_, 3);
        assert_eq!(r.ap[1], Some(0.5));
        assert_eq!(r.ap[0], Some(1.0));
        assert_eq!(r.map, Some(0.75));
        assert_eq!(r.confusion.row(1).iter().sum::<u64>(), 2);

        let loose = evaluate(&images, &classes, 0.5, &[0.1, 0.1]).unwrap();
        assert_eq!(loose.rows[1].counts(), Counts { tp: 1, fp: 0, fn_: 1 });
        assert!(evaluate(&[], &classes, 0.5, &[0.5, 0.5]).is_err());
        assert!(evaluate(&images, &classes, 0.5, &[0.5]).is_err());
    }
}
