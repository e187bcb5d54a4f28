use serde::{Deserialize, Serialize};

use crate::boxgeom::{iou, score_order, Detection};
use crate::data::GroundTruth;

/// True positives, false positives and false negatives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Outcome of matching one image's detections to its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Indexed by class id.
    pub per_class: Vec<Counts>,
    /// `(detection index, ground-truth index)` of every true positive.
    pub pairs: Vec<(usize, usize)>,
    /// Per detection (input order): whether it is a true positive.
    pub is_tp: Vec<bool>,
}

/// Greedy matching in descending score order: each detection takes the
/// unmatched same-class ground truth it overlaps most, if that IoU reaches
/// `iou_threshold` (true positive); otherwise it is a false positive.
/// Ground truth left unmatched are false negatives. Detections or boxes
/// with a class id `>= num_classes` are ignored.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], num_classes: usize, iou_threshold: f32) -> MatchResult {
    let mut out = MatchResult { per_class: vec![Counts::default(); num_classes], pairs: vec![], is_tp: vec![false; dets.len()] };
    let mut taken = vec![false; gts.len()];
    for d in score_order(dets) {
        let det = &dets[d];
        if det.class_id >= num_classes {
            continue;
        }
        let best = gts
            .iter()
            .enumerate()
            .filter(|(j, g)| !taken[*j] && g.class_id == det.class_id)
            .map(|(j, g)| (j, iou(&det.bbox, &g.bbox)))
            .filter(|&(_, v)| v >= iou_threshold)
            .fold(None, |acc: Option<(usize, f32)>, x| match acc {
                Some(a) if a.1 >= x.1 => Some(a),
                _ => Some(x),
            });
        match best {
            Some((j, _)) => {
                taken[j] = true;
                out.is_tp[d] = true;
                out.pairs.push((d, j));
                out.per_class[det.class_id].tp += 1;
            }
            None => out.per_class[det.class_id].fp += 1,
        }
    }
    for (j, g) in gts.iter().enumerate() {
        if !taken[j] && g.class_id < num_classes {
            out.per_class[g.class_id].fn_ += 1;
        }
    }
    out
}
