use rand::seq::SliceRandom;
use rand::Rng;

use crate::boxgeom::{encode_deltas, iou, BBox};
use crate::data::GroundTruth;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

/// Per-anchor labels, with the encoded deltas toward the best-overlapping
/// ground truth for every positive anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorAssignment {
    pub labels: Vec<AnchorLabel>,
    pub deltas: Vec<Option<[f32; 4]>>,
    /// Index of the best-IoU ground truth (lowest index on ties), for positives.
    pub matched: Vec<Option<usize>>,
}

impl AnchorAssignment {
    pub fn count(&self, label: AnchorLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Labels anchors against ground-truth boxes. An anchor is positive when its
/// IoU with some box reaches `pos_iou` or when it attains (with ties) the
/// highest IoU any anchor has with some box; otherwise negative when its best
/// IoU is below `neg_iou`, and ignored in between.
pub fn label_anchors(anchors: &[BBox], gts: &[BBox], pos_iou: f32, neg_iou: f32) -> Result<AnchorAssignment> {
    if gts.is_empty() {
        return Err(Error::Contract("label_anchors needs at least one ground-truth box".into()));
    }
    if neg_iou > pos_iou {
        return Err(Error::param("negative_iou", format!("{neg_iou} exceeds positive_iou {pos_iou}")));
    }
    let table: Vec<Vec<f32>> = anchors.iter().map(|a| gts.iter().map(|g| iou(a, g)).collect()).collect();
    let gt_best: Vec<f32> =
        (0..gts.len()).map(|j| table.iter().map(|row| row[j]).fold(0.0f32, f32::max)).collect();

    let mut out = AnchorAssignment {
        labels: Vec::with_capacity(anchors.len()),
        deltas: Vec::with_capacity(anchors.len()),
        matched: Vec::with_capacity(anchors.len()),
    };
    for (a, row) in anchors.iter().zip(&table) {
        let (best_j, best) = row
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
        let owns_a_gt = row.iter().zip(&gt_best).any(|(&v, &m)| m > 0.0 && v == m);
        let label = if best >= pos_iou || owns_a_gt {
            AnchorLabel::Positive
        } else if best < neg_iou {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
        let positive = label == AnchorLabel::Positive;
        out.labels.push(label);
        out.deltas.push(positive.then(|| encode_deltas(a, &gts[best_j])));
        out.matched.push(positive.then_some(best_j));
    }
    Ok(out)
}

/// RPN training targets for one image: class 1 (object) or 0 (background)
/// for sampled anchors, and a regression target for sampled positives.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorTargets {
    pub classes: Vec<Option<usize>>,
    pub deltas: Vec<Option<[f32; 4]>>,
}

impl AnchorTargets {
    /// Every labelled anchor, no sampling.
    pub fn all(assign: &AnchorAssignment) -> Self {
        let classes = assign
            .labels
            .iter()
            .map(|l| match l {
                AnchorLabel::Positive => Some(1),
                AnchorLabel::Negative => Some(0),
                AnchorLabel::Ignore => None,
            })
            .collect();
        AnchorTargets { classes, deltas: assign.deltas.clone() }
    }

    pub fn positives(&self) -> usize {
        self.deltas.iter().flatten().count()
    }
}

fn pick<R: Rng + ?Sized>(mut idx: Vec<usize>, n: usize, rng: &mut R) -> Vec<usize> {
    if idx.len() > n {
        idx.shuffle(rng);
        idx.truncate(n);
    }
    idx
}

/// Draws at most `batch` anchors: up to `positive_fraction * batch`
/// positives, the rest negatives. Unsampled anchors carry no target.
pub fn sample_anchors<R: Rng + ?Sized>(
    assign: &AnchorAssignment,
    batch: usize,
    positive_fraction: f64,
    rng: &mut R,
) -> AnchorTargets {
    let of = |label| assign.labels.iter().enumerate().filter(move |(_, &l)| l == label).map(|(i, _)| i);
    let pos = pick(of(AnchorLabel::Positive).collect(), (batch as f64 * positive_fraction) as usize, rng);
    let neg = pick(of(AnchorLabel::Negative).collect(), batch - pos.len(), rng);
    let n = assign.labels.len();
    let mut t = AnchorTargets { classes: vec![None; n], deltas: vec![None; n] };
    for i in pos {
        t.classes[i] = Some(1);
        t.deltas[i] = assign.deltas[i];
    }
    for i in neg {
        t.classes[i] = Some(0);
    }
    t
}

/// Sampled regions for the detector: each ROI's class (background is
/// `num_classes`) and, for foreground ROIs, the deltas toward its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiTargets {
    pub rois: Vec<BBox>,
    pub classes: Vec<usize>,
    pub deltas: Vec<Option<[f32; 4]>>,
}

impl RoiTargets {
    pub fn foreground(&self) -> usize {
        self.deltas.iter().flatten().count()
    }
}

/// Pools the proposals with the ground-truth boxes, labels each candidate by
/// its best-overlapping box (foreground at IoU >= `fg_iou`, background
/// otherwise) and samples at most `batch` of them, with at most
/// `fg_fraction * batch` foreground.
pub fn assign_rois<R: Rng + ?Sized>(
    proposals: &[BBox],
    gts: &[GroundTruth],
    num_classes: usize,
    fg_iou: f32,
    batch: usize,
    fg_fraction: f64,
    rng: &mut R,
) -> Result<RoiTargets> {
    if gts.is_empty() {
        return Err(Error::Contract("assign_rois needs at least one ground-truth box".into()));
    }
    let candidates: Vec<BBox> = proposals.iter().copied().chain(gts.iter().map(|g| g.bbox)).collect();
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    let mut best = Vec::with_capacity(candidates.len());
    for (i, c) in candidates.iter().enumerate() {
        let (j, v) = gts
            .iter()
            .enumerate()
            .map(|(j, g)| (j, iou(c, &g.bbox)))
            .fold((0, f32::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        best.push(j);
        if v >= fg_iou { fg.push(i) } else { bg.push(i) }
    }
    let fg = pick(fg, (batch as f64 * fg_fraction) as usize, rng);
    let bg = pick(bg, batch - fg.len(), rng);
    let mut t = RoiTargets { rois: vec![], classes: vec![], deltas: vec![] };
    for i in fg {
        let gt = &gts[best[i]];
        t.rois.push(candidates[i]);
        t.classes.push(gt.class_id);
        t.deltas.push(Some(encode_deltas(&candidates[i], &gt.bbox)));
    }
    for i in bg {
        t.rois.push(candidates[i]);
        t.classes.push(num_classes);
        t.deltas.push(None);
    }
    Ok(t)
}
