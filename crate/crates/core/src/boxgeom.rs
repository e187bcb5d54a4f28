//! Box geometry: IoU, anchor tiling, delta encoding and non-maximum suppression.
//!
//! Boxes use continuous pixel coordinates with upper-left `(x1, y1)` and
//! lower-right `(x2, y2)` corners; area is `(x2 - x1) * (y2 - y1)` with no
//! "+1" pixel convention.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle with strictly positive width and height.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x2 <= x1 || y2 <= y1 {
            return Err(Error::Validation(format!("degenerate box ({x1}, {y1}, {x2}, {y2})")));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    /// From an `(x, y, w, h)` window with `(x, y)` the upper-left corner.
    pub fn from_xywh(x: f32, y: f32, w: f32, h: f32) -> Result<Self> {
        BBox::new(x, y, x + w, y + h)
    }

    pub fn from_center(cx: f32, cy: f32, w: f32, h: f32) -> Result<Self> {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn to_xywh(&self) -> (f32, f32, f32, f32) {
        (self.x1, self.y1, self.width(), self.height())
    }

    pub fn as_array(&self) -> [f32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Multiplies x coordinates by `sx` and y coordinates by `sy`.
    pub fn scaled(&self, sx: f32, sy: f32) -> Result<Self> {
        BBox::new(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }
}

/// Intersection over union in `[0, 1]`; zero for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let iw = (a.x2.min(b.x2) as f64 - a.x1.max(b.x1) as f64).max(0.0);
    let ih = (a.y2.min(b.y2) as f64 - a.y1.max(b.y1) as f64).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() as f64 + b.area() as f64 - inter;
    (inter / union).clamp(0.0, 1.0) as f32
}

/// A reference box tiled at one feature-map cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub bbox: BBox,
    pub scale_index: usize,
    pub ratio_index: usize,
    pub feature_x: usize,
    pub feature_y: usize,
}

/// Tiles `scales.len() * ratios.len()` anchors on every cell of a
/// `feat_w x feat_h` map. Each anchor is centred on its cell centre
/// `((fx + 0.5) * stride, (fy + 0.5) * stride)`, has area `scale^2` and
/// `width / height == ratio`. Order: cells row-major, then scale, then ratio.
pub fn generate_anchors(
    feat_w: usize,
    feat_h: usize,
    stride: f32,
    scales: &[f32],
    ratios: &[f32],
) -> Result<Vec<Anchor>> {
    if scales.is_empty() || ratios.is_empty() {
        return Err(Error::param("anchor scales/ratios", "must not be empty"));
    }
    if let Some(bad) = scales.iter().chain(ratios).find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::param("anchor scales/ratios", format!("{bad} is not positive")));
    }
    if feat_w == 0 || feat_h == 0 || !(stride > 0.0) {
        return Err(Error::param("feature map", "extents and stride must be positive"));
    }
    let shapes: Vec<(usize, usize, f32, f32)> = scales
        .iter()
        .enumerate()
        .flat_map(|(si, &s)| {
            ratios.iter().enumerate().map(move |(ri, &r)| {
                let w = s as f64 * (r as f64).sqrt();
                let h = s as f64 / (r as f64).sqrt();
                (si, ri, w as f32, h as f32)
            })
        })
        .collect();
    let mut anchors = Vec::with_capacity(feat_w * feat_h * shapes.len());
    for fy in 0..feat_h {
        for fx in 0..feat_w {
            let cx = (fx as f32 + 0.5) * stride;
            let cy = (fy as f32 + 0.5) * stride;
            for &(scale_index, ratio_index, w, h) in &shapes {
                anchors.push(Anchor {
                    bbox: BBox::from_center(cx, cy, w, h)?,
                    scale_index,
                    ratio_index,
                    feature_x: fx,
                    feature_y: fy,
                });
            }
        }
    }
    Ok(anchors)
}

/// Centre/log-size deltas mapping `anchor` onto `target`:
/// `tx = (cx_t - cx_a) / w_a`, `ty` likewise, `tw = ln(w_t / w_a)`, `th` likewise.
pub fn encode_deltas(anchor: &BBox, target: &BBox) -> [f32; 4] {
    let (acx, acy) = center_f64(anchor);
    let (tcx, tcy) = center_f64(target);
    let (aw, ah) = (anchor.width() as f64, anchor.height() as f64);
    let (tw, th) = (target.width() as f64, target.height() as f64);
    [
        ((tcx - acx) / aw) as f32,
        ((tcy - acy) / ah) as f32,
        (tw / aw).ln() as f32,
        (th / ah).ln() as f32,
    ]
}

/// Inverse of [`encode_deltas`]. Fails when the result is degenerate or not finite.
pub fn decode_deltas(anchor: &BBox, deltas: [f32; 4]) -> Result<BBox> {
    let (acx, acy) = center_f64(anchor);
    let (aw, ah) = (anchor.width() as f64, anchor.height() as f64);
    let [dx, dy, dw, dh] = deltas.map(f64::from);
    let cx = acx + dx * aw;
    let cy = acy + dy * ah;
    let w = aw * dw.exp();
    let h = ah * dh.exp();
    BBox::new(
        (cx - w / 2.0) as f32,
        (cy - h / 2.0) as f32,
        (cx + w / 2.0) as f32,
        (cy + h / 2.0) as f32,
    )
}

fn center_f64(b: &BBox) -> (f64, f64) {
    ((b.x1 as f64 + b.x2 as f64) / 2.0, (b.y1 as f64 + b.y2 as f64) / 2.0)
}

/// Clamps to `[0, width] x [0, height]`; `None` when nothing of positive area is left.
pub fn clip_box(b: &BBox, width: f32, height: f32) -> Option<BBox> {
    BBox::new(
        b.x1.clamp(0.0, width),
        b.y1.clamp(0.0, height),
        b.x2.clamp(0.0, width),
        b.y2.clamp(0.0, height),
    )
    .ok()
}

/// A scored, labelled box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f32,
}

impl Detection {
    pub fn new(bbox: BBox, class_id: usize, score: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Validation(format!("score {score} outside [0, 1]")));
        }
        Ok(Detection { bbox, class_id, score })
    }
}

/// Descending score, then lower class id, then earlier position.
pub(crate) fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(Ordering::Equal)
            .then(dets[a].class_id.cmp(&dets[b].class_id))
            .then(a.cmp(&b))
    });
    order
}

/// Greedy per-class non-maximum suppression. A detection survives iff its
/// IoU with every already-kept detection of the same class is at most
/// `iou_threshold`. Output is in descending score order.
pub fn nms(dets: &[Detection], iou_threshold: f32) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in score_order(dets) {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(x1: f32, y1: f32, x2: f32, y2: f32) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Counts cells of a fine grid inside the intersection and the union.
    fn grid_iou(a: &BBox, c: &BBox, step: f64) -> f64 {
        let lo_x = a.x1.min(c.x1) as f64;
        let hi_x = a.x2.max(c.x2) as f64;
        let lo_y = a.y1.min(c.y1) as f64;
        let hi_y = a.y2.max(c.y2) as f64;
        let inside = |bx: &BBox, x: f64, y: f64| x >= bx.x1 as f64 && x < bx.x2 as f64 && y >= bx.y1 as f64 && y < bx.y2 as f64;
        let (mut inter, mut union) = (0u64, 0u64);
        let mut y = lo_y + step / 2.0;
        while y < hi_y {
            let mut x = lo_x + step / 2.0;
            while x < hi_x {
                let (ia, ic) = (inside(a, x, y), inside(c, x, y));
                inter += (ia && ic) as u64;
                union += (ia || ic) as u64;
                x += step;
            }
            y += step;
        }
        inter as f64 / union as f64
    }

    #[test]
    fn box_rejects_degenerate() {
        assert!(BBox::new(0.0, 0.0, 0.0, 5.0).is_err());
        assert!(BBox::new(3.0, 0.0, 1.0, 5.0).is_err());
        assert!(BBox::new(0.0, 0.0, f32::NAN, 5.0).is_err());
        let xywh = BBox::from_xywh(1.0, 2.0, 3.0, 4.0).unwrap();
        assert_eq!(xywh, b(1.0, 2.0, 4.0, 6.0));
        assert_eq!(xywh.to_xywh(), (1.0, 2.0, 3.0, 4.0));
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(20.0, 20.0, 30.0, 30.0)), 0.0);
        let c = b(5.0, 5.0, 15.0, 15.0);
        let oracle = grid_iou(&a, &c, 0.05);
        assert!((oracle - 25.0 / 175.0).abs() < 1e-9);
        assert!((iou(&a, &c) as f64 - oracle).abs() < 1e-6);
    }

    #[test]
    fn anchor_examples() {
        let anchors = generate_anchors(16, 16, 16.0, &[60.0, 120.0, 240.0], &[0.5, 1.0, 2.0]).unwrap();
        assert_eq!(anchors.len(), 2304);
        let one = generate_anchors(1, 1, 256.0, &[60.0], &[1.0]).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].bbox.center(), (128.0, 128.0));
        assert_eq!((one[0].bbox.width(), one[0].bbox.height()), (60.0, 60.0));
        for a in anchors.iter().filter(|a| a.ratio_index == 2) {
            let s = [60.0f32, 120.0, 240.0][a.scale_index];
            assert!((a.bbox.width() / a.bbox.height() - 2.0).abs() < 1e-6);
            assert!((a.bbox.area() / (s * s) - 1.0).abs() < 0.005);
        }
        // cell-major, then scale, then ratio
        assert_eq!((anchors[0].feature_x, anchors[0].scale_index, anchors[0].ratio_index), (0, 0, 0));
        assert_eq!((anchors[1].scale_index, anchors[1].ratio_index), (0, 1));
        assert_eq!((anchors[3].scale_index, anchors[3].ratio_index), (1, 0));
        assert_eq!((anchors[9].feature_x, anchors[9].feature_y), (1, 0));
        assert_eq!((anchors[16 * 9].feature_x, anchors[16 * 9].feature_y), (0, 1));
        assert!(generate_anchors(4, 4, 16.0, &[], &[1.0]).is_err());
        assert!(generate_anchors(4, 4, 16.0, &[60.0], &[]).is_err());
    }

    #[test]
    fn delta_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(encode_deltas(&a, &a), [0.0; 4]);
        let t = b(0.0, 0.0, 20.0, 20.0);
        let d = encode_deltas(&a, &t);
        let ln2 = 2f32.ln();
        for (x, e) in d.iter().zip([0.5, 0.5, ln2, ln2]) {
            assert!((x - e).abs() < 1e-6);
        }
        assert_eq!(decode_deltas(&a, [0.0; 4]).unwrap(), a);
        let back = decode_deltas(&a, [0.5, 0.5, ln2, ln2]).unwrap();
        for (x, e) in back.as_array().iter().zip(t.as_array()) {
            assert!((x - e).abs() < 1e-5);
        }
    }

    #[test]
    fn clip_examples() {
        let inside = b(1.0, 2.0, 30.0, 40.0);
        assert_eq!(clip_box(&inside, 256.0, 256.0), Some(inside));
        assert_eq!(clip_box(&b(-5.0, -5.0, 10.0, 10.0), 256.0, 256.0), Some(b(0.0, 0.0, 10.0, 10.0)));
        assert_eq!(clip_box(&b(300.0, 300.0, 400.0, 400.0), 256.0, 256.0), None);
    }

    fn det(bbox: BBox, class_id: usize, score: f32) -> Detection {
        Detection::new(bbox, class_id, score).unwrap()
    }

    /// Greedy NMS restated over explicit subsets: walk candidates in order,
    /// admitting one iff the admitted set plus it has no same-class pair above
    /// the threshold involving it.
    fn subset_oracle(dets: &[Detection], thr: f32) -> Vec<usize> {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&i, &j| {
            dets[j].score.total_cmp(&dets[i].score).then(dets[i].class_id.cmp(&dets[j].class_id)).then(i.cmp(&j))
        });
        let mut chosen: Vec<usize> = vec![];
        for &i in &order {
            let mut trial = chosen.clone();
            trial.push(i);
            let ok = trial.iter().all(|&p| {
                p == i || dets[p].class_id != dets[i].class_id || iou(&dets[p].bbox, &dets[i].bbox) <= thr
            });
            if ok {
                chosen = trial;
            }
        }
        chosen
    }

    #[test]
    fn nms_examples() {
        let a = det(b(0.0, 0.0, 10.0, 10.0), 0, 0.9);
        assert_eq!(nms(&[a], 0.3), vec![a]);
        // IoU 0.5: same height, shifted by a third of the width
        let shifted = b(10.0 / 3.0, 0.0, 10.0 + 10.0 / 3.0, 10.0);
        assert!((iou(&a.bbox, &shifted) - 0.5).abs() < 1e-6);
        let c = det(shifted, 0, 0.8);
        let dets = [c, a];
        let oracle = subset_oracle(&dets, 0.3);
        assert_eq!(oracle, vec![1]);
        assert_eq!(nms(&dets, 0.3), vec![a]);
        let other = det(shifted, 1, 0.8);
        assert_eq!(nms(&[a, other], 0.3), vec![a, other]);
    }

    #[test]
    fn nms_matches_subset_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..300 {
            let n = rng.random_range(1..=10);
            let dets: Vec<Detection> = (0..n)
                .map(|_| {
                    let x = rng.random_range(0.0..40.0f32);
                    let y = rng.random_range(0.0..40.0f32);
                    let w = rng.random_range(5.0..30.0f32);
                    let h = rng.random_range(5.0..30.0f32);
                    // coarse scores force ties
                    let score = rng.random_range(0..5) as f32 / 4.0;
                    det(b(x, y, x + w, y + h), rng.random_range(0..2), score)
                })
                .collect();
            let thr = rng.random_range(0.1..0.8f32);
            let expected: Vec<Detection> = subset_oracle(&dets, thr).into_iter().map(|i| dets[i]).collect();
            assert_eq!(nms(&dets, thr), expected);
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0f32..200.0, 0.0f32..200.0, 1.0f32..150.0, 1.0f32..150.0)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let (ab, ba) = (iou(&a, &c), iou(&c, &a));
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-6);
        }

        #[test]
        fn deltas_round_trip(a in arb_box(), t in arb_box()) {
            let back = decode_deltas(&a, encode_deltas(&a, &t)).unwrap();
            for (x, e) in back.as_array().iter().zip(t.as_array()) {
                prop_assert!((x - e).abs() < 1e-4, "{} vs {}", x, e);
            }
        }

        #[test]
        fn anchor_count_is_w_h_k(w in 1usize..20, h in 1usize..20, ns in 1usize..4, nr in 1usize..4) {
            let scales: Vec<f32> = (0..ns).map(|i| 30.0 * (i + 1) as f32).collect();
            let ratios: Vec<f32> = (0..nr).map(|i| 0.5 * (i + 1) as f32).collect();
            let anchors = generate_anchors(w, h, 16.0, &scales, &ratios).unwrap();
            prop_assert_eq!(anchors.len(), w * h * ns * nr);
        }
    }
}
