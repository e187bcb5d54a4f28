use crate::boxgeom::{iou, score_order, Detection};
use crate::data::GroundTruth;
use crate::error::{Error, Result};

use super::matching::match_detections;

/// Counts indexed `[truth][predicted]` over classes `0..N` plus background `N`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        let n = num_classes + 1;
        ConfusionMatrix { num_classes, counts: vec![0; n * n] }
    }

    /// Side length, including the background row and column.
    pub fn size(&self) -> usize {
        self.num_classes + 1
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let n = self.size();
        if truth >= n || predicted >= n {
            return Err(Error::Validation(format!("label pair ({truth}, {predicted}) outside {n} x {n}")));
        }
        self.counts[truth * n + predicted] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.size() + predicted]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        let n = self.size();
        &self.counts[truth * n..(truth + 1) * n]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Accumulates one image. Matched detections land on the diagonal. Each
    /// unmatched ground truth pairs with the best-scoring unmatched detection
    /// of another class overlapping it at `iou_threshold` (a
    /// misclassification) or else with background. Detections still left
    /// count in the background row.
    pub fn add_image(&mut self, dets: &[Detection], gts: &[GroundTruth], iou_threshold: f32) -> Result<()> {
        let n = self.num_classes;
        if let Some(bad) = gts.iter().map(|g| g.class_id).chain(dets.iter().map(|d| d.class_id)).find(|&c| c >= n) {
            return Err(Error::Validation(format!("class id {bad} outside {n} classes")));
        }
        let m = match_detections(dets, gts, n, iou_threshold);
        let mut det_used = m.is_tp.clone();
        let mut gt_used = vec![false; gts.len()];
        for &(d, g) in &m.pairs {
            gt_used[g] = true;
            self.add(gts[g].class_id, dets[d].class_id)?;
        }
        let order = score_order(dets);
        for (j, g) in gts.iter().enumerate().filter(|(j, _)| !gt_used[*j]) {
            let hit = order.iter().copied().find(|&d| !det_used[d] && iou(&dets[d].bbox, &g.bbox) >= iou_threshold);
            match hit {
                Some(d) => {
                    det_used[d] = true;
                    self.add(gts[j].class_id, dets[d].class_id)?;
                }
                None => self.add(g.class_id, n)?,
            }
        }
        for (det, _) in dets.iter().zip(&det_used).filter(|(_, used)| !**used) {
            self.add(n, det.class_id)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxgeom::BBox;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(x: f32) -> BBox {
        BBox::from_xywh(x, 0.0, 10.0, 10.0).unwrap()
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let gts: Vec<GroundTruth> = (0..4).map(|i| GroundTruth { class_id: i % 3, bbox: b(20.0 * i as f32) }).collect();
        let dets: Vec<Detection> = gts.iter().map(|g| Detection::new(g.bbox, g.class_id, 0.8).unwrap()).collect();
        let mut cm = ConfusionMatrix::new(3);
        cm.add_image(&dets, &gts, 0.5).unwrap();
        for t in 0..4 {
            for p in 0..4 {
                if t != p {
                    assert_eq!(cm.get(t, p), 0);
                }
            }
        }
        assert_eq!((cm.get(0, 0), cm.get(1, 1), cm.get(2, 2)), (2, 1, 1));
    }

    #[test]
    fn misclassification_and_background() {
        let mut cm = ConfusionMatrix::new(6);
        let gts = [GroundTruth { class_id: 3, bbox: b(0.0) }];
        cm.add_image(&[Detection::new(b(0.5), 5, 0.9).unwrap()], &gts, 0.5).unwrap();
        assert_eq!(cm.get(3, 5), 1);
        assert_eq!(cm.total(), 1);

        let mut cm = ConfusionMatrix::new(2);
        cm.add_image(&[Detection::new(b(50.0), 1, 0.9).unwrap()], &[GroundTruth { class_id: 0, bbox: b(0.0) }], 0.5).unwrap();
        assert_eq!((cm.get(0, 2), cm.get(2, 1), cm.total()), (1, 1, 2));
        assert!(cm.add(3, 0).is_err());
    }

    #[test]
    fn row_sums_recount_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = 4;
        let mut cm = ConfusionMatrix::new(k);
        let mut per_class = vec![0u64; k];
        let mut decisions = 0u64;
        for _ in 0..300 {
            let gts: Vec<GroundTruth> = (0..rng.random_range(0..4))
                .map(|_| GroundTruth { class_id: rng.random_range(0..k), bbox: b(rng.random_range(0.0..60.0)) })
                .collect();
            let dets: Vec<Detection> = (0..rng.random_range(0..5))
                .map(|_| Detection::new(b(rng.random_range(0.0..60.0)), rng.random_range(0..k), rng.random_range(0.0..1.0)).unwrap())
                .collect();
            for g in &gts {
                per_class[g.class_id] += 1;
            }
            let before = cm.total();
            cm.add_image(&dets, &gts, 0.5).unwrap();
            // one decision per ground truth plus one per detection that explains none
            let added = cm.total() - before;
            assert!(added >= gts.len().max(dets.len()) as u64 && added <= (gts.len() + dets.len()) as u64);
            decisions += added;
        }
        for c in 0..k {
            assert_eq!(cm.row(c).iter().sum::<u64>(), per_class[c]);
        }
        assert_eq!(cm.total(), decisions);
        let col_sums: u64 = (0..k).map(|p| (0..=k).map(|t| cm.get(t, p)).sum::<u64>()).sum();
        assert!(col_sums <= decisions);
    }
}
