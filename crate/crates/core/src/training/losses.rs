use serde::{Deserialize, Serialize};

use super::targets::{AnchorTargets, RoiTargets};
use crate::error::{Error, Result};
use crate::model::{DetectorOutput, RpnOutput};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Multipliers for the four loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub det_cls: f64,
    pub det_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { rpn_cls: 1.0, rpn_reg: 1.0, det_cls: 1.0, det_reg: 1.0 }
    }
}

/// Values of the four loss terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub det_cls: f64,
    pub det_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(terms: [f64; 4], w: &LossWeights) -> Self {
        let [rpn_cls, rpn_reg, det_cls, det_reg] = terms;
        let total = w.rpn_cls * rpn_cls + w.rpn_reg * rpn_reg + w.det_cls * det_cls + w.det_reg * det_reg;
        LossBreakdown { rpn_cls, rpn_reg, det_cls, det_reg, total }
    }

    pub fn terms(&self) -> [f64; 4] {
        [self.rpn_cls, self.rpn_reg, self.det_cls, self.det_reg]
    }

    /// Term-wise mean; the total is averaged too, so it stays the weighted sum.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.rpn_cls += b.rpn_cls / n;
            m.rpn_reg += b.rpn_reg / n;
            m.det_cls += b.det_cls / n;
            m.det_reg += b.det_reg / n;
            m.total += b.total / n;
        }
        m
    }
}

/// The scalar loss node of one image plus what it is made of.
#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// Set when RPN targets were given but none of the sampled anchors was
    /// positive, so the RPN regression term is zero.
    pub no_positive_anchors: bool,
}

fn scalar<T: Scalar>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).data()[0].as_f64()
}

/// Builds the weighted loss. Classification terms are mean cross-entropy
/// over sampled anchors and over ROIs; regression terms are smooth-L1 over
/// positive anchors and foreground ROIs only. A missing stage contributes 0.
pub fn compute_losses<T: Scalar>(
    g: &mut Graph<T>,
    rpn: Option<(&RpnOutput, &AnchorTargets)>,
    detector: Option<(&DetectorOutput, &RoiTargets)>,
    weights: &LossWeights,
) -> Result<Losses> {
    let mut parts: Vec<(Var, f64)> = Vec::new();
    let mut terms = [0.0; 4];
    let mut no_positive_anchors = false;

    if let Some((out, t)) = rpn {
        let cls_rows = g.channels_to_rows(out.cls_logits, 2)?;
        let reg_rows = g.channels_to_rows(out.deltas, 4)?;
        if t.classes.len() != g.value(cls_rows).shape()[0] || t.deltas.len() != t.classes.len() {
            return Err(Error::dim(
                "compute_losses",
                format!("{} anchor targets for {} anchors", t.classes.len(), g.value(cls_rows).shape()[0]),
            ));
        }
        let cls = g.softmax_cross_entropy(cls_rows, &t.classes)?;
        let reg_targets: Vec<Option<(usize, [T; 4])>> =
            t.deltas.iter().map(|d| d.map(|d| (0, d.map(|v| T::of(v as f64))))).collect();
        let reg = g.smooth_l1(reg_rows, &reg_targets)?;
        no_positive_anchors = t.positives() == 0;
        terms[0] = scalar(g, cls);
        terms[1] = scalar(g, reg);
        parts.push((cls, weights.rpn_cls));
        parts.push((reg, weights.rpn_reg));
    }

    if let Some((out, t)) = detector {
        let rows = g.value(out.logits).shape()[0];
        if t.classes.len() != rows || t.deltas.len() != rows {
            return Err(Error::dim("compute_losses", format!("{} ROI targets for {rows} ROIs", t.classes.len())));
        }
        let targets: Vec<Option<usize>> = t.classes.iter().map(|&c| Some(c)).collect();
        let cls = g.softmax_cross_entropy(out.logits, &targets)?;
        let reg_targets: Vec<Option<(usize, [T; 4])>> = t
            .classes
            .iter()
            .zip(&t.deltas)
            .map(|(&c, d)| d.map(|d| (4 * c, d.map(|v| T::of(v as f64)))))
            .collect();
        let reg = g.smooth_l1(out.offsets, &reg_targets)?;
        terms[2] = scalar(g, cls);
        terms[3] = scalar(g, reg);
        parts.push((cls, weights.det_cls));
        parts.push((reg, weights.det_reg));
    }

    let mut total: Option<Var> = None;
    for (v, w) in parts {
        let scaled = g.scale(v, T::of(w));
        total = Some(match total {
            Some(t) => g.add(t, scaled)?,
            None => scaled,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(T::zero())),
    };
    Ok(Losses { total, breakdown: LossBreakdown::new(terms, weights), no_positive_anchors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rpn_out(g: &mut Graph<f64>, cls: Vec<f64>, deltas: Vec<f64>) -> RpnOutput {
        // one anchor per cell on a 1 x 2 map
        let cls_logits = g.param(Tensor::new(vec![1, 2, 1, 2], cls).unwrap());
        let deltas = g.param(Tensor::new(vec![1, 4, 1, 2], deltas).unwrap());
        RpnOutput { cls_logits, deltas }
    }

    #[test]
    fn perfect_predictions_give_zero_total() {
        let mut g = Graph::<f64>::new();
        // channel 0 background, 1 object; anchor 0 is object, anchor 1 background
        let out = rpn_out(&mut g, vec![-60.0, 60.0, 60.0, -60.0], vec![0.1, 0.0, 0.2, 0.0, -0.3, 0.0, 0.4, 0.0]);
        let t = AnchorTargets { classes: vec![Some(1), Some(0)], deltas: vec![Some([0.1, 0.2, -0.3, 0.4]), None] };
        let logits = g.param(Tensor::new(vec![2, 3], vec![60.0, -60.0, -60.0, -60.0, -60.0, 60.0]).unwrap());
        let offsets = g.param(Tensor::new(vec![2, 8], vec![0.5, 0.5, 0.5, 0.5, 9.0, 9.0, 9.0, 9.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let det = DetectorOutput { logits, offsets };
        let roi = RoiTargets {
            rois: vec![],
            classes: vec![0, 2],
            deltas: vec![Some([0.5; 4]), None],
        };
        let l = compute_losses(&mut g, Some((&out, &t)), Some((&det, &roi)), &LossWeights::default()).unwrap();
        assert!(l.breakdown.total.abs() < 1e-12, "{:?}", l.breakdown);
        assert!(!l.no_positive_anchors);
    }

    #[test]
    fn uniform_objectness_costs_ln_2() {
        let mut g = Graph::<f64>::new();
        let out = rpn_out(&mut g, vec![0.3; 4], vec![0.0; 8]);
        let t = AnchorTargets { classes: vec![Some(1), Some(0)], deltas: vec![None, None] };
        let l = compute_losses(&mut g, Some((&out, &t)), None, &LossWeights::default()).unwrap();
        assert!((l.breakdown.rpn_cls - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(l.breakdown.rpn_reg, 0.0);
        assert!(l.no_positive_anchors);
    }

    #[test]
    fn smooth_l1_at_half_residual_is_an_eighth_per_coordinate() {
        let mut g = Graph::<f64>::new();
        let out = rpn_out(&mut g, vec![0.0; 4], vec![0.5, 0.0, 0.5, 0.0, 0.5, 0.0, 0.5, 0.0]);
        let t = AnchorTargets { classes: vec![Some(1), Some(0)], deltas: vec![Some([0.0; 4]), None] };
        let l = compute_losses(&mut g, Some((&out, &t)), None, &LossWeights::default()).unwrap();
        assert!((l.breakdown.rpn_reg - 4.0 * 0.125).abs() < 1e-12);
    }

    #[test]
    fn background_rois_carry_no_regression_loss_and_total_is_weighted() {
        let mut g = Graph::<f64>::new();
        let logits = g.param(Tensor::new(vec![2, 2], vec![0.0, 1.0, 2.0, 0.5]).unwrap());
        let offsets = g.param(Tensor::new(vec![2, 4], vec![3.0, 3.0, 3.0, 3.0, 7.0, 7.0, 7.0, 7.0]).unwrap());
        let det = DetectorOutput { logits, offsets };
        let roi = RoiTargets { rois: vec![], classes: vec![0, 1], deltas: vec![Some([3.0; 4]), None] };
        let w = LossWeights { rpn_cls: 1.0, rpn_reg: 1.0, det_cls: 2.0, det_reg: 0.5 };
        let l = compute_losses(&mut g, None, Some((&det, &roi)), &w).unwrap();
        assert_eq!(l.breakdown.det_reg, 0.0);
        assert!((g.value(l.total).data()[0] - 2.0 * l.breakdown.det_cls).abs() < 1e-12);
        assert!((l.breakdown.total - 2.0 * l.breakdown.det_cls).abs() < 1e-12);
        assert!(l.breakdown.det_cls > 0.0);
    }

    #[test]
    fn mismatched_targets_are_rejected() {
        let mut g = Graph::<f64>::new();
        let out = rpn_out(&mut g, vec![0.0; 4], vec![0.0; 8]);
        let t = AnchorTargets { classes: vec![Some(1)], deltas: vec![None] };
        assert!(compute_losses(&mut g, Some((&out, &t)), None, &LossWeights::default()).is_err());
    }
}
