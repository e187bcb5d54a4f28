//! Target assignment, losses, Adam and the four-step alternating schedule.

mod adam;
mod losses;
mod schedule;
mod targets;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ProposalParams};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use losses::{compute_losses, LossBreakdown, LossWeights, Losses};
pub use schedule::{alternating_train, write_loss_log, EpochRecord, TrainOutcome, TrainStatus};
pub use targets::{
    assign_rois, label_anchors, sample_anchors, AnchorAssignment, AnchorLabel, AnchorTargets, RoiTargets,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Epochs per schedule step.
    pub epochs: usize,
    pub dropout: f64,
    pub adam: AdamConfig,
    /// Side of the square network input.
    pub image_size: usize,
    /// 1 is the full-width network; larger values shrink every layer.
    pub width_divisor: usize,
    /// Anchor side lengths in pixels (areas are their squares).
    pub anchor_scales: Vec<f32>,
    pub anchor_ratios: Vec<f32>,
    pub rpn_batch: usize,
    pub rpn_positive_fraction: f64,
    pub positive_iou: f32,
    pub negative_iou: f32,
    /// Proposals fed to the detector per image.
    pub rois_per_image: usize,
    pub roi_foreground_fraction: f64,
    pub roi_foreground_iou: f32,
    /// Proposal generation used to feed the detector during training.
    pub proposals: ProposalParams,
    pub loss_weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            epochs: 300,
            dropout: 0.5,
            adam: AdamConfig::default(),
            image_size: 256,
            width_divisor: 1,
            anchor_scales: vec![60.0, 120.0, 240.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            rpn_batch: 256,
            rpn_positive_fraction: 0.5,
            positive_iou: 0.7,
            negative_iou: 0.3,
            rois_per_image: 64,
            roi_foreground_fraction: 0.5,
            roi_foreground_iou: 0.5,
            proposals: ProposalParams { pre_nms_top_n: 1000, post_nms_top_n: 128, nms_iou: 0.7 },
            loss_weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted and leaves every weight untouched.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning_rate", format!("{} is not a finite non-negative number", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::param("epochs", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::param("dropout", format!("{} is outside [0, 1)", self.dropout)));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return Err(Error::param("adam", "betas must lie in [0, 1) and epsilon be positive"));
        }
        if self.width_divisor == 0 {
            return Err(Error::param("width_divisor", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.negative_iou) || !(0.0..=1.0).contains(&self.positive_iou) {
            return Err(Error::param("positive_iou", "IoU thresholds must lie in [0, 1]"));
        }
        if self.negative_iou > self.positive_iou {
            return Err(Error::param(
                "negative_iou",
                format!("{} exceeds positive_iou {}", self.negative_iou, self.positive_iou),
            ));
        }
        if self.rpn_batch == 0 || self.rois_per_image == 0 {
            return Err(Error::param("rpn_batch", "anchor and ROI batches must be positive"));
        }
        for (name, f) in [
            ("rpn_positive_fraction", self.rpn_positive_fraction),
            ("roi_foreground_fraction", self.roi_foreground_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::param(name, format!("{f} is outside [0, 1]")));
            }
        }
        let w = &self.loss_weights;
        if [w.rpn_cls, w.rpn_reg, w.det_cls, w.det_reg].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::param("loss_weights", "must be finite and non-negative"));
        }
        self.model_config(1)?;
        Ok(())
    }

    /// Network configuration implied by these settings.
    pub fn model_config(&self, num_classes: usize) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::full(num_classes).width_divided(self.width_divisor);
        cfg.backbone.input_size = self.image_size;
        cfg.rpn.anchor_scales = self.anchor_scales.clone();
        cfg.rpn.anchor_ratios = self.anchor_ratios.clone();
        cfg.detector.dropout = self.dropout;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_settings() {
        let c = TrainConfig::default();
        assert_eq!((c.learning_rate, c.epochs, c.dropout), (1e-5, 300, 0.5));
        assert_eq!((c.adam.beta1, c.adam.beta2, c.adam.epsilon), (0.9, 0.999, 1e-8));
        assert_eq!(c.anchor_scales, [60.0, 120.0, 240.0]);
        c.validate().unwrap();
        assert_eq!(c.model_config(10).unwrap(), ModelConfig::full(10));
        let desk = TrainConfig { width_divisor: 8, ..c };
        assert_eq!(desk.model_config(3).unwrap(), ModelConfig::desk(3));
    }

    #[test]
    fn invalid_settings_name_the_field() {
        let bad = |c: TrainConfig, field: &str| match c.validate() {
            Err(Error::Parameter { name, .. }) => assert_eq!(name, field),
            other => panic!("{other:?}"),
        };
        bad(TrainConfig { learning_rate: -1e-3, ..Default::default() }, "learning_rate");
        bad(TrainConfig { negative_iou: 0.8, ..Default::default() }, "negative_iou");
        bad(TrainConfig { epochs: 0, ..Default::default() }, "epochs");
        bad(TrainConfig { image_size: 100, ..Default::default() }, "backbone.input_size");
        let json = r#"{"learning_rate": 0.001, "bogus": 1}"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"learning_rate": 0.001}"#).unwrap();
        assert_eq!((c.learning_rate, c.epochs), (0.001, 300));
    }
}
