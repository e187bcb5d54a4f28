use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{objectness, Network, Trainable};
use super::proposals::{anchors_for, propose_regions, ProposalParams, MAX_LOG_DELTA};
use super::ModelWeights;
use crate::boxgeom::{clip_box, decode_deltas, nms, Detection};
use crate::error::Result;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceParams {
    pub proposals: ProposalParams,
    /// Class probabilities below this are discarded before NMS.
    pub score_threshold: f32,
    /// Per-class NMS overlap on final detections.
    pub nms_iou: f32,
    pub max_detections: usize,
}

impl Default for InferenceParams {
    fn default() -> Self {
        InferenceParams {
            proposals: ProposalParams { pre_nms_top_n: 1000, post_nms_top_n: 100, nms_iou: 0.7 },
            score_threshold: 0.05,
            nms_iou: 0.3,
            max_detections: 20,
        }
    }
}

/// Runs the full detector on one `[1, 3, S, S]` image. Detections are in
/// image pixels, sorted by descending score.
pub fn detect(weights: &ModelWeights, image: &Tensor, params: &InferenceParams) -> Result<Vec<Detection>> {
    let cfg = &weights.config;
    let size = cfg.backbone.input_size as f32;
    let stride = cfg.backbone.stride() as f32;
    let mut g = Graph::new();
    let mut net = Network::new(&weights.params, Trainable::Nothing);
    let x = g.constant(image.clone());
    let features = net.backbone(&mut g, &cfg.backbone, x)?;
    let rpn = net.rpn(&mut g, &cfg.rpn, features)?;
    let probs = objectness(g.value(rpn.cls_logits))?;
    let anchors = anchors_for(cfg)?;
    let proposals = propose_regions(&probs, g.value(rpn.deltas), &anchors, size, size, &params.proposals)?;

    let rois: Vec<[f32; 4]> = proposals.iter().map(|p| p.bbox.as_array().map(|v| v / stride)).collect();
    let pooled = g.roi_pool(features, &rois, cfg.detector.roi_size, cfg.detector.roi_size)?;
    let out = net.detector(&mut g, &cfg.detector, pooled)?;
    let class_probs = g.softmax(out.logits);
    let (class_probs, offsets) = (g.value(class_probs).data(), g.value(out.offsets).data());

    let n = cfg.num_classes;
    let mut dets = Vec::new();
    for (r, p) in proposals.iter().enumerate() {
        for c in 0..n {
            let score = class_probs[r * (n + 1) + c];
            if !(score >= params.score_threshold) {
                continue;
            }
            let d = &offsets[r * 4 * n + 4 * c..r * 4 * n + 4 * c + 4];
            let d = [d[0], d[1], d[2].min(MAX_LOG_DELTA), d[3].min(MAX_LOG_DELTA)];
            let Ok(decoded) = decode_deltas(&p.bbox, d) else { continue };
            if let Some(bbox) = clip_box(&decoded, size, size) {
                dets.push(Detection::new(bbox, c, score.clamp(0.0, 1.0))?);
            }
        }
    }
    let mut kept = nms(&dets, params.nms_iou);
    kept.truncate(params.max_detections);
    Ok(kept)
}

/// [`detect`] over many images in parallel; output order follows input order.
pub fn detect_batch(
    weights: &ModelWeights,
    images: &[Tensor],
    params: &InferenceParams,
) -> Result<Vec<Vec<Detection>>> {
    images.par_iter().map(|img| detect(weights, img, params)).collect()
}
