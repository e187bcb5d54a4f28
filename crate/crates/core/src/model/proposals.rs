use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::boxgeom::{clip_box, decode_deltas, generate_anchors, iou, Anchor, BBox};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalParams {
    pub pre_nms_top_n: usize,
    pub post_nms_top_n: usize,
    pub nms_iou: f32,
}

impl Default for ProposalParams {
    fn default() -> Self {
        ProposalParams { pre_nms_top_n: 2000, post_nms_top_n: 300, nms_iou: 0.7 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    /// Foreground probability.
    pub score: f32,
}

/// Anchors tiled over the backbone's output grid.
pub fn anchors_for(config: &ModelConfig) -> Result<Vec<Anchor>> {
    let f = config.backbone.feature_size();
    generate_anchors(f, f, config.backbone.stride() as f32, &config.rpn.anchor_scales, &config.rpn.anchor_ratios)
}

/// Largest log-scale delta applied when decoding, so an untrained network
/// cannot overflow box sizes.
pub(crate) const MAX_LOG_DELTA: f32 = 4.135_166_6; // ln(1000 / 16)

/// Per-anchor rows of a batch-1 `[1, k*group, H, W]` map, in anchor order.
pub(crate) fn anchor_rows(t: &Tensor, group: usize) -> Result<Vec<f32>> {
    let (n, c, h, w) = t.dims4()?;
    if n != 1 || c % group != 0 {
        return Err(Error::dim("anchor_rows", format!("expected [1, k*{group}, H, W], got {:?}", t.shape())));
    }
    let k = c / group;
    let plane = h * w;
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let (a, j) = (ch / group, ch % group);
        for cell in 0..plane {
            out[(cell * k + a) * group + j] = src[ch * plane + cell];
        }
    }
    Ok(out)
}

/// Turns RPN outputs for one image into scored proposals: decode every
/// anchor, clip to the image, drop empty boxes, keep the `pre_nms_top_n`
/// best by foreground probability (ties to the lower anchor index), run
/// class-agnostic greedy NMS and return at most `post_nms_top_n` in
/// descending score order. When nothing survives the whole image is returned
/// with score 0.
pub fn propose_regions(
    objectness: &Tensor,
    deltas: &Tensor,
    anchors: &[Anchor],
    image_w: f32,
    image_h: f32,
    params: &ProposalParams,
) -> Result<Vec<Proposal>> {
    let probs = anchor_rows(objectness, 2)?;
    let deltas = anchor_rows(deltas, 4)?;
    if probs.len() != 2 * anchors.len() || deltas.len() != 4 * anchors.len() {
        return Err(Error::dim(
            "propose_regions",
            format!("{} anchors do not match maps {:?}", anchors.len(), objectness.shape()),
        ));
    }
    let mut candidates: Vec<(usize, Proposal)> = Vec::with_capacity(anchors.len());
    for (i, anchor) in anchors.iter().enumerate() {
        let d = &deltas[4 * i..4 * i + 4];
        let d = [d[0], d[1], d[2].min(MAX_LOG_DELTA), d[3].min(MAX_LOG_DELTA)];
        let Ok(decoded) = decode_deltas(&anchor.bbox, d) else { continue };
        if let Some(bbox) = clip_box(&decoded, image_w, image_h) {
            candidates.push((i, Proposal { bbox, score: probs[2 * i + 1] }));
        }
    }
    candidates.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
    candidates.truncate(params.pre_nms_top_n);

    let mut kept: Vec<Proposal> = Vec::new();
    for (_, p) in candidates {
        if kept.len() == params.post_nms_top_n {
            break;
        }
        if kept.iter().all(|k| iou(&k.bbox, &p.bbox) <= params.nms_iou) {
            kept.push(p);
        }
    }
    if kept.is_empty() {
        kept.push(Proposal { bbox: BBox::new(0.0, 0.0, image_w, image_h)?, score: 0.0 });
    }
    Ok(kept)
}
