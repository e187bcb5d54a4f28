use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::losses::{compute_losses, LossBreakdown, Losses};
use super::targets::{assign_rois, label_anchors, sample_anchors, AnchorAssignment};
use super::{adam_step, AdamState, TrainConfig};
use crate::boxgeom::BBox;
use crate::data::{ClassMap, Sample};
use crate::error::{Error, Result};
use crate::model::{
    anchors_for, backbone_forward, propose_regions, rpn_forward, ModelConfig, ModelWeights, Network, ParamGroup,
    ProposalParams, Trainable,
};
use crate::tensor::{Graph, Tensor};

/// Mean losses of one epoch. `epoch` counts across the four steps from 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub losses: LossBreakdown,
    pub seconds: f64,
    /// Images whose sampled anchors held no positive.
    pub images_without_positives: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainStatus {
    Completed,
    /// The loss or a gradient stopped being finite during `epoch` of `step`;
    /// the outcome carries the weights after the last finished epoch.
    Diverged { step: usize, epoch: usize, reason: String },
}

/// Group checksums (backbone, RPN, head) around one schedule step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepChecksums {
    pub step: usize,
    pub trainable: Vec<ParamGroup>,
    pub before: [String; 3],
    pub after: [String; 3],
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    pub log: Vec<EpochRecord>,
    pub status: TrainStatus,
    pub checksums: Vec<StepChecksums>,
}

const GROUPS: [ParamGroup; 3] = [ParamGroup::Backbone, ParamGroup::Rpn, ParamGroup::Head];

fn group_checksums(w: &ModelWeights) -> [String; 3] {
    GROUPS.map(|g| w.group_checksum(g))
}

type ImageLoss<'a> = dyn Fn(&mut Graph, &mut Network<f32>, usize, &mut ChaCha8Rng) -> Result<Losses> + 'a;

struct Trainer<'a, F: FnMut(&EpochRecord)> {
    cfg: &'a TrainConfig,
    images: usize,
    log: Vec<EpochRecord>,
    checksums: Vec<StepChecksums>,
    on_epoch: F,
}

impl<F: FnMut(&EpochRecord)> Trainer<'_, F> {
    /// Runs one schedule step in place. Returns the divergence status, with
    /// `weights` rolled back to the last finished epoch, if training blew up.
    fn step(
        &mut self,
        step: usize,
        weights: &mut ModelWeights,
        groups: Vec<ParamGroup>,
        image_loss: &ImageLoss,
    ) -> Result<Option<TrainStatus>> {
        let before = group_checksums(weights);
        let trainable = Trainable::Groups(groups.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(self.cfg.seed, &format!("train.step{step}")));
        let mut adam = AdamState::new();
        let mut checkpoint = weights.clone();
        let mut order: Vec<usize> = (0..self.images).collect();
        for e in 0..self.cfg.epochs {
            let epoch = (step - 1) * self.cfg.epochs + e + 1;
            let start = Instant::now();
            order.shuffle(&mut rng);
            let mut per_image = Vec::with_capacity(order.len());
            let mut without_positives = 0;
            for &i in &order {
                let (losses, grads) = {
                    let mut g = Graph::new();
                    let mut net = Network::new(&weights.params, trainable.clone());
                    let losses = image_loss(&mut g, &mut net, i, &mut rng)?;
                    let bound = net.bound().clone();
                    if !losses.breakdown.total.is_finite() {
                        let reason = format!("loss {:?} on image {i}", losses.breakdown);
                        *weights = checkpoint;
                        return Ok(Some(TrainStatus::Diverged { step, epoch, reason }));
                    }
                    let mut grads = g.backward(losses.total)?;
                    let grads: BTreeMap<String, Tensor> =
                        bound.into_iter().filter_map(|(name, v)| grads.take(v).map(|t| (name, t))).collect();
                    (losses, grads)
                };
                match adam_step(&mut weights.params, &grads, &mut adam, self.cfg.learning_rate, &self.cfg.adam) {
                    Ok(()) => {}
                    Err(Error::NonFiniteGradient { name }) => {
                        *weights = checkpoint;
                        let reason = format!("non-finite gradient for `{name}` on image {i}");
                        return Ok(Some(TrainStatus::Diverged { step, epoch, reason }));
                    }
                    Err(e) => return Err(e),
                }
                without_positives += losses.no_positive_anchors as usize;
                per_image.push(losses.breakdown);
            }
            let record = EpochRecord {
                epoch,
                step,
                losses: LossBreakdown::mean(&per_image),
                seconds: start.elapsed().as_secs_f64(),
                images_without_positives: without_positives,
            };
            log::info!(
                "step {step} epoch {epoch}: total {:.5} (rpn {:.4}/{:.4}, det {:.4}/{:.4}) in {:.1}s",
                record.losses.total,
                record.losses.rpn_cls,
                record.losses.rpn_reg,
                record.losses.det_cls,
                record.losses.det_reg,
                record.seconds
            );
            (self.on_epoch)(&record);
            self.log.push(record);
            checkpoint = weights.clone();
        }
        self.checksums.push(StepChecksums { step, trainable: groups, before, after: group_checksums(weights) });
        Ok(None)
    }
}

fn proposals(weights: &ModelWeights, features: &[Tensor], params: &ProposalParams) -> Result<Vec<Vec<BBox>>> {
    let anchors = anchors_for(&weights.config)?;
    let size = weights.config.backbone.input_size as f32;
    features
        .par_iter()
        .map(|f| {
            let (obj, deltas) = rpn_forward(f, weights)?;
            Ok(propose_regions(&obj, &deltas, &anchors, size, size, params)?.into_iter().map(|p| p.bbox).collect())
        })
        .collect()
}

fn features(weights: &ModelWeights, samples: &[&Sample]) -> Result<Vec<Tensor>> {
    samples.par_iter().map(|s| backbone_forward(&s.image, weights)).collect()
}

/// Per-image RPN loss on features computed by `features` from the graph's
/// own backbone or taken from a cache.
fn rpn_loss(
    g: &mut Graph,
    net: &mut Network<f32>,
    mc: &ModelConfig,
    cfg: &TrainConfig,
    features: crate::tensor::Var,
    assign: &AnchorAssignment,
    rng: &mut ChaCha8Rng,
) -> Result<Losses> {
    let out = net.rpn(g, &mc.rpn, features)?;
    let targets = sample_anchors(assign, cfg.rpn_batch, cfg.rpn_positive_fraction, rng);
    compute_losses(g, Some((&out, &targets)), None, &cfg.loss_weights)
}

#[allow(clippy::too_many_arguments)]
fn detector_loss(
    g: &mut Graph,
    net: &mut Network<f32>,
    mc: &ModelConfig,
    cfg: &TrainConfig,
    features: crate::tensor::Var,
    proposals: &[BBox],
    sample: &Sample,
    rng: &mut ChaCha8Rng,
) -> Result<Losses> {
    let t = assign_rois(
        proposals,
        &sample.objects,
        mc.num_classes,
        cfg.roi_foreground_iou,
        cfg.rois_per_image,
        cfg.roi_foreground_fraction,
        rng,
    )?;
    let stride = mc.backbone.stride() as f32;
    let rois: Vec<[f32; 4]> = t.rois.iter().map(|b| b.as_array().map(|v| v / stride)).collect();
    let pooled = g.roi_pool(features, &rois, mc.detector.roi_size, mc.detector.roi_size)?;
    let out = net.detector_train(g, &mc.detector, pooled, rng)?;
    compute_losses(g, None, Some((&out, &t)), &cfg.loss_weights)
}

/// Four-step alternating optimisation over `samples`:
///
/// 1. backbone and RPN trained together from the seeded initialisation;
/// 2. a fresh backbone (same seed) and the detector head trained on the
///    proposals of the step-1 network;
/// 3. the RPN layers retrained on top of the frozen step-2 backbone;
/// 4. the head fine-tuned on proposals of the step-3 RPN, all shared layers frozen.
///
/// The returned weights combine the step-2 backbone, step-3 RPN and step-4
/// head. `on_epoch` sees every log record as it is produced.
pub fn alternating_train(
    samples: &[&Sample],
    classes: &ClassMap,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Contract("training needs at least one image".into()));
    }
    let mc = cfg.model_config(classes.len())?;
    let s = mc.backbone.input_size;
    for sample in samples {
        if sample.image.shape() != [1, 3, s, s] {
            return Err(Error::dim(
                "alternating_train",
                format!("{} is {:?}, expected [1, 3, {s}, {s}]", sample.filename, sample.image.shape()),
            ));
        }
        if sample.objects.is_empty() {
            return Err(Error::Contract(format!("{} has no annotated object to learn from", sample.filename)));
        }
        if let Some(o) = sample.objects.iter().find(|o| o.class_id >= classes.len()) {
            return Err(Error::Validation(format!("{}: class id {} out of range", sample.filename, o.class_id)));
        }
    }
    let anchors: Vec<BBox> = anchors_for(&mc)?.into_iter().map(|a| a.bbox).collect();
    let assignments: Vec<AnchorAssignment> = samples
        .iter()
        .map(|s| {
            let gts: Vec<BBox> = s.objects.iter().map(|o| o.bbox).collect();
            label_anchors(&anchors, &gts, cfg.positive_iou, cfg.negative_iou)
        })
        .collect::<Result<_>>()?;
    let init = ModelWeights::init(mc.clone(), cfg.seed)?.with_class_names(classes.names().to_vec())?;
    let mut t = Trainer { cfg, images: samples.len(), log: Vec::new(), checksums: Vec::new(), on_epoch };
    let finish = |t: Trainer<_>, weights, status| TrainOutcome { weights, log: t.log, status, checksums: t.checksums };

    let mut w1 = init.clone();
    let step1 = |g: &mut Graph, net: &mut Network<f32>, i: usize, rng: &mut ChaCha8Rng| {
        let x = g.constant(samples[i].image.clone());
        let f = net.backbone(g, &mc.backbone, x)?;
        rpn_loss(g, net, &mc, cfg, f, &assignments[i], rng)
    };
    if let Some(status) = t.step(1, &mut w1, vec![ParamGroup::Backbone, ParamGroup::Rpn], &step1)? {
        return Ok(finish(t, w1, status));
    }
    let p1 = proposals(&w1, &features(&w1, samples)?, &cfg.proposals)?;

    let mut w2 = init;
    let step2 = |g: &mut Graph, net: &mut Network<f32>, i: usize, rng: &mut ChaCha8Rng| {
        let x = g.constant(samples[i].image.clone());
        let f = net.backbone(g, &mc.backbone, x)?;
        detector_loss(g, net, &mc, cfg, f, &p1[i], samples[i], rng)
    };
    if let Some(status) = t.step(2, &mut w2, vec![ParamGroup::Backbone, ParamGroup::Head], &step2)? {
        return Ok(finish(t, w2, status));
    }

    // shared layers are frozen from here on, so their output can be cached
    let mut w = w2;
    for (name, v) in w1.params.iter().filter(|(n, _)| ParamGroup::of(n) == Some(ParamGroup::Rpn)) {
        w.params.insert(name.clone(), v.clone());
    }
    let cached = features(&w, samples)?;
    let step3 = |g: &mut Graph, net: &mut Network<f32>, i: usize, rng: &mut ChaCha8Rng| {
        let f = g.constant(cached[i].clone());
        rpn_loss(g, net, &mc, cfg, f, &assignments[i], rng)
    };
    if let Some(status) = t.step(3, &mut w, vec![ParamGroup::Rpn], &step3)? {
        return Ok(finish(t, w, status));
    }
    let p3 = proposals(&w, &cached, &cfg.proposals)?;
    let step4 = |g: &mut Graph, net: &mut Network<f32>, i: usize, rng: &mut ChaCha8Rng| {
        let f = g.constant(cached[i].clone());
        detector_loss(g, net, &mc, cfg, f, &p3[i], samples[i], rng)
    };
    if let Some(status) = t.step(4, &mut w, vec![ParamGroup::Head], &step4)? {
        return Ok(finish(t, w, status));
    }
    Ok(finish(t, w, TrainStatus::Completed))
}

#[derive(Serialize)]
struct LogRow {
    epoch: usize,
    rpn_cls: f64,
    rpn_reg: f64,
    det_cls: f64,
    det_reg: f64,
    total: f64,
    seconds: f64,
}

/// Writes `epoch,rpn_cls,rpn_reg,det_cls,det_reg,total,seconds`.
pub fn write_loss_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Csv { path: path.to_path_buf(), detail: e.to_string() };
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(csv_err)?;
    for r in log {
        let l = &r.losses;
        w.serialize(LogRow {
            epoch: r.epoch,
            rpn_cls: l.rpn_cls,
            rpn_reg: l.rpn_reg,
            det_cls: l.det_cls,
            det_reg: l.det_reg,
            total: l.total,
            seconds: r.seconds,
        })
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
