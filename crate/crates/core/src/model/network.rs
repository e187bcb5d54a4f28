use std::collections::BTreeMap;

use rand::Rng;

use super::{BackboneConfig, DetectorConfig, HeadConfig, InceptionConfig, ModelWeights, ParamGroup, ParamMap, RpnConfig};
use crate::boxgeom::BBox;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Which parameters become gradient-carrying leaves when bound into a graph.
#[derive(Clone, Debug, PartialEq)]
pub enum Trainable {
    Nothing,
    All,
    Groups(Vec<ParamGroup>),
}

impl Trainable {
    fn covers(&self, name: &str) -> bool {
        match self {
            Trainable::Nothing => false,
            Trainable::All => true,
            Trainable::Groups(groups) => ParamGroup::of(name).is_some_and(|g| groups.contains(&g)),
        }
    }
}

/// Raw RPN outputs: `cls_logits [N, 2k, H, W]` (channel `2a` background,
/// `2a + 1` foreground for anchor `a`) and `deltas [N, 4k, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct RpnOutput {
    pub cls_logits: Var,
    pub deltas: Var,
}

/// Detector outputs: `logits [R, N + 1]` (last column is background) and
/// class-specific encoded deltas `offsets [R, 4N]`.
#[derive(Clone, Copy, Debug)]
pub struct DetectorOutput {
    pub logits: Var,
    pub offsets: Var,
}

/// Binds named parameters into a [`Graph`] on first use and builds the
/// network layers on top of them.
pub struct Network<'w, T: Scalar> {
    params: &'w ParamMap<T>,
    trainable: Trainable,
    bound: BTreeMap<String, Var>,
}

impl<'w, T: Scalar> Network<'w, T> {
    pub fn new(params: &'w ParamMap<T>, trainable: Trainable) -> Self {
        Network { params, trainable, bound: BTreeMap::new() }
    }

    /// Parameters bound so far, by name.
    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    fn param(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name).ok_or_else(|| Error::param(name, "missing from weights"))?;
        let v = g.leaf(t.clone(), self.trainable.covers(name));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    fn conv(&mut self, g: &mut Graph<T>, x: Var, layer: &str, padding: usize, relu: bool) -> Result<Var> {
        let w = self.param(g, &format!("{layer}.weight"))?;
        let b = self.param(g, &format!("{layer}.bias"))?;
        let y = g.conv2d(x, w, b, 1, padding)?;
        Ok(if relu { g.relu(y) } else { y })
    }

    fn fc(&mut self, g: &mut Graph<T>, x: Var, layer: &str) -> Result<Var> {
        let w = self.param(g, &format!("{layer}.weight"))?;
        let b = self.param(g, &format!("{layer}.bias"))?;
        g.fully_connected(x, w, b)
    }

    /// `[N, 3, S, S]` image batch to `[N, C, S / stride, S / stride]` features.
    pub fn backbone(&mut self, g: &mut Graph<T>, cfg: &BackboneConfig, image: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(image).dims4()?;
        if c != 3 || h != cfg.input_size || w != cfg.input_size {
            return Err(Error::dim(
                "backbone",
                format!("expected [N, 3, {s}, {s}] input, got {:?}", g.value(image).shape(), s = cfg.input_size),
            ));
        }
        let mut x = image;
        for (s, stage) in cfg.stages.iter().enumerate() {
            for i in 0..stage.convs {
                x = self.conv(g, x, &format!("backbone.conv{}_{}", s + 1, i + 1), 1, true)?;
            }
            if stage.pool {
                x = g.maxpool2d(x, 2, 2)?;
            }
        }
        Ok(x)
    }

    /// Two shared 3x3 layers, then sibling 1x1 classification and regression layers.
    pub fn rpn(&mut self, g: &mut Graph<T>, cfg: &RpnConfig, features: Var) -> Result<RpnOutput> {
        let x = self.conv(g, features, "rpn.conv1", 1, true)?;
        let x = self.conv(g, x, "rpn.conv2", 1, true)?;
        let cls_logits = self.conv(g, x, "rpn.cls", 0, false)?;
        let deltas = self.conv(g, x, "rpn.reg", 0, false)?;
        let k = cfg.k();
        let got = (g.value(cls_logits).shape()[1], g.value(deltas).shape()[1]);
        if got != (2 * k, 4 * k) {
            return Err(Error::dim("rpn", format!("weights give {got:?} output channels, k = {k} needs ({}, {})", 2 * k, 4 * k)));
        }
        Ok(RpnOutput { cls_logits, deltas })
    }

    /// One inception module; `prefix` is e.g. `head.inc1`.
    pub fn inception(&mut self, g: &mut Graph<T>, cfg: &InceptionConfig, prefix: &str, x: Var) -> Result<Var> {
        let b1 = self.conv(g, x, &format!("{prefix}.b1"), 0, true)?;
        let r2 = self.conv(g, x, &format!("{prefix}.b2_reduce"), 0, true)?;
        let b2 = self.conv(g, r2, &format!("{prefix}.b2"), 1, true)?;
        let r3 = self.conv(g, x, &format!("{prefix}.b3_reduce"), 0, true)?;
        let b3 = self.conv(g, r3, &format!("{prefix}.b3"), 2, true)?;
        let pooled = g.maxpool2d_padded(x, 3, 1, 1)?;
        let b4 = self.conv(g, pooled, &format!("{prefix}.b4"), 0, true)?;
        let y = g.concat_channels(&[b1, b2, b3, b4])?;
        if g.value(y).shape()[1] != cfg.out_channels() {
            return Err(Error::dim(
                "inception",
                format!("{prefix} weights give {} channels, config expects {}", g.value(y).shape()[1], cfg.out_channels()),
            ));
        }
        Ok(y)
    }

    /// Classifier and box regressor over pooled ROIs `[R, C, s, s]`, with dropout off.
    pub fn detector(&mut self, g: &mut Graph<T>, cfg: &DetectorConfig, pooled: Var) -> Result<DetectorOutput> {
        self.detector_impl::<rand_chacha::ChaCha8Rng>(g, cfg, pooled, None)
    }

    /// As [`Network::detector`] but with training-mode dropout drawn from `rng`.
    pub fn detector_train<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph<T>,
        cfg: &DetectorConfig,
        pooled: Var,
        rng: &mut R,
    ) -> Result<DetectorOutput> {
        self.detector_impl(g, cfg, pooled, Some(rng))
    }

    fn detector_impl<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph<T>,
        cfg: &DetectorConfig,
        pooled: Var,
        mut rng: Option<&mut R>,
    ) -> Result<DetectorOutput> {
        let mut dropout = |g: &mut Graph<T>, x: Var| -> Result<Var> {
            match rng.as_deref_mut() {
                Some(r) => g.dropout(x, cfg.dropout, true, r),
                None => Ok(x),
            }
        };
        let rows = g.value(pooled).dims4()?.0;
        let mut x = pooled;
        match &cfg.head {
            HeadConfig::Inception { modules, .. } => {
                for (m, module) in modules.iter().enumerate() {
                    x = self.inception(g, module, &format!("head.inc{}", m + 1), x)?;
                }
                let width = g.value(x).numel() / rows;
                x = g.reshape(x, &[rows, width])?;
                x = self.fc(g, x, "head.fc")?;
                x = g.relu(x);
                x = dropout(g, x)?;
            }
            HeadConfig::FullyConnected { units } => {
                let width = g.value(x).numel() / rows;
                x = g.reshape(x, &[rows, width])?;
                for i in 0..units.len() {
                    x = self.fc(g, x, &format!("head.fc{}", i + 1))?;
                    x = g.relu(x);
                    x = dropout(g, x)?;
                }
            }
        }
        let logits = self.fc(g, x, "head.cls")?;
        let offsets = self.fc(g, x, "head.reg")?;
        Ok(DetectorOutput { logits, offsets })
    }
}

/// Softmax over each `(background, foreground)` channel pair of RPN logits.
pub fn objectness<T: Scalar>(cls_logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = cls_logits.dims4()?;
    if c % 2 != 0 {
        return Err(Error::dim("objectness", format!("{c} channels do not form pairs")));
    }
    let plane = h * w;
    let mut out = cls_logits.clone();
    let data = out.data_mut();
    for b in 0..n {
        for a in 0..c / 2 {
            let bg = (b * c + 2 * a) * plane;
            let fg = bg + plane;
            for i in 0..plane {
                let (l0, l1) = (data[bg + i], data[fg + i]);
                let m = l0.max(l1);
                let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
                data[bg + i] = e0 / (e0 + e1);
                data[fg + i] = e1 / (e0 + e1);
            }
        }
    }
    Ok(out)
}

/// Inference-only backbone pass.
pub fn backbone_forward(image: &Tensor, weights: &ModelWeights) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut net = Network::new(&weights.params, Trainable::Nothing);
    let x = g.constant(image.clone());
    let y = net.backbone(&mut g, &weights.config.backbone, x)?;
    Ok(g.value(y).clone())
}

/// Inference-only RPN pass: softmax-normalised objectness `[N, 2k, H, W]`
/// and deltas `[N, 4k, H, W]`.
pub fn rpn_forward(features: &Tensor, weights: &ModelWeights) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let mut net = Network::new(&weights.params, Trainable::Nothing);
    let x = g.constant(features.clone());
    let out = net.rpn(&mut g, &weights.config.rpn, x)?;
    Ok((objectness(g.value(out.cls_logits))?, g.value(out.deltas).clone()))
}

/// Inference-only pass of one inception module stored under `prefix`.
pub fn inception_forward(x: &Tensor, cfg: &InceptionConfig, params: &ParamMap, prefix: &str) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut net = Network::new(params, Trainable::Nothing);
    let v = g.constant(x.clone());
    let y = net.inception(&mut g, cfg, prefix, v)?;
    Ok(g.value(y).clone())
}

/// Inference-only detector pass: class probabilities `[R, N + 1]` and offsets `[R, 4N]`.
pub fn detector_forward(pooled: &Tensor, weights: &ModelWeights) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let mut net = Network::new(&weights.params, Trainable::Nothing);
    let x = g.constant(pooled.clone());
    let out = net.detector(&mut g, &weights.config.detector, x)?;
    let probs = g.softmax(out.logits);
    Ok((g.value(probs).clone(), g.value(out.offsets).clone()))
}

/// Max-pools the part of `features [C, H, W]` under `roi` (feature-map
/// coordinates) onto an `out_h x out_w` grid.
pub fn roi_pool<T: Scalar>(features: &Tensor<T>, roi: &BBox, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let &[c, h, w] = features.shape() else {
        return Err(Error::dim("roi_pool", format!("expected [C, H, W], got {:?}", features.shape())));
    };
    let mut g = Graph::new();
    let x = g.constant(features.clone().reshape(&[1, c, h, w])?);
    let y = g.roi_pool(x, &[roi.as_array()], out_h, out_w)?;
    g.value(y).clone().reshape(&[c, out_h, out_w])
}
