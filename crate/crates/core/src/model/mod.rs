//! Network definitions: VGG-style backbone, region proposal network, ROI
//! pooling and the inception-based detector head.
//!
//! Every learnable array is addressed by a dotted name (`backbone.conv3_2.weight`,
//! `rpn.cls.bias`, `head.inc1.b3.weight`, ...). [`ModelConfig::parameter_shapes`]
//! walks the configuration and lists them in a fixed order; weight
//! initialisation, counting and the weight file all follow that walk.

mod inference;
mod network;
mod proposals;
mod weights;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use inference::{detect, detect_batch, InferenceParams};
pub use network::{
    backbone_forward, detector_forward, inception_forward, objectness, roi_pool, rpn_forward, DetectorOutput,
    Network, RpnOutput, Trainable,
};
pub use proposals::{anchors_for, propose_regions, Proposal, ProposalParams};
pub use weights::{count_parameters, read_weight_file, write_weight_file, ModelWeights, ParamMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Number of 3x3 same-padded convolutions.
    pub convs: usize,
    pub channels: usize,
    /// Whether a 2x2 stride-2 max pool closes the stage.
    pub pool: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_size: usize,
    pub stages: Vec<StageConfig>,
}

impl BackboneConfig {
    fn vgg(convs: [usize; 5]) -> Self {
        let widths = [64, 128, 256, 512, 512];
        let stages = convs
            .iter()
            .zip(widths)
            .enumerate()
            // the fifth pool is replaced by ROI pooling
            .map(|(i, (&convs, channels))| StageConfig { convs, channels, pool: i < 4 })
            .collect();
        BackboneConfig { input_size: 256, stages }
    }

    /// The 13-convolution VGG16 stack without its fully connected layers or final pool.
    pub fn vgg16() -> Self {
        Self::vgg([2, 2, 3, 3, 3])
    }

    pub fn vgg19() -> Self {
        Self::vgg([2, 2, 4, 4, 4])
    }

    /// Same topology with every stage `divisor` times narrower.
    pub fn width_divided(&self, divisor: usize) -> Self {
        let stages = self
            .stages
            .iter()
            .map(|s| StageConfig { channels: (s.channels / divisor).max(1), ..s.clone() })
            .collect();
        BackboneConfig { input_size: self.input_size, stages }
    }

    pub fn stride(&self) -> usize {
        1 << self.stages.iter().filter(|s| s.pool).count()
    }

    pub fn feature_size(&self) -> usize {
        self.input_size / self.stride()
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(3, |s| s.channels)
    }

    /// `(name, in_channels, out_channels)` for every convolution, in order.
    pub fn conv_layers(&self) -> Vec<(String, usize, usize)> {
        let mut cin = 3;
        let mut layers = vec![];
        for (s, stage) in self.stages.iter().enumerate() {
            for i in 0..stage.convs {
                layers.push((format!("conv{}_{}", s + 1, i + 1), cin, stage.channels));
                cin = stage.channels;
            }
        }
        layers
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.stages.iter().any(|s| s.convs == 0 || s.channels == 0) {
            return Err(Error::param("backbone.stages", "need at least one stage with positive conv count and width"));
        }
        if self.input_size == 0 || self.input_size % self.stride() != 0 {
            return Err(Error::param(
                "backbone.input_size",
                format!("{} is not divisible by the total downsampling {}", self.input_size, self.stride()),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RpnConfig {
    /// Filters in each of the two shared 3x3 layers.
    pub channels: usize,
    /// Anchor side lengths in pixels (anchor area is the square).
    pub anchor_scales: Vec<f32>,
    /// Width / height ratios.
    pub anchor_ratios: Vec<f32>,
}

impl RpnConfig {
    /// Anchors per feature-map cell.
    pub fn k(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }
}

/// Branch widths of one inception module: `1x1`, `1x1 -> 3x3`, `1x1 -> 5x5`
/// and `3x3 max pool -> 1x1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InceptionConfig {
    pub b1: usize,
    pub b2_reduce: usize,
    pub b2: usize,
    pub b3_reduce: usize,
    pub b3: usize,
    pub b4: usize,
}

impl InceptionConfig {
    pub fn out_channels(&self) -> usize {
        self.b1 + self.b2 + self.b3 + self.b4
    }

    /// `(suffix, in, out, kernel)` for each convolution of a module fed `cin` channels.
    pub fn convs(&self, cin: usize) -> [(&'static str, usize, usize, usize); 6] {
        [
            ("b1", cin, self.b1, 1),
            ("b2_reduce", cin, self.b2_reduce, 1),
            ("b2", self.b2_reduce, self.b2, 3),
            ("b3_reduce", cin, self.b3_reduce, 1),
            ("b3", self.b3_reduce, self.b3, 5),
            ("b4", cin, self.b4, 1),
        ]
    }

    pub fn width_divided(&self, d: usize) -> Self {
        let f = |v: usize| (v / d).max(1);
        InceptionConfig {
            b1: f(self.b1),
            b2_reduce: f(self.b2_reduce),
            b2: f(self.b2),
            b3_reduce: f(self.b3_reduce),
            b3: f(self.b3),
            b4: f(self.b4),
        }
    }
}

impl Default for InceptionConfig {
    fn default() -> Self {
        InceptionConfig { b1: 128, b2_reduce: 64, b2: 128, b3_reduce: 32, b3: 64, b4: 64 }
    }
}

/// Layers between the pooled ROI features and the two sibling outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HeadConfig {
    /// Inception modules, then one fully connected layer with dropout.
    Inception { modules: Vec<InceptionConfig>, fc_units: usize },
    /// Stacked fully connected layers with dropout after each.
    FullyConnected { units: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    /// Side of the square ROI pooling grid.
    pub roi_size: usize,
    pub head: HeadConfig,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub rpn: RpnConfig,
    pub detector: DetectorConfig,
    /// Foreground classes; the classifier adds one background column.
    pub num_classes: usize,
}

impl ModelConfig {
    /// Full-width network: VGG16 features, 512-wide RPN, two inception
    /// modules and a 1024-unit layer.
    pub fn full(num_classes: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig::vgg16(),
            rpn: RpnConfig {
                channels: 512,
                anchor_scales: vec![60.0, 120.0, 240.0],
                anchor_ratios: vec![0.5, 1.0, 2.0],
            },
            detector: DetectorConfig {
                roi_size: 7,
                head: HeadConfig::Inception { modules: vec![InceptionConfig::default(); 2], fc_units: 1024 },
                dropout: 0.5,
            },
            num_classes,
        }
    }

    /// The same network with the classifier swapped for two 4096-unit layers.
    pub fn full_fc_head(num_classes: usize) -> Self {
        let mut config = Self::full(num_classes);
        config.detector.head = HeadConfig::FullyConnected { units: vec![4096, 4096] };
        config
    }

    /// Every layer `divisor` times narrower; spatial contracts unchanged.
    pub fn width_divided(&self, divisor: usize) -> Self {
        let head = match &self.detector.head {
            HeadConfig::Inception { modules, fc_units } => HeadConfig::Inception {
                modules: modules.iter().map(|m| m.width_divided(divisor)).collect(),
                fc_units: (fc_units / divisor).max(1),
            },
            HeadConfig::FullyConnected { units } => {
                HeadConfig::FullyConnected { units: units.iter().map(|u| (u / divisor).max(1)).collect() }
            }
        };
        ModelConfig {
            backbone: self.backbone.width_divided(divisor),
            rpn: RpnConfig { channels: (self.rpn.channels / divisor).max(1), ..self.rpn.clone() },
            detector: DetectorConfig { head, ..self.detector.clone() },
            num_classes: self.num_classes,
        }
    }

    /// Desk-scale network: [`ModelConfig::full`] at one eighth of the width.
    pub fn desk(num_classes: usize) -> Self {
        Self::full(num_classes).width_divided(8)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_classes == 0 {
            return Err(Error::param("num_classes", "must be at least 1"));
        }
        if self.rpn.k() == 0 || self.rpn.channels == 0 {
            return Err(Error::param("rpn", "needs anchors and positive width"));
        }
        if self.detector.roi_size == 0 || !(0.0..1.0).contains(&self.detector.dropout) {
            return Err(Error::param("detector", "roi_size must be positive and dropout in [0, 1)"));
        }
        match &self.detector.head {
            HeadConfig::Inception { modules, fc_units } if modules.is_empty() || *fc_units == 0 => {
                Err(Error::param("detector.head", "inception head needs modules and fc units"))
            }
            HeadConfig::FullyConnected { units } if units.is_empty() || units.contains(&0) => {
                Err(Error::param("detector.head", "fully connected head needs positive layer widths"))
            }
            _ => Ok(()),
        }
    }

    /// Every parameter name and shape, backbone first, then RPN, then head.
    /// Convolution kernels are `[out, in, kh, kw]`, fully connected weights `[in, out]`.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = vec![];
        let mut conv = |name: String, cin: usize, cout: usize, k: usize| {
            shapes.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            shapes.push((format!("{name}.bias"), vec![cout]));
        };
        for (name, cin, cout) in self.backbone.conv_layers() {
            conv(format!("backbone.{name}"), cin, cout, 3);
        }
        let feat = self.backbone.out_channels();
        let (rc, k) = (self.rpn.channels, self.rpn.k());
        conv("rpn.conv1".into(), feat, rc, 3);
        conv("rpn.conv2".into(), rc, rc, 3);
        conv("rpn.cls".into(), rc, 2 * k, 1);
        conv("rpn.reg".into(), rc, 4 * k, 1);

        let cells = self.detector.roi_size * self.detector.roi_size;
        let mut fc_layers: Vec<(String, usize, usize)> = vec![];
        let last = match &self.detector.head {
            HeadConfig::Inception { modules, fc_units } => {
                let mut cin = feat;
                for (m, module) in modules.iter().enumerate() {
                    for (suffix, i, o, k) in module.convs(cin) {
                        conv(format!("head.inc{}.{suffix}", m + 1), i, o, k);
                    }
                    cin = module.out_channels();
                }
                fc_layers.push(("head.fc".into(), cin * cells, *fc_units));
                *fc_units
            }
            HeadConfig::FullyConnected { units } => {
                let mut din = feat * cells;
                for (i, &u) in units.iter().enumerate() {
                    fc_layers.push((format!("head.fc{}", i + 1), din, u));
                    din = u;
                }
                din
            }
        };
        fc_layers.push(("head.cls".into(), last, self.num_classes + 1));
        fc_layers.push(("head.reg".into(), last, 4 * self.num_classes));
        for (name, din, dout) in fc_layers {
            shapes.push((format!("{name}.weight"), vec![din, dout]));
            shapes.push((format!("{name}.bias"), vec![dout]));
        }
        shapes
    }

    /// Total scalar count from the layer walk, without allocating weights.
    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Parameter count of one group (see [`ParamGroup`]).
    pub fn group_parameter_count(&self, group: ParamGroup) -> usize {
        self.parameter_shapes()
            .iter()
            .filter(|(n, _)| ParamGroup::of(n) == Some(group))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Parameter ownership used by the alternating schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    Rpn,
    Head,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<ParamGroup> {
        match name.split('.').next()? {
            "backbone" => Some(ParamGroup::Backbone),
            "rpn" => Some(ParamGroup::Rpn),
            "head" => Some(ParamGroup::Head),
            _ => None,
        }
    }
}
