use std::path::{Path, PathBuf};

use leafdet_core::data::{default_synth_classes, SplitRatios};
use leafdet_core::model::InferenceParams;
use leafdet_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a command can be told, as read from `--config <file.json>`.
/// Missing keys take their defaults; unknown keys are an error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Corpus root: `manifest.csv`, `images/`, `annotations/`.
    pub dataset: PathBuf,
    /// Directory for weights, logs and reports.
    pub output: PathBuf,
    /// Weight file; `<output>/model.ircn` when unset.
    pub weights: Option<PathBuf>,
    pub prepare: PrepareConfig,
    pub train: TrainConfig,
    pub inference: InferenceParams,
    pub evaluation: EvaluationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: "data".into(),
            output: "out".into(),
            weights: None,
            prepare: PrepareConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceParams::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepareConfig {
    /// Existing corpus (`images/` + `annotations/`) to copy and split.
    /// When unset a synthetic corpus is generated.
    pub source: Option<PathBuf>,
    pub synthetic_images: usize,
    /// Synthetic class names; `synthetic_0..` when empty.
    pub classes: Vec<String>,
    pub synthetic_classes: usize,
    pub image_size: usize,
    pub ratios: SplitRatios,
    pub seed: u64,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            source: None,
            synthetic_images: 30,
            classes: Vec::new(),
            synthetic_classes: 3,
            image_size: 256,
            ratios: SplitRatios::default(),
            seed: 0,
        }
    }
}

impl PrepareConfig {
    pub fn class_names(&self) -> Vec<String> {
        if self.classes.is_empty() {
            default_synth_classes(self.synthetic_classes)
        } else {
            self.classes.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub iou_threshold: f32,
    /// Score cut for classes without an optimised threshold, and for
    /// `detect` when no table is available.
    pub score_threshold: f64,
    /// Threshold table written by `optimize`; `<output>/thresholds.csv` is
    /// used when unset and present.
    pub thresholds: Option<PathBuf>,
    /// Also evaluate on Gaussian-blurred copies of the test images.
    pub blur_sigma: Option<f32>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig { iou_threshold: 0.5, score_threshold: 0.5, thresholds: None, blur_sigma: None }
    }
}

/// Flag values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub blur_sigma: Option<f32>,
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub weights: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Defaults, then the optional file, then the flags.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match file {
            Some(p) => Self::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = flags.seed {
            cfg.prepare.seed = seed;
            cfg.train.seed = seed;
        }
        if let Some(e) = flags.epochs {
            cfg.train.epochs = e;
        }
        if let Some(lr) = flags.lr {
            cfg.train.learning_rate = lr;
        }
        if let Some(s) = flags.blur_sigma {
            cfg.evaluation.blur_sigma = Some(s);
        }
        if let Some(d) = &flags.dataset {
            cfg.dataset = d.clone();
        }
        if let Some(o) = &flags.output {
            cfg.output = o.clone();
        }
        if let Some(w) = &flags.weights {
            cfg.weights = Some(w.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.prepare.ratios.validate()?;
        self.train.validate()?;
        let p = &self.prepare;
        if p.source.is_none() {
            if p.synthetic_images == 0 {
                return Err(param("prepare.synthetic_images", "must be at least 1"));
            }
            if p.class_names().is_empty() {
                return Err(param("prepare.synthetic_classes", "must be at least 1"));
            }
            if p.image_size < 16 {
                return Err(param("prepare.image_size", "must be at least 16"));
            }
        }
        let e = &self.evaluation;
        if !(e.iou_threshold > 0.0 && e.iou_threshold <= 1.0) {
            return Err(param("evaluation.iou_threshold", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&e.score_threshold) {
            return Err(param("evaluation.score_threshold", "must lie in [0, 1]"));
        }
        if let Some(s) = e.blur_sigma {
            if !(s.is_finite() && s > 0.0) {
                return Err(param("evaluation.blur_sigma", "must be positive"));
            }
        }
        let i = &self.inference;
        if !(0.0..=1.0).contains(&i.score_threshold) {
            return Err(param("inference.score_threshold", "must lie in [0, 1]"));
        }
        if !(i.nms_iou > 0.0 && i.nms_iou <= 1.0) {
            return Err(param("inference.nms_iou", "must lie in (0, 1]"));
        }
        if i.max_detections == 0 {
            return Err(param("inference.max_detections", "must be at least 1"));
        }
        Ok(())
    }

    pub fn weights_path(&self) -> PathBuf {
        self.weights.clone().unwrap_or_else(|| self.output.join("model.ircn"))
    }
}

fn param(name: &str, detail: &str) -> CliError {
    CliError::Usage(format!("invalid parameter `{name}`: {detail}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_and_file_beats_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"train": {"epochs": 7, "learning_rate": 0.01}, "output": "o"}"#).unwrap();
        let cfg = RunConfig::resolve(Some(&path), &Overrides { epochs: Some(3), ..Default::default() }).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.train.dropout, 0.5);
        assert_eq!(cfg.weights_path(), PathBuf::from("o/model.ircn"));
    }

    #[test]
    fn unknown_keys_and_bad_ratios_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"trian": {}}"#).unwrap();
        assert!(RunConfig::resolve(Some(&path), &Overrides::default()).is_err());
        std::fs::write(&path, r#"{"prepare": {"ratios": {"train": 0.8, "val": 0.2, "test": 0.1}}}"#).unwrap();
        let err = RunConfig::resolve(Some(&path), &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("ratios"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }
}
