use serde::{Deserialize, Serialize};

use super::ImageDetections;
use crate::data::ClassMap;
use crate::error::{Error, Result};

/// Score thresholds 0.1, 0.2, ..., 0.9.
pub fn threshold_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// Index of the chosen threshold: start at the first entry and move only on
/// strict improvement, so ties keep the earlier threshold.
pub fn choose_threshold(accuracy: &[f64]) -> Option<usize> {
    let mut best = 0;
    for (i, &a) in accuracy.iter().enumerate().skip(1) {
        if a > accuracy[best] {
            best = i;
        }
    }
    (!accuracy.is_empty()).then_some(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub class: String,
    /// Accuracy at each grid threshold; `None` when the class has no
    /// validation image.
    pub accuracy: Option<Vec<f64>>,
    pub best: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub grid: Vec<f64>,
    pub rows: Vec<ThresholdRow>,
}

impl ThresholdTable {
    /// Builds the table from accuracy rows given directly (one per class).
    pub fn from_accuracy(grid: Vec<f64>, rows: Vec<(String, Option<Vec<f64>>)>) -> Result<Self> {
        let rows = rows
            .into_iter()
            .map(|(class, acc)| {
                if let Some(a) = &acc {
                    if a.len() != grid.len() {
                        return Err(Error::Validation(format!("{class}: {} values for {} thresholds", a.len(), grid.len())));
                    }
                }
                let best = acc.as_deref().and_then(choose_threshold).map(|i| grid[i]);
                Ok(ThresholdRow { class, accuracy: acc, best })
            })
            .collect::<Result<_>>()?;
        Ok(ThresholdTable { grid, rows })
    }

    /// Chosen threshold per class id; classes without one fall back to `default`.
    pub fn per_class(&self, default: f64) -> Vec<f64> {
        self.rows.iter().map(|r| r.best.unwrap_or(default)).collect()
    }
}

/// Fraction of the images containing `class` whose highest-scoring detection
/// at or above `threshold` carries that class. An image with no detection
/// above the threshold counts as wrong. `None` when no image contains the class.
pub fn classification_accuracy(images: &[ImageDetections], class: usize, threshold: f64) -> Option<f64> {
    let relevant: Vec<&ImageDetections> =
        images.iter().filter(|img| img.ground_truth.iter().any(|g| g.class_id == class)).collect();
    if relevant.is_empty() {
        return None;
    }
    let correct = relevant
        .iter()
        .filter(|img| {
            img.detections
                .iter()
                .filter(|d| d.score as f64 >= threshold)
                .max_by(|a, b| a.score.total_cmp(&b.score).then(b.class_id.cmp(&a.class_id)))
                .is_some_and(|d| d.class_id == class)
        })
        .count();
    Some(correct as f64 / relevant.len() as f64)
}

/// Sweeps `grid` for every class on validation detections and picks each
/// class's threshold with [`choose_threshold`].
pub fn optimize_thresholds(images: &[ImageDetections], classes: &ClassMap, grid: &[f64]) -> Result<ThresholdTable> {
    if images.is_empty() {
        return Err(Error::Contract("threshold optimisation needs at least one validation image".into()));
    }
    let rows = (0..classes.len())
        .map(|c| {
            let acc: Option<Vec<f64>> = grid.iter().map(|&t| classification_accuracy(images, c, t)).collect();
            (classes.names()[c].clone(), acc)
        })
        .collect();
    ThresholdTable::from_accuracy(grid.to_vec(), rows)
}
