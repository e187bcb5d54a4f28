//! Annotations, images, dataset splits, synthetic corpora and blur.

mod blur;
mod corpus;
mod image;
mod split;
mod synth;
mod voc;

use serde::{Deserialize, Serialize};

use crate::boxgeom::BBox;
use crate::error::{Error, Result};

pub use blur::{blur_image, gaussian_kernel};
pub use corpus::{
    annotation_path, build_manifest, read_annotations, read_manifest, write_manifest, write_synthetic_corpus,
    Corpus, ManifestRow, Sample, Split, ANNOTATION_DIR, IMAGE_DIR, MANIFEST,
};
pub use image::{decode_ppm, encode_ppm, load_and_resize, load_image, resize_bilinear, save_ppm};
pub use split::{split_counts, split_dataset, DatasetSplit, SplitRatios};
pub use synth::{default_synth_classes, synth_dataset, SynthImage};
pub use voc::{parse_voc_xml, write_voc_xml, AnnotatedObject, AnnotationRecord};

/// A labelled ground-truth box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_id: usize,
    pub bbox: BBox,
}

/// Bijection between class ids `0..N` and names. Id `N` is background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap {
    names: Vec<String>,
}

impl ClassMap {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Validation("at least one class is required".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.trim().is_empty() {
                return Err(Error::Validation(format!("class {i} has an empty name")));
            }
            if names[..i].contains(n) {
                return Err(Error::Validation(format!("class name `{n}` appears twice")));
            }
        }
        Ok(ClassMap { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn background_id(&self) -> usize {
        self.names.len()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Name for `id`; the background id maps to `"background"`.
    pub fn name(&self, id: usize) -> Option<&str> {
        match id.cmp(&self.names.len()) {
            std::cmp::Ordering::Less => Some(&self.names[id]),
            std::cmp::Ordering::Equal => Some("background"),
            std::cmp::Ordering::Greater => None,
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_map_is_a_bijection_with_background_last() {
        let m = ClassMap::new(vec!["a".into(), "b".into()]).unwrap();
        for id in 0..2 {
            assert_eq!(m.id(m.name(id).unwrap()), Some(id));
        }
        assert_eq!(m.background_id(), 2);
        assert_eq!(m.name(2), Some("background"));
        assert_eq!(m.name(3), None);
        assert!(ClassMap::new(vec!["a".into(), "a".into()]).is_err());
        assert!(ClassMap::new(vec![" ".into()]).is_err());
    }
}
