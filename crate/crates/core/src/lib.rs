//! Region-based convolutional detector for leaf-disease localisation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode differentiation tape.
//! - [`boxgeom`]: boxes, IoU, anchors, box-delta coding and NMS.
//! - [`model`]: VGG-style backbone, region proposal network, ROI pooling and
//!   the inception-based detector head, plus the weight file format.
//! - [`data`]: VOC-style annotations, image I/O, splits, synthetic corpora, blur.
//! - [`training`]: target assignment, losses, Adam and the four-step
//!   alternating schedule.
//! - [`eval`]: matching, precision/recall/F2, AP/mAP, confusion matrices and
//!   per-class score-threshold selection.

pub mod boxgeom;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

/// Independent RNG seed for the stream labelled `label` under a run seed.
pub(crate) fn derive_seed(seed: u64, label: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(label.as_bytes());
    seed ^ u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}
