//! Per-identity appearance model: patches, augmentation, training buffers
//! and the online identity classifier.

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod buffer;
pub mod classifier;
pub mod patch;

pub use buffer::{BufferEntry, TrainBuffer, DEFAULT_BUFFER_SIZE};
pub use classifier::{
    adam_update, softmax_in_place, AdamParams, AppearanceModel, ClassifierConfig, LinearSoftmax, Sample,
};
pub use patch::{augment, featurize, patch_origin, AugmentationOp, Mask, Patch, PooledPatch, FEATURE_DIM, PATCH_SIZE};

/// Classifier category: a tracked identity or the shared background class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Background,
    Identity(u64),
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Background => f.write_str("background"),
            Label::Identity(id) => write!(f, "identity {id}"),
        }
    }
}
