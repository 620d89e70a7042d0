//! Few-shot segmentation of volumetric medical scans with adaptive local
//! prototypes.
//!
//! The pipeline is split into the same stages a user drives from the CLI:
//!
//! - [`data`]: NIfTI ingestion, slice extraction, superpixel pseudo-labels,
//!   augmentation and episode sampling.
//! - [`encoder`]: pluggable dense feature extractors (a dilated CNN and a ViT
//!   with optional low-rank adapters) plus the 1x1 slice adapter.
//! - [`prototype`] and [`similarity`]: local/global prototype pooling, scaled
//!   cosine similarity, per-class fusion and probability normalization.
//! - [`training`]: segmentation and alignment losses, SGD, episodic loop.
//! - [`inference`]: connected-component confidence filtering, the sectioned
//!   volume protocol and test-time training.
//! - [`evaluation`]: Dice scoring, experiment orchestration and reporting.

pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod ops;
pub mod prototype;
pub mod resample;
pub mod similarity;
pub mod training;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use config::RunConfig;
pub use data::{Episode, Modality, SliceSample, SuperpixelMap, VolumeScan};
pub use encoder::{EncoderConfig, FeatureMap, ModelState};
pub use error::{Error, Result};
pub use prototype::{PoolingWindow, Prototype, PrototypeSet};
pub use similarity::SegmentationResult;

/// Integer label of an anatomical (or pseudo) class. `0` is background.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u16);

impl ClassId {
    pub const BACKGROUND: ClassId = ClassId(0);

    pub fn is_background(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Label attached to superpixel pseudo-classes during self-supervised training.
pub const PSEUDO_CLASS: ClassId = ClassId(u16::MAX);
