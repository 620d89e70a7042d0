//! Dataset ingestion and self-supervised episode construction.

pub mod augment;
pub mod cache;
pub mod episode;
pub mod manifest;
pub mod slices;
pub mod superpixel;
pub mod synth;
pub mod volume;

pub use augment::{AugmentationSpec, ElasticSpec, GeometricSpec, GeometricTransform, IntensitySpec, IntensityTransform};
pub use cache::{cache_root, prepare_dataset, PreparedDataset, PreparedScan, PreprocessParams};
pub use episode::{filter_setting2, sample_training_episode, setting2_pool, test_class_pixels, Episode, Shot};
pub use manifest::{Manifest, ScanEntry};
pub use slices::{reformat_and_resize, SliceSample};
pub use superpixel::{generate_superpixels, FelzenszwalbParams, SuperpixelCache, SuperpixelMap};
pub use synth::{synth_scan, write_synth_dataset, SynthSpec};
pub use volume::{load_volume, write_nifti_volume, ClassCatalog, ClassInfo, IntensityNormalization, Modality, VolumeScan};
