//! Volumetric 1-shot inference: sectioned support/query pairing, optional
//! connected-component filtering, saved predictions and test-time training.

pub mod cca;
pub mod protocol;
pub mod ttt;

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Axis};
use ndarray_npy::{read_npy, write_npy};
use serde::{Deserialize, Serialize};

use crate::data::VolumeScan;
use crate::encoder::{encode, encode_batch, ModelState, SliceTriplet};
use crate::prototype::{assemble_prototype_set, mask_to_grid, HeadConfig, SupportFeatures};
use crate::resample::resize_bilinear;
use crate::similarity::segment_tensor;
use crate::{ClassId, Error, Result};

pub use cca::{component_confidence, connected_components, select_most_confident, ConnectedComponent, Connectivity};
pub use protocol::{balanced_partition, section_plan, support_reference_indices};
pub use ttt::{test_time_train, TttConfig, TttReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Number of sections `C` the class's slice range is cut into.
    pub sections: usize,
    /// Keep only the most confident connected component per slice.
    pub cca: bool,
    pub connectivity: Connectivity,
    /// Query slices encoded per forward pass.
    pub batch_size: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            sections: 3,
            cca: false,
            connectivity: Connectivity::Eight,
            batch_size: 4,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sections == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("sections and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Prediction for one class of one query volume, `H x W x Z` like the scan.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSegmentation {
    pub class: ClassId,
    pub scan_id: String,
    pub probability: Array3<f32>,
    /// Thresholded prediction before component filtering.
    pub raw: Array3<u8>,
    /// Final prediction (equal to `raw` when filtering is off).
    pub prediction: Array3<u8>,
    /// Query slices that were segmented.
    pub slices: Range<usize>,
}

fn resize_triplet(t: &SliceTriplet, size: (usize, usize)) -> SliceTriplet {
    t.map(|s| resize_bilinear(s.view(), size))
}

/// Nearest slice of `range` to `z` (searching outward) that contains `class`.
fn nearest_labeled(scan: &VolumeScan, class: ClassId, z: usize, range: &Range<usize>) -> Option<usize> {
    let has = |z: usize| scan.mask_slice(class, z).is_some_and(|m| m.iter().any(|&v| v != 0));
    (0..range.len()).find_map(|d| {
        [z.checked_sub(d), z.checked_add(d)]
            .into_iter()
            .flatten()
            .find(|&c| range.contains(&c) && has(c))
    })
}

/// Segments `class` in every query slice of its labeled range, one support
/// reference slice per section.
pub fn segment_volume(
    query: &VolumeScan,
    support: &VolumeScan,
    class: ClassId,
    state: &ModelState,
    head: &HeadConfig,
    cfg: &InferenceConfig,
) -> Result<VolumeSegmentation> {
    cfg.validate()?;
    if query.patient_id == support.patient_id {
        return Err(Error::SamePatient(query.patient_id.clone()));
    }
    let support_range = support.class_slice_range(class).ok_or_else(|| Error::ClassAbsent {
        class,
        patient: support.patient_id.clone(),
    })?;
    let (h, w, depth) = query.shape();
    let res = state.config.test_resolution;
    let mut probability = Array3::<f32>::zeros((h, w, depth));
    let mut raw = Array3::<u8>::zeros((h, w, depth));
    let mut prediction = Array3::<u8>::zeros((h, w, depth));
    let Some(query_range) = query.class_slice_range(class) else {
        return Ok(VolumeSegmentation {
            class,
            scan_id: query.patient_id.clone(),
            probability,
            raw,
            prediction,
            slices: 0..0,
        });
    };

    for (section, reference) in section_plan(query_range.clone(), support_range.clone(), cfg.sections) {
        let z_s = nearest_labeled(support, class, reference, &support_range).expect("support range contains the class");
        let feats = encode(&resize_triplet(&support.triplet(z_s), res), state)?;
        let grid = feats.grid();
        let mask = support.mask_slice(class, z_s).expect("class present in support");
        let masks = BTreeMap::from([(class, mask_to_grid(mask, grid))]);
        let set = assemble_prototype_set(
            &[SupportFeatures {
                features: &feats.values,
                masks: &masks,
            }],
            head,
        )?;

        let zs: Vec<usize> = section.collect();
        for chunk in zs.chunks(cfg.batch_size) {
            let triplets: Vec<SliceTriplet> = chunk
                .iter()
                .map(|&z| resize_triplet(&query.triplet(z), res))
                .collect();
            let refs: Vec<&SliceTriplet> = triplets.iter().collect();
            let qfeats = encode_batch(state, &refs)?;
            for (&z, qf) in chunk.iter().zip(&qfeats) {
                let probs = segment_tensor(&set, &qf.values.detach(), (h, w))?;
                let fg = crate::ops::tensor_to_array2(&probs.get(1)?)?;
                let bin = fg.mapv(|p| (p > 0.5) as u8);
                let kept = if cfg.cca {
                    select_most_confident(bin.view(), fg.view(), cfg.connectivity)?
                } else {
                    bin.clone()
                };
                probability.index_axis_mut(Axis(2), z).assign(&fg);
                raw.index_axis_mut(Axis(2), z).assign(&bin);
                prediction.index_axis_mut(Axis(2), z).assign(&kept);
            }
        }
    }
    Ok(VolumeSegmentation {
        class,
        scan_id: query.patient_id.clone(),
        probability,
        raw,
        prediction,
        slices: query_range,
    })
}

/// Applies component filtering slice by slice to an existing segmentation.
pub fn apply_cca(seg: &VolumeSegmentation, connectivity: Connectivity) -> Result<Array3<u8>> {
    let mut out = Array3::zeros(seg.raw.dim());
    for z in 0..seg.raw.dim().2 {
        let kept = select_most_confident(
            seg.raw.index_axis(Axis(2), z),
            seg.probability.index_axis(Axis(2), z),
            connectivity,
        )?;
        out.index_axis_mut(Axis(2), z).assign(&kept);
    }
    Ok(out)
}

/// Saved predictions keyed by class and scan, as `.npy` volumes under
/// `class_{id}/{scan}_{raw|final}.npy`.
#[derive(Clone, Debug)]
pub struct PredictionStore {
    root: PathBuf,
}

impl PredictionStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        PredictionStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, class: ClassId, scan: &str, post_cca: bool) -> PathBuf {
        let kind = if post_cca { "final" } else { "raw" };
        self.root.join(format!("class_{}", class.0)).join(format!("{scan}_{kind}.npy"))
    }

    pub fn put(&self, seg: &VolumeSegmentation) -> Result<()> {
        let dir = self.root.join(format!("class_{}", seg.class.0));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (post, arr) in [(false, &seg.raw), (true, &seg.prediction)] {
            let p = self.path(seg.class, &seg.scan_id, post);
            write_npy(&p, arr).map_err(|e| Error::ArrayFile {
                path: p.clone(),
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn get(&self, class: ClassId, scan: &str, post_cca: bool) -> Result<Option<Array3<u8>>> {
        let p = self.path(class, scan, post_cca);
        if !p.exists() {
            return Ok(None);
        }
        read_npy(&p).map(Some).map_err(|e| Error::ArrayFile {
            path: p,
            message: e.to_string(),
        })
    }

    /// All stored `(class, scan)` pairs, sorted.
    pub fn entries(&self) -> Result<Vec<(ClassId, String)>> {
        let mut out = Vec::new();
        let Ok(classes) = std::fs::read_dir(&self.root) else {
            return Ok(out);
        };
        for dir in classes.flatten() {
            let name = dir.file_name().to_string_lossy().into_owned();
            let Some(id) = name.strip_prefix("class_").and_then(|s| s.parse::<u16>().ok()) else {
                continue;
            };
            for f in std::fs::read_dir(dir.path()).map_err(|e| Error::io(dir.path(), e))?.flatten() {
                let file = f.file_name().to_string_lossy().into_owned();
                if let Some(scan) = file.strip_suffix("_final.npy") {
                    out.push((ClassId(id), scan.to_string()));
                }
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.entries()?.is_empty())
    }
}

/// Binary slice `z` of a stored volume.
pub fn stored_slice(volume: &Array3<u8>, z: usize) -> Array2<u8> {
    volume.slice(s![.., .., z]).to_owned()
}
