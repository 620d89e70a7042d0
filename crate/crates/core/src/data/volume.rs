use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, Axis, Ix3};
use nifti::{IntoNdArray, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use crate::data::manifest::ScanEntry;
use crate::encoder::SliceTriplet;
use crate::{ClassId, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Modality {
    Ct,
    Mri,
    Synth,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: ClassId,
    pub name: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassCatalog {
    pub classes: Vec<ClassInfo>,
}

impl ClassCatalog {
    pub fn new(classes: impl IntoIterator<Item = (u16, &'static str)>) -> Self {
        ClassCatalog {
            classes: classes
                .into_iter()
                .map(|(id, name)| ClassInfo {
                    id: ClassId(id),
                    name: name.to_string(),
                })
                .collect(),
        }
    }

    pub fn contains(&self, id: ClassId) -> bool {
        self.classes.iter().any(|c| c.id == id)
    }

    pub fn name(&self, id: ClassId) -> Option<&str> {
        self.classes
            .iter()
            .find(|c| c.id == id)
            .map(|c| c.name.as_str())
    }

    /// Resolves a class by name (case-insensitive) or numeric id.
    pub fn resolve(&self, key: &str) -> Option<ClassId> {
        self.classes
            .iter()
            .find(|c| c.name.eq_ignore_ascii_case(key))
            .map(|c| c.id)
            .or_else(|| {
                key.parse::<u16>()
                    .ok()
                    .map(ClassId)
                    .filter(|id| self.contains(*id))
            })
    }

    pub fn ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.classes.iter().map(|c| c.id)
    }
}

/// Intensity windows applied at load time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityNormalization {
    /// CT clip window in Hounsfield units.
    pub ct_window: [f32; 2],
    /// MRI clip window as lower/upper percentiles of the volume.
    pub mri_percentiles: [f32; 2],
}

impl Default for IntensityNormalization {
    fn default() -> Self {
        IntensityNormalization {
            ct_window: [-275.0, 125.0],
            mri_percentiles: [0.5, 99.5],
        }
    }
}

/// A 3D intensity volume (`H x W x Z`, axial slices along the last axis)
/// with one binary mask per catalog class.
#[derive(Clone, Debug)]
pub struct VolumeScan {
    pub voxels: Array3<f32>,
    pub masks: BTreeMap<ClassId, Array3<u8>>,
    pub patient_id: String,
    pub modality: Modality,
}

fn standard<T: Clone>(a: Array3<T>) -> Array3<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

impl VolumeScan {
    pub fn new(
        voxels: Array3<f32>,
        masks: BTreeMap<ClassId, Array3<u8>>,
        patient_id: impl Into<String>,
        modality: Modality,
    ) -> Result<Self> {
        for (class, mask) in &masks {
            if mask.dim() != voxels.dim() {
                return Err(Error::ShapeMismatch(format!(
                    "mask for class {class} has shape {:?}, volume has {:?}",
                    mask.dim(),
                    voxels.dim()
                )));
            }
            if mask.iter().any(|&v| v > 1) {
                return Err(Error::InvalidInput(format!(
                    "mask for class {class} is not binary"
                )));
            }
        }
        Ok(VolumeScan {
            voxels: standard(voxels),
            masks: masks.into_iter().map(|(c, m)| (c, standard(m))).collect(),
            patient_id: patient_id.into(),
            modality,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.voxels.dim()
    }

    pub fn depth(&self) -> usize {
        self.voxels.dim().2
    }

    pub fn mask(&self, class: ClassId) -> Option<&Array3<u8>> {
        self.masks.get(&class)
    }

    pub fn slice(&self, z: usize) -> ArrayView2<'_, f32> {
        self.voxels.index_axis(Axis(2), z)
    }

    pub fn mask_slice(&self, class: ClassId, z: usize) -> Option<ArrayView2<'_, u8>> {
        self.masks.get(&class).map(|m| m.index_axis(Axis(2), z))
    }

    /// Slices `z-1, z, z+1`, replicating the edge slice at volume boundaries.
    pub fn triplet(&self, z: usize) -> SliceTriplet {
        let last = self.depth() - 1;
        SliceTriplet::new([
            self.slice(z.saturating_sub(1)).to_owned(),
            self.slice(z).to_owned(),
            self.slice((z + 1).min(last)).to_owned(),
        ])
    }

    /// Half-open range of axial slices containing at least one voxel of `class`.
    pub fn class_slice_range(&self, class: ClassId) -> Option<Range<usize>> {
        let mask = self.masks.get(&class)?;
        let present: Vec<usize> = (0..self.depth())
            .filter(|&z| mask.slice(s![.., .., z]).iter().any(|&v| v != 0))
            .collect();
        Some(*present.first()?..present.last()? + 1)
    }
}

/// Clips and rescales intensities to `[0, 1]` according to the modality.
pub fn normalize_intensity(voxels: &mut Array3<f32>, modality: Modality, norm: &IntensityNormalization) {
    let (lo, hi) = match modality {
        Modality::Ct => (norm.ct_window[0], norm.ct_window[1]),
        Modality::Mri => {
            let mut values: Vec<f32> = voxels.iter().copied().collect();
            values.sort_by(|a, b| a.total_cmp(b));
            (
                percentile(&values, norm.mri_percentiles[0]),
                percentile(&values, norm.mri_percentiles[1]),
            )
        }
        Modality::Synth => {
            let lo = voxels.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = voxels.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            (lo, hi)
        }
    };
    let range = hi - lo;
    voxels.mapv_inplace(|v| {
        if range > 0.0 {
            (v.clamp(lo, hi) - lo) / range
        } else {
            0.0
        }
    });
}

/// Linear-interpolated percentile of sorted data (`q` in percent).
fn percentile(sorted: &[f32], q: f32) -> f32 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = (q as f64 / 100.0) * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    let t = pos - i as f64;
    (sorted[i] as f64 * (1.0 - t) + sorted[j] as f64 * t) as f32
}

pub fn read_nifti_volume(path: &Path) -> Result<Array3<f32>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let nifti_err = |e: nifti::NiftiError| Error::Nifti {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let obj = ReaderOptions::new().read_file(path).map_err(nifti_err)?;
    let data = obj.into_volume().into_ndarray::<f32>().map_err(nifti_err)?;
    let data = match data.ndim() {
        3 => data,
        // trailing singleton dimensions (e.g. 4D with one frame)
        n if n > 3 && data.shape()[3..].iter().all(|&d| d == 1) => {
            let shape = data.shape()[..3].to_vec();
            data.into_shape_with_order(shape).map_err(|e| Error::Nifti {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
        }
        n => {
            return Err(Error::Nifti {
                path: path.to_path_buf(),
                message: format!("expected a 3D volume, found {n} dimensions"),
            })
        }
    };
    data.into_dimensionality::<Ix3>().map_err(|e| Error::Nifti {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Element types that can be written as NIfTI voxels.
pub trait NiftiScalar: Sized {
    fn write(path: &Path, data: &Array3<Self>) -> nifti::Result<()>;
}

macro_rules! nifti_scalar {
    ($($t:ty),*) => {$(
        impl NiftiScalar for $t {
            fn write(path: &Path, data: &Array3<Self>) -> nifti::Result<()> {
                nifti::writer::WriterOptions::new(path).write_nifti(data)
            }
        }
    )*};
}

nifti_scalar!(f32, u8, u16);

pub fn write_nifti_volume<T: NiftiScalar>(path: &Path, data: &Array3<T>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    T::write(path, data).map_err(|e| Error::Nifti {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Splits an integer label volume into one binary mask per catalog class.
pub fn split_labels(
    labels: &Array3<f32>,
    catalog: &super::ClassCatalog,
) -> Result<BTreeMap<ClassId, Array3<u8>>> {
    let mut masks: BTreeMap<ClassId, Array3<u8>> = catalog
        .ids()
        .map(|id| (id, Array3::zeros(labels.dim())))
        .collect();
    for (idx, &v) in labels.indexed_iter() {
        let id = v.round();
        if id == 0.0 {
            continue;
        }
        if id < 0.0 || id > u16::MAX as f32 {
            return Err(Error::UnknownClass(u16::MAX));
        }
        let id = ClassId(id as u16);
        match masks.get_mut(&id) {
            Some(m) => m[idx] = 1,
            None => return Err(Error::UnknownClass(id.0)),
        }
    }
    Ok(masks)
}

/// Reads a scan and its companion label volume, normalizes intensities and
/// splits labels per catalog class.
pub fn load_volume(
    entry: &ScanEntry,
    base_dir: &Path,
    catalog: &ClassCatalog,
    modality: Modality,
    norm: &IntensityNormalization,
) -> Result<VolumeScan> {
    let mut voxels = read_nifti_volume(&base_dir.join(&entry.image))?;
    let labels = read_nifti_volume(&base_dir.join(&entry.label))?;
    if labels.dim() != voxels.dim() {
        return Err(Error::ShapeMismatch(format!(
            "label volume {} has shape {:?}, image {} has {:?}",
            entry.label.display(),
            labels.dim(),
            entry.image.display(),
            voxels.dim()
        )));
    }
    normalize_intensity(&mut voxels, modality, norm);
    let masks = split_labels(&labels, catalog)?;
    VolumeScan::new(voxels, masks, entry.patient_id.clone(), modality)
}

/// Merges per-class masks back into one integer label volume.
pub fn merge_labels(masks: &BTreeMap<ClassId, Array3<u8>>, shape: (usize, usize, usize)) -> Array3<u16> {
    let mut out = Array3::<u16>::zeros(shape);
    for (class, mask) in masks {
        ndarray::Zip::from(&mut out).and(mask).for_each(|o, &m| {
            if m != 0 {
                *o = class.0;
            }
        });
    }
    out
}

pub fn mask_to_f32(mask: ArrayView2<u8>) -> Array2<f32> {
    mask.mapv(|v| v as f32)
}
