//! Content-addressed on-disk caches for resized slices and superpixels.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Axis};
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::manifest::Manifest;
use super::slices::{reformat_and_resize, SliceSample};
use super::superpixel::{generate_superpixels, FelzenszwalbParams, SuperpixelCache, SuperpixelMap};
use super::volume::{load_volume, IntensityNormalization};
use crate::{ClassId, Error, Result};

pub const CACHE_ENV: &str = "PROTOSEG_CACHE";

/// Cache root: `$PROTOSEG_CACHE` when set, `default` otherwise.
pub fn cache_root(default: &Path) -> PathBuf {
    match std::env::var_os(CACHE_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => default.to_path_buf(),
    }
}

/// Hex sha256 over a canonical JSON rendering of `value`.
pub fn json_digest<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

/// Digest over the manifest, the bytes of every referenced file and `params`.
pub fn dataset_key<T: Serialize>(manifest: &Manifest, params: &T) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(manifest)?);
    for scan in &manifest.scans {
        for p in [&scan.image, &scan.label] {
            let full = manifest.base_dir.join(p);
            let bytes = std::fs::read(&full).map_err(|e| Error::io(&full, e))?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    }
    h.update(serde_json::to_vec(params)?);
    Ok(hex::encode(h.finalize())[..16].to_string())
}

fn npy_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::ArrayFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write_atomic<T: ndarray_npy::WritableElement>(path: &Path, a: &Array3<T>) -> Result<()> {
    let tmp = path.with_extension("npy.tmp");
    ndarray_npy::write_npy(&tmp, a).map_err(|e| npy_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Resized slices of one scan stored as `(Z, H, W)` image and label stacks.
#[derive(Clone, Debug)]
pub struct SliceCache {
    dir: PathBuf,
}

impl SliceCache {
    pub fn new(root: &Path, key: &str) -> Self {
        SliceCache {
            dir: root.join("slices").join(key),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn paths(&self, patient: &str) -> (PathBuf, PathBuf) {
        (
            self.dir.join(format!("{patient}_image.npy")),
            self.dir.join(format!("{patient}_label.npy")),
        )
    }

    pub fn contains(&self, patient: &str) -> bool {
        let (a, b) = self.paths(patient);
        a.exists() && b.exists()
    }

    pub fn put(&self, patient: &str, slices: &[SliceSample]) -> Result<()> {
        let Some(first) = slices.first() else {
            return Err(Error::InvalidInput(format!("scan {patient} has no slices")));
        };
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let (h, w) = first.shape();
        let mut images = Array3::<f32>::zeros((slices.len(), h, w));
        let mut labels = Array3::<u16>::zeros((slices.len(), h, w));
        for (z, sl) in slices.iter().enumerate() {
            images.index_axis_mut(Axis(0), z).assign(&sl.image);
            let mut lab = labels.index_axis_mut(Axis(0), z);
            for (class, mask) in &sl.labels {
                ndarray::Zip::from(&mut lab).and(mask).for_each(|o, &m| {
                    if m != 0 {
                        *o = class.0;
                    }
                });
            }
        }
        let (ip, lp) = self.paths(patient);
        write_atomic(&ip, &images)?;
        write_atomic(&lp, &labels)
    }

    pub fn get(&self, patient: &str, classes: &[ClassId]) -> Result<Option<Vec<SliceSample>>> {
        if !self.contains(patient) {
            return Ok(None);
        }
        let (ip, lp) = self.paths(patient);
        let images: Array3<f32> = ndarray_npy::read_npy(&ip).map_err(|e| npy_err(&ip, e))?;
        let labels: Array3<u16> = ndarray_npy::read_npy(&lp).map_err(|e| npy_err(&lp, e))?;
        if images.dim() != labels.dim() || images.dim().0 == 0 {
            return Err(npy_err(&lp, "image and label stacks disagree"));
        }
        let depth = images.dim().0;
        let slice = |z: usize| -> Array2<f32> { images.slice(s![z, .., ..]).to_owned() };
        (0..depth)
            .map(|z| {
                let lab = labels.index_axis(Axis(0), z);
                let per_class = classes
                    .iter()
                    .map(|&c| (c, lab.mapv(|v| (v == c.0) as u8)))
                    .collect();
                SliceSample::new(
                    slice(z),
                    [slice(z.saturating_sub(1)), slice((z + 1).min(depth - 1))],
                    per_class,
                    z,
                    patient,
                )
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PreprocessParams {
    pub resolution: (usize, usize),
    pub normalization: IntensityNormalization,
    pub felzenszwalb: FelzenszwalbParams,
}

#[derive(Clone, Debug)]
pub struct PreparedScan {
    pub patient_id: String,
    pub slices: Vec<SliceSample>,
    pub superpixels: Vec<SuperpixelMap>,
}

#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub scans: Vec<PreparedScan>,
    pub slice_key: String,
    pub superpixel_key: String,
    /// Scans served entirely from cache.
    pub cache_hits: usize,
    pub cache_misses: usize,
}

impl PreparedDataset {
    pub fn scan(&self, patient: &str) -> Option<&PreparedScan> {
        self.scans.iter().find(|s| s.patient_id == patient)
    }
}

/// Builds (or reuses) the slice and superpixel caches for every scan.
pub fn prepare_dataset(manifest: &Manifest, params: &PreprocessParams, root: &Path) -> Result<PreparedDataset> {
    manifest.check_files()?;
    let slice_key = dataset_key(manifest, &(params.resolution, &params.normalization))?;
    let superpixel_key = json_digest(&(&slice_key, &params.felzenszwalb))?[..16].to_string();
    let slice_cache = SliceCache::new(root, &slice_key);
    let sp_cache = SuperpixelCache::new(root, &superpixel_key);
    let catalog = manifest.catalog();
    let classes: Vec<ClassId> = catalog.ids().collect();

    let mut out = PreparedDataset {
        scans: Vec::with_capacity(manifest.scans.len()),
        slice_key,
        superpixel_key,
        cache_hits: 0,
        cache_misses: 0,
    };
    for entry in &manifest.scans {
        let pid = &entry.patient_id;
        let mut hit = true;
        let slices = match slice_cache.get(pid, &classes)? {
            Some(s) => s,
            None => {
                hit = false;
                let scan = load_volume(entry, &manifest.base_dir, &catalog, manifest.modality, &params.normalization)?;
                let s = reformat_and_resize(&scan, params.resolution)?;
                slice_cache.put(pid, &s)?;
                s
            }
        };
        let mut superpixels = Vec::with_capacity(slices.len());
        for sl in &slices {
            let sp = match sp_cache.get(pid, sl.z_index)? {
                Some(sp) => sp,
                None => {
                    hit = false;
                    let sp = generate_superpixels(sl.image.view(), &params.felzenszwalb)?;
                    sp_cache.put(pid, sl.z_index, &sp)?;
                    sp
                }
            };
            superpixels.push(sp);
        }
        if hit {
            out.cache_hits += 1;
        } else {
            out.cache_misses += 1;
        }
        out.scans.push(PreparedScan {
            patient_id: pid.clone(),
            slices,
            superpixels,
        });
    }
    Ok(out)
}
