//! Synthetic abdominal-like volumes for tests and smoke runs.
//!
//! Each scan holds a body ellipse with three smoothed ellipsoid "organs" of
//! distinct intensity and partially overlapping axial extents. An optional
//! distractor blob mimics the intensity of the last organ without being
//! labeled.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, ScanEntry};
use super::superpixel::gaussian_smooth;
use super::volume::{merge_labels, write_nifti_volume, ClassInfo, Modality, VolumeScan};
use crate::{ClassId, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub patients: usize,
    /// `(H, W, Z)`.
    pub shape: (usize, usize, usize),
    pub noise_std: f64,
    pub distractor: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            patients: 6,
            shape: (64, 64, 24),
            noise_std: 0.02,
            distractor: true,
            seed: 0,
        }
    }
}

struct Organ {
    name: &'static str,
    intensity: f64,
    /// Centre and radii as fractions of `(H, W, Z)`.
    centre: [f64; 3],
    radii: [f64; 3],
}

const BODY: f64 = 0.35;

const ORGANS: [Organ; 3] = [
    Organ {
        name: "bright",
        intensity: 0.9,
        centre: [0.32, 0.32, 0.40],
        radii: [0.13, 0.12, 0.25],
    },
    Organ {
        name: "mid",
        intensity: 0.62,
        centre: [0.34, 0.68, 0.55],
        radii: [0.12, 0.13, 0.25],
    },
    Organ {
        name: "dark",
        intensity: 0.08,
        centre: [0.70, 0.50, 0.62],
        radii: [0.12, 0.16, 0.25],
    },
];

pub fn synth_classes() -> Vec<ClassInfo> {
    ORGANS
        .iter()
        .enumerate()
        .map(|(i, o)| ClassInfo {
            id: ClassId(i as u16 + 1),
            name: o.name.to_string(),
        })
        .collect()
}

fn ellipsoid(shape: (usize, usize, usize), centre: [f64; 3], radii: [f64; 3]) -> Array3<u8> {
    Array3::from_shape_fn(shape, |(y, x, z)| {
        let d = ((y as f64 - centre[0]) / radii[0]).powi(2)
            + ((x as f64 - centre[1]) / radii[1]).powi(2)
            + ((z as f64 - centre[2]) / radii[2]).powi(2);
        (d <= 1.0) as u8
    })
}

fn smooth_slices(mask: &Array3<u8>, sigma: f64) -> Array3<f64> {
    let mut out = mask.mapv(|v| v as f64);
    for z in 0..mask.dim().2 {
        let sl: Array2<f64> = out.slice(s![.., .., z]).to_owned();
        out.slice_mut(s![.., .., z]).assign(&gaussian_smooth(&sl, sigma));
    }
    out
}

/// Generates scan `index` of the synthetic cohort.
pub fn synth_scan(spec: &SynthSpec, index: usize) -> Result<VolumeScan> {
    let (h, w, d) = spec.shape;
    if h < 16 || w < 16 || d < 6 {
        return Err(Error::InvalidConfig(format!(
            "synthetic volumes need at least 16x16x6 voxels, got {:?}",
            spec.shape
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let dims = [h as f64, w as f64, d as f64];

    let body = Array3::from_shape_fn(spec.shape, |(y, x, _)| {
        let dy = (y as f64 - 0.5 * dims[0]) / (0.45 * dims[0]);
        let dx = (x as f64 - 0.5 * dims[1]) / (0.47 * dims[1]);
        (dy * dy + dx * dx <= 1.0) as u8
    });
    let mut voxels = smooth_slices(&body, 1.0).mapv(|v| v * BODY);

    let mut masks = BTreeMap::new();
    for (i, organ) in ORGANS.iter().enumerate() {
        let mut centre = [0.0; 3];
        let mut radii = [0.0; 3];
        for a in 0..3 {
            centre[a] = (organ.centre[a] + rng.random_range(-0.03..0.03)) * dims[a];
            radii[a] = organ.radii[a] * rng.random_range(0.85..1.15) * dims[a];
        }
        let mask = ellipsoid(spec.shape, centre, radii);
        let soft = smooth_slices(&mask, 1.0);
        ndarray::Zip::from(&mut voxels)
            .and(&soft)
            .for_each(|v, &m| *v += m * (organ.intensity - BODY));
        masks.insert(ClassId(i as u16 + 1), mask);
    }

    if spec.distractor {
        let last = &ORGANS[ORGANS.len() - 1];
        let centre = [
            (0.70 + rng.random_range(-0.02..0.02)) * dims[0],
            (0.18 + rng.random_range(-0.02..0.02)) * dims[1],
            last.centre[2] * dims[2],
        ];
        let r = 0.05 * dims[0].min(dims[1]);
        let blob = ellipsoid(spec.shape, centre, [r, r, 0.15 * dims[2]]);
        let soft = smooth_slices(&blob, 1.0);
        ndarray::Zip::from(&mut voxels)
            .and(&soft)
            .for_each(|v, &m| *v += m * (last.intensity - BODY));
    }

    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std)
            .map_err(|e| Error::InvalidConfig(format!("noise_std: {e}")))?;
        voxels.mapv_inplace(|v| v + normal.sample(&mut rng));
    }
    VolumeScan::new(
        voxels.mapv(|v| v as f32),
        masks,
        format!("synth{index:03}"),
        Modality::Synth,
    )
}

/// Writes the cohort as NIfTI pairs plus `manifest.toml` into `dir`.
pub fn write_synth_dataset(dir: &Path, spec: &SynthSpec) -> Result<Manifest> {
    let images = dir.join("images");
    let labels = dir.join("labels");
    for d in [&images, &labels] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut scans = Vec::with_capacity(spec.patients);
    for i in 0..spec.patients {
        let scan = synth_scan(spec, i)?;
        let image = PathBuf::from("images").join(format!("{}.nii.gz", scan.patient_id));
        let label = PathBuf::from("labels").join(format!("{}_seg.nii.gz", scan.patient_id));
        write_nifti_volume(&dir.join(&image), &scan.voxels)?;
        write_nifti_volume(&dir.join(&label), &merge_labels(&scan.masks, scan.shape()))?;
        scans.push(ScanEntry {
            patient_id: scan.patient_id,
            image,
            label,
        });
    }
    let manifest = Manifest {
        name: "synth".into(),
        modality: Modality::Synth,
        classes: synth_classes(),
        scans,
        base_dir: dir.to_path_buf(),
    };
    manifest.save(&dir.join("manifest.toml"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn organs_are_disjoint_and_ranges_overlap() {
        let scan = synth_scan(&SynthSpec::default(), 0).unwrap();
        let total: Array3<u32> = scan.masks.values().fold(Array3::zeros(scan.shape()), |acc, m| acc + m.mapv(u32::from));
        assert!(total.iter().all(|&v| v <= 1));
        let ranges: Vec<_> = scan.masks.keys().map(|&c| scan.class_slice_range(c).unwrap()).collect();
        assert!(ranges[0].start < ranges[2].start && ranges[2].start < ranges[0].end);
        assert!(ranges.iter().all(|r| r.len() >= 3));
    }

    #[test]
    fn cohort_is_seeded() {
        let spec = SynthSpec::default();
        assert_eq!(synth_scan(&spec, 2).unwrap().voxels, synth_scan(&spec, 2).unwrap().voxels);
        assert_ne!(synth_scan(&spec, 1).unwrap().voxels, synth_scan(&spec, 2).unwrap().voxels);
    }

    #[test]
    fn dataset_roundtrips_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            patients: 2,
            shape: (24, 24, 8),
            ..Default::default()
        };
        write_synth_dataset(dir.path(), &spec).unwrap();
        let m = Manifest::load(&dir.path().join("manifest.toml")).unwrap();
        m.check_files().unwrap();
        assert_eq!(m.scans.len(), 2);
        let scan = super::super::volume::load_volume(
            &m.scans[0],
            &m.base_dir,
            &m.catalog(),
            m.modality,
            &Default::default(),
        )
        .unwrap();
        let direct = synth_scan(&spec, 0).unwrap();
        assert_eq!(scan.masks, direct.masks);
    }
}
