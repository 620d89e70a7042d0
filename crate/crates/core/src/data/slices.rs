use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};

use super::volume::VolumeScan;
use crate::encoder::SliceTriplet;
use crate::resample::{resize_bilinear, resize_nearest};
use crate::{ClassId, Error, Result};

/// One axial slice with its two neighbours and per-class binary labels.
#[derive(Clone, Debug)]
pub struct SliceSample {
    pub image: Array2<f32>,
    /// Slices at `z-1` and `z+1` (edge-replicated at the volume boundary).
    pub neighbors: [Array2<f32>; 2],
    pub labels: BTreeMap<ClassId, Array2<u8>>,
    pub z_index: usize,
    pub source: String,
}

impl SliceSample {
    pub fn new(
        image: Array2<f32>,
        neighbors: [Array2<f32>; 2],
        labels: BTreeMap<ClassId, Array2<u8>>,
        z_index: usize,
        source: impl Into<String>,
    ) -> Result<Self> {
        let shape = image.dim();
        if neighbors.iter().any(|n| n.dim() != shape) || labels.values().any(|l| l.dim() != shape) {
            return Err(Error::ShapeMismatch(format!(
                "slice {z_index}: image, neighbours and labels must share shape {shape:?}"
            )));
        }
        Ok(SliceSample {
            image,
            neighbors,
            labels,
            z_index,
            source: source.into(),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.image.dim()
    }

    pub fn triplet(&self) -> SliceTriplet {
        SliceTriplet::new([
            self.neighbors[0].clone(),
            self.image.clone(),
            self.neighbors[1].clone(),
        ])
    }

    pub fn label(&self, class: ClassId) -> Option<ArrayView2<'_, u8>> {
        self.labels.get(&class).map(|l| l.view())
    }

    pub fn class_pixels(&self, class: ClassId) -> usize {
        self.labels
            .get(&class)
            .map_or(0, |l| l.iter().filter(|&&v| v != 0).count())
    }
}

/// Extracts every axial slice of `scan`, resizing images bilinearly and
/// labels with nearest-neighbour interpolation.
pub fn reformat_and_resize(scan: &VolumeScan, target: (usize, usize)) -> Result<Vec<SliceSample>> {
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::InvalidInput(format!(
            "resize target must be positive, got {target:?}"
        )));
    }
    let depth = scan.depth();
    let resized: Vec<Array2<f32>> = (0..depth)
        .map(|z| resize_bilinear(scan.slice(z), target))
        .collect();
    (0..depth)
        .map(|z| {
            let labels = scan
                .masks
                .keys()
                .map(|&class| {
                    let m = scan.mask_slice(class, z).expect("class key present");
                    (class, resize_nearest(m, target))
                })
                .collect();
            SliceSample::new(
                resized[z].clone(),
                [
                    resized[z.saturating_sub(1)].clone(),
                    resized[(z + 1).min(depth - 1)].clone(),
                ],
                labels,
                z,
                scan.patient_id.clone(),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Modality;
    use ndarray::{s, Array3};

    fn scan() -> VolumeScan {
        let voxels = Array3::from_shape_fn((8, 8, 4), |(x, y, z)| (x * 8 + y) as f32 / 64.0 + z as f32);
        let mut mask = Array3::<u8>::zeros((8, 8, 4));
        mask.slice_mut(s![2..6, 3..5, 1..3]).fill(1);
        VolumeScan::new(voxels, [(ClassId(1), mask)].into(), "p", Modality::Synth).unwrap()
    }

    #[test]
    fn resizes_every_slice() {
        let out = reformat_and_resize(&scan(), (256, 256)).unwrap();
        assert_eq!(out.len(), 4);
        for (z, s) in out.iter().enumerate() {
            assert_eq!(s.shape(), (256, 256));
            assert_eq!(s.z_index, z);
            assert!(s.labels[&ClassId(1)].iter().all(|&v| v <= 1));
        }
        // boundary neighbours replicate the edge slice
        assert_eq!(out[0].neighbors[0], out[0].image);
        assert_eq!(out[3].neighbors[1], out[3].image);
        assert_eq!(out[1].neighbors[0], out[0].image);
    }

    #[test]
    fn column_major_volumes_give_row_major_slices() {
        use ndarray::ShapeBuilder;
        let sc = scan();
        let fortran = Array3::from_shape_fn((8, 8, 4).f(), |i| sc.voxels[i]);
        let masks = sc
            .masks
            .iter()
            .map(|(&c, m)| (c, Array3::from_shape_fn((8, 8, 4).f(), |i| m[i])))
            .collect();
        let fsc = VolumeScan::new(fortran, masks, "p", Modality::Synth).unwrap();
        for out in [reformat_and_resize(&fsc, (8, 8)).unwrap(), reformat_and_resize(&fsc, (5, 7)).unwrap()] {
            for sl in &out {
                assert!(sl.image.is_standard_layout());
                assert!(sl.neighbors.iter().all(|n| n.is_standard_layout()));
                assert!(sl.labels.values().all(|m| m.is_standard_layout()));
            }
        }
        assert_eq!(reformat_and_resize(&fsc, (8, 8)).unwrap()[1].image, reformat_and_resize(&sc, (8, 8)).unwrap()[1].image);
    }

    #[test]
    fn identity_resize_is_exact() {
        let sc = scan();
        let out = reformat_and_resize(&sc, (8, 8)).unwrap();
        for s in &out {
            assert_eq!(s.image, sc.slice(s.z_index));
            assert_eq!(s.labels[&ClassId(1)], sc.mask_slice(ClassId(1), s.z_index).unwrap());
        }
    }

    #[test]
    fn rejects_zero_target() {
        assert!(reformat_and_resize(&scan(), (0, 4)).is_err());
    }
}
