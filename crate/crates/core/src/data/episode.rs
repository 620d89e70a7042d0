use ndarray::Array2;
use rand::Rng;

use super::augment::{AugmentationSpec, GeometricTransform, IntensityTransform};
use super::slices::SliceSample;
use super::superpixel::SuperpixelMap;
use crate::encoder::SliceTriplet;
use crate::{ClassId, Error, Result, PSEUDO_CLASS};

/// One labeled example of an episode's support set.
#[derive(Clone, Debug)]
pub struct Shot {
    pub image: SliceTriplet,
    pub mask: Array2<u8>,
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub support: Vec<Shot>,
    pub query_image: SliceTriplet,
    /// Present while training, absent at deployment.
    pub query_label: Option<Array2<u8>>,
    pub n_way: usize,
    pub k_shot: usize,
    pub class_id: ClassId,
    /// `(scan id, z index)` of the slice the episode was drawn from.
    pub source: Option<(String, usize)>,
}

impl Episode {
    pub fn one_shot(support: Shot, query_image: SliceTriplet, query_label: Option<Array2<u8>>, class_id: ClassId) -> Self {
        Episode {
            support: vec![support],
            query_image,
            query_label,
            n_way: 1,
            k_shot: 1,
            class_id,
            source: None,
        }
    }
}

/// Applies `T_g(T_i(.))` to every slice of a triplet and `T_g` to a label.
pub fn augment_pair<R: Rng + ?Sized>(
    image: &SliceTriplet,
    label: &Array2<u8>,
    aug: &AugmentationSpec,
    rng: &mut R,
) -> (SliceTriplet, Array2<u8>) {
    let g = GeometricTransform::sample(&aug.geometric, label.dim(), rng);
    let i = IntensityTransform::sample(&aug.intensity, rng);
    let mut channel = 0;
    let image = image.map(|s| {
        channel += 1;
        g.apply_image(&i.apply(s, channel))
    });
    (image, g.apply_label(label))
}

const MAX_DRAWS: usize = 64;

fn is_degenerate(mask: &Array2<u8>) -> bool {
    let fg = mask.iter().filter(|&&v| v != 0).count();
    fg == 0 || fg == mask.len()
}

/// Draws a self-supervised episode: a random slice, one of its superpixels as
/// pseudo-label, and an augmented copy of the pair as query.
///
/// Draws whose pseudo-label is empty or covers the whole slice (before or
/// after augmentation) are rejected and redrawn.
pub fn sample_training_episode<R: Rng + ?Sized>(
    pool: &[SliceSample],
    superpixels: &[SuperpixelMap],
    aug: &AugmentationSpec,
    rng: &mut R,
) -> Result<Episode> {
    if pool.is_empty() {
        return Err(Error::InvalidInput("episode pool is empty".into()));
    }
    if pool.len() != superpixels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} slices but {} superpixel maps",
            pool.len(),
            superpixels.len()
        )));
    }
    for _ in 0..MAX_DRAWS {
        let idx = rng.random_range(0..pool.len());
        let slice = &pool[idx];
        let sp = &superpixels[idx];
        if sp.num_segments == 0 {
            return Err(Error::InvalidInput(format!(
                "slice {}:{} has no superpixels",
                slice.source, slice.z_index
            )));
        }
        if sp.segments.dim() != slice.shape() {
            return Err(Error::ShapeMismatch(format!(
                "superpixels for {}:{} have shape {:?}, slice has {:?}",
                slice.source,
                slice.z_index,
                sp.segments.dim(),
                slice.shape()
            )));
        }
        let region = rng.random_range(0..sp.num_segments) as u32;
        let mask = sp.segments.mapv(|s| (s == region) as u8);
        if is_degenerate(&mask) {
            continue;
        }
        let image = slice.triplet();
        let (query_image, query_label) = augment_pair(&image, &mask, aug, rng);
        if is_degenerate(&query_label) {
            continue;
        }
        let mut ep = Episode::one_shot(Shot { image, mask }, query_image, Some(query_label), PSEUDO_CLASS);
        ep.source = Some((slice.source.clone(), slice.z_index));
        return Ok(ep);
    }
    Err(Error::InvalidInput(format!(
        "no usable superpixel pseudo-label after {MAX_DRAWS} draws"
    )))
}

/// Keeps only slices in which every test class is entirely absent.
pub fn filter_setting2(pool: &[SliceSample], test_classes: &[ClassId]) -> Vec<SliceSample> {
    pool.iter()
        .filter(|s| test_classes.iter().all(|&c| s.class_pixels(c) == 0))
        .cloned()
        .collect()
}

/// Setting-2 filter applied to slices and their superpixel maps together.
pub fn setting2_pool(
    pool: &[SliceSample],
    superpixels: &[SuperpixelMap],
    test_classes: &[ClassId],
) -> Result<(Vec<SliceSample>, Vec<SuperpixelMap>)> {
    if pool.len() != superpixels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} slices but {} superpixel maps",
            pool.len(),
            superpixels.len()
        )));
    }
    Ok(pool
        .iter()
        .zip(superpixels)
        .filter(|(s, _)| test_classes.iter().all(|&c| s.class_pixels(c) == 0))
        .map(|(s, p)| (s.clone(), p.clone()))
        .unzip())
}

/// Total number of test-class pixels in a pool; zero for a valid Setting-2 pool.
pub fn test_class_pixels(pool: &[SliceSample], test_classes: &[ClassId]) -> usize {
    pool.iter()
        .map(|s| test_classes.iter().map(|&c| s.class_pixels(c)).sum::<usize>())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::augment::{GeometricSpec, IntensitySpec};
    use crate::evaluation::dice_score;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn sample(z: usize, liver: usize) -> SliceSample {
        let image = Array2::from_shape_fn((12, 12), |(r, c)| ((r * 12 + c + z) % 7) as f32 / 7.0);
        let mut lab = Array2::<u8>::zeros((12, 12));
        for i in 0..liver {
            lab[[i / 12, i % 12]] = 1;
        }
        let labels = BTreeMap::from([(ClassId(1), Array2::zeros((12, 12))), (ClassId(2), lab)]);
        SliceSample::new(image.clone(), [image.clone(), image], labels, z, "p").unwrap()
    }

    fn quadrants() -> SuperpixelMap {
        SuperpixelMap {
            segments: Array2::from_shape_fn((12, 12), |(r, c)| (2 * (r / 6) + c / 6) as u32),
            num_segments: 4,
        }
    }

    #[test]
    fn identity_augmentation_copies_support() {
        let pool = vec![sample(0, 0), sample(1, 0)];
        let sps = vec![quadrants(), quadrants()];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ep = sample_training_episode(&pool, &sps, &AugmentationSpec::identity(), &mut rng).unwrap();
        assert_eq!(ep.query_image, ep.support[0].image);
        assert_eq!(ep.query_label.as_ref().unwrap(), &ep.support[0].mask);
        assert_eq!((ep.n_way, ep.k_shot), (1, 1));
    }

    #[test]
    fn intensity_only_keeps_label() {
        let pool = vec![sample(0, 0)];
        let sps = vec![quadrants()];
        let aug = AugmentationSpec {
            geometric: GeometricSpec::identity(),
            intensity: IntensitySpec {
                gamma: [0.5, 1.5],
                noise_std: 0.1,
                brightness: [-0.2, 0.2],
                contrast: [0.5, 1.5],
            },
            seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ep = sample_training_episode(&pool, &sps, &aug, &mut rng).unwrap();
        assert_eq!(ep.query_label.as_ref().unwrap(), &ep.support[0].mask);
        assert_ne!(ep.query_image, ep.support[0].image);
    }

    #[test]
    fn rotation_matches_oracle() {
        let pool = vec![sample(0, 0)];
        let sps = vec![quadrants()];
        let aug = AugmentationSpec {
            geometric: GeometricSpec {
                rotation_deg: [90.0, 90.0],
                ..GeometricSpec::identity()
            },
            intensity: IntensitySpec::identity(),
            seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ep = sample_training_episode(&pool, &sps, &aug, &mut rng).unwrap();
        let m = &ep.support[0].mask;
        let n = m.nrows();
        let rotated = Array2::from_shape_fn((n, n), |(r, c)| m[[n - 1 - c, r]]);
        let q = ep.query_label.unwrap();
        let d = dice_score(q.view().into_dyn(), rotated.view().into_dyn()).unwrap();
        assert_eq!(d, 1.0);
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let pool = vec![sample(0, 0), sample(1, 0), sample(2, 0)];
        let sps = vec![quadrants(), quadrants(), quadrants()];
        let aug = AugmentationSpec::default();
        let a = sample_training_episode(&pool, &sps, &aug, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_training_episode(&pool, &sps, &aug, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.query_image, b.query_image);
        assert_eq!(a.query_label, b.query_label);
        assert_eq!(a.support[0].mask, b.support[0].mask);
    }

    #[test]
    fn empty_pool_and_single_region_fail() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_training_episode(&[], &[], &AugmentationSpec::identity(), &mut rng).is_err());
        let one = SuperpixelMap {
            segments: Array2::zeros((12, 12)),
            num_segments: 1,
        };
        assert!(sample_training_episode(&[sample(0, 0)], &[one], &AugmentationSpec::identity(), &mut rng).is_err());
    }

    #[test]
    fn setting2_filter() {
        let pool = vec![sample(0, 0), sample(1, 1), sample(2, 0)];
        let kept = filter_setting2(&pool, &[ClassId(1), ClassId(2)]);
        assert_eq!(kept.iter().map(|s| s.z_index).collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(test_class_pixels(&kept, &[ClassId(2)]), 0);
        assert_eq!(filter_setting2(&pool, &[ClassId(1)]).len(), 3);
        assert!(filter_setting2(&[], &[ClassId(1)]).is_empty());
    }
}
