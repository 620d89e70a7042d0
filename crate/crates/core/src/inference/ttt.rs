//! Test-time training: fine-tune on the test scans' own slices, using saved
//! predictions as pseudo-labels and augmented copies as queries.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::PredictionStore;
use crate::data::augment::AugmentationSpec;
use crate::data::episode::augment_pair;
use crate::data::{Episode, Shot, VolumeScan};
use crate::encoder::{ModelState, SliceTriplet};
use crate::prototype::HeadConfig;
use crate::resample::{resize_bilinear, resize_nearest};
use crate::training::{episode_rng, train_episode, LossReport, OptimizerState, TrainConfig};
use crate::{ClassId, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TttConfig {
    /// Optimizer steps; each step uses one slice.
    pub iterations: usize,
    pub lr: f64,
    /// Use predictions after component filtering as pseudo-labels.
    pub use_post_cca: bool,
    /// Re-run inference after adaptation and overwrite stored predictions.
    pub refresh_labels: bool,
    pub augmentation: AugmentationSpec,
    pub seed: u64,
}

impl Default for TttConfig {
    fn default() -> Self {
        TttConfig {
            iterations: 100,
            lr: 1e-4,
            use_post_cca: true,
            refresh_labels: true,
            augmentation: AugmentationSpec::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TttReport {
    pub steps: usize,
    /// Stored slices skipped because their pseudo-label was empty.
    pub skipped_background: usize,
    pub losses: Vec<LossReport>,
}

const MAX_AUG_DRAWS: usize = 8;

fn degenerate(mask: &ndarray::Array2<u8>) -> bool {
    let fg = mask.iter().filter(|&&v| v != 0).count();
    fg == 0 || fg == mask.len()
}

/// Adapts `state` in place on the test scans' stored predictions.
///
/// Optimizer momentum is reset before adaptation. Zero iterations leave the
/// state untouched.
pub fn test_time_train(
    state: &mut ModelState,
    scans: &[&VolumeScan],
    store: &PredictionStore,
    ttt: &TttConfig,
    train: &TrainConfig,
    head: &HeadConfig,
) -> Result<TttReport> {
    let entries = store.entries()?;
    if entries.is_empty() {
        return Err(Error::missing(
            format!("saved predictions in {}", store.root().display()),
            "protoseg infer",
        ));
    }
    if ttt.iterations == 0 {
        return Ok(TttReport {
            steps: 0,
            skipped_background: 0,
            losses: Vec::new(),
        });
    }
    ttt.augmentation.validate()?;
    let size = state.config.train_resolution;

    let mut candidates: Vec<(SliceTriplet, ndarray::Array2<u8>, ClassId)> = Vec::new();
    let mut skipped = 0;
    for (class, scan_id) in &entries {
        let Some(scan) = scans.iter().find(|s| &s.patient_id == scan_id) else {
            continue;
        };
        let pred = store
            .get(*class, scan_id, ttt.use_post_cca)?
            .ok_or_else(|| Error::missing(format!("prediction for {scan_id}"), "protoseg infer"))?;
        if pred.dim() != scan.shape() {
            return Err(Error::ShapeMismatch(format!(
                "stored prediction for {scan_id} has shape {:?}, scan has {:?}",
                pred.dim(),
                scan.shape()
            )));
        }
        for z in 0..scan.depth() {
            let label = resize_nearest(super::stored_slice(&pred, z).view(), size);
            if label.iter().all(|&v| v == 0) {
                skipped += 1;
                continue;
            }
            if label.iter().all(|&v| v != 0) {
                continue;
            }
            let image = scan.triplet(z).map(|s| resize_bilinear(s.view(), size));
            candidates.push((image, label, *class));
        }
    }
    if candidates.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no foreground pseudo-labels among stored predictions ({skipped} background slices)"
        )));
    }
    log::info!("test-time training on {} slices, {skipped} background slices skipped", candidates.len());

    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.shuffle(&mut episode_rng(ttt.seed, u64::MAX));
    let cfg = TrainConfig {
        optimizer: crate::training::OptimizerConfig {
            lr: ttt.lr,
            decay_every: 0,
            ..train.optimizer.clone()
        },
        ..train.clone()
    };
    state.optimizer = OptimizerState::default();
    let mut losses = Vec::with_capacity(ttt.iterations);
    for it in 0..ttt.iterations {
        let (image, label, class) = &candidates[order[it % order.len()]];
        let mut rng = episode_rng(ttt.seed, it as u64);
        let mut query = None;
        for _ in 0..MAX_AUG_DRAWS {
            let (qi, ql) = augment_pair(image, label, &ttt.augmentation, &mut rng);
            if !degenerate(&ql) {
                query = Some((qi, ql));
                break;
            }
        }
        let (qi, ql) = query.unwrap_or_else(|| (image.clone(), label.clone()));
        let episode = Episode::one_shot(
            Shot {
                image: image.clone(),
                mask: label.clone(),
            },
            qi,
            Some(ql),
            *class,
        );
        losses.push(train_episode(state, &episode, &cfg, head, it as u64)?);
    }
    Ok(TttReport {
        steps: ttt.iterations,
        skipped_background: skipped,
        losses,
    })
}
