//! Episodic self-supervised training on superpixel pseudo-labels.

pub mod loss;
pub mod optim;

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Tensor;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_training_episode, test_class_pixels, AugmentationSpec, Episode, SliceSample, SuperpixelMap};
use crate::encoder::{encode_batch, FeatureMap, ModelState};
use crate::ops::scalar;
use crate::prototype::{assemble_prototype_set, mask_to_grid, HeadConfig, SupportFeatures};
use crate::similarity::segment_tensor;
use crate::{ClassId, Error, Result, PSEUDO_CLASS};

pub use loss::{binary_target, cross_entropy, segmentation_loss};
pub use optim::{sgd_step, OptimizerConfig, OptimizerState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub episodes: u64,
    pub optimizer: OptimizerConfig,
    /// Weight of the support-from-query alignment loss.
    pub lambda_reg: f64,
    /// Compute the alignment branch at all. With `lambda_reg = 0` this only
    /// costs time.
    pub alignment: bool,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Save a checkpoint every this many episodes; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 1000,
            optimizer: OptimizerConfig::default(),
            lambda_reg: 1.0,
            alignment: true,
            grad_clip: None,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if !self.lambda_reg.is_finite() || self.lambda_reg < 0.0 {
            return Err(Error::InvalidConfig(format!("lambda_reg must be >= 0, got {}", self.lambda_reg)));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::InvalidConfig("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub episode_id: u64,
    pub seg_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
    pub grad_norm: f64,
}

/// Differentiable losses of one episode, computed from encoder features.
pub struct EpisodeLosses {
    pub seg: Tensor,
    pub reg: Option<Tensor>,
    pub total: Tensor,
    /// Query probabilities `[background, foreground] x H x W`.
    pub query_probs: Tensor,
}

fn is_degenerate(mask: &Array2<u8>) -> bool {
    let fg = mask.iter().filter(|&&v| v != 0).count();
    fg == 0 || fg == mask.len()
}

fn prototype_set(feats: &[&Tensor], masks: &[&Array2<u8>], head: &HeadConfig) -> Result<crate::PrototypeSet> {
    let coverage = feats
        .iter()
        .zip(masks)
        .map(|(f, m)| {
            let (_, h, w) = f.dims3()?;
            Ok(BTreeMap::from([(PSEUDO_CLASS, mask_to_grid(m.view(), (h, w)))]))
        })
        .collect::<Result<Vec<_>>>()?;
    let support = feats
        .iter()
        .zip(&coverage)
        .map(|(f, m)| SupportFeatures { features: f, masks: m })
        .collect::<Vec<_>>();
    assemble_prototype_set(&support, head)
}

/// Segmentation loss of the query under support prototypes, plus (when
/// `align` is set) the loss of re-segmenting every support image from
/// prototypes built on the query's own thresholded prediction.
///
/// Features are `D x h x w`; masks are at input resolution. The alignment
/// term is skipped when the query prediction is empty or full.
pub fn episode_losses(
    support: &[(&Tensor, &Array2<u8>)],
    query: &Tensor,
    query_label: &Array2<u8>,
    head: &HeadConfig,
    lambda_reg: f64,
    align: bool,
) -> Result<EpisodeLosses> {
    if support.is_empty() {
        return Err(Error::InvalidInput("episode has no support examples".into()));
    }
    let feats: Vec<&Tensor> = support.iter().map(|s| s.0).collect();
    let masks: Vec<&Array2<u8>> = support.iter().map(|s| s.1).collect();
    let set = prototype_set(&feats, &masks, head)?;
    let query_probs = segment_tensor(&set, query, query_label.dim())?;
    let target = binary_target(query_label.view(), query_probs.dtype(), query_probs.device())?;
    let seg = cross_entropy(&query_probs, &target)?;

    let mut reg = None;
    if align {
        let fg = crate::ops::tensor_to_array2(&query_probs.detach().get(1)?)?;
        let pred = fg.mapv(|p| (p > 0.5) as u8);
        if is_degenerate(&pred) {
            log::debug!("alignment skipped: query prediction is empty or full");
        } else {
            let back = prototype_set(&[query], &[&pred], head)?;
            let mut terms = Vec::with_capacity(support.len());
            for (f, m) in support {
                let probs = segment_tensor(&back, f, m.dim())?;
                let t = binary_target(m.view(), probs.dtype(), probs.device())?;
                terms.push(cross_entropy(&probs, &t)?);
            }
            let n = terms.len() as f64;
            reg = Some((Tensor::stack(&terms, 0)?.sum_all()? / n)?);
        }
    }
    let total = match &reg {
        Some(r) => (&seg + (r * lambda_reg)?)?,
        None => seg.clone(),
    };
    Ok(EpisodeLosses {
        seg,
        reg,
        total,
        query_probs,
    })
}

/// Encodes an episode's support and query images (graph kept).
fn encode_episode(state: &ModelState, episode: &Episode) -> Result<(Vec<FeatureMap>, FeatureMap)> {
    let mut inputs: Vec<_> = episode.support.iter().map(|s| &s.image).collect();
    inputs.push(&episode.query_image);
    let same = inputs.iter().map(|t| t.shape()).collect::<Result<Vec<_>>>()?;
    let mut feats = if same.windows(2).all(|w| w[0] == w[1]) {
        encode_batch(state, &inputs)?
    } else {
        inputs
            .iter()
            .map(|t| Ok(encode_batch(state, &[*t])?.remove(0)))
            .collect::<Result<Vec<_>>>()?
    };
    let query = feats.pop().expect("query features");
    Ok((feats, query))
}

/// Forward pass, backward pass and one optimizer step on `episode`.
///
/// A non-finite loss aborts before any weight changes.
pub fn train_episode(
    state: &mut ModelState,
    episode: &Episode,
    cfg: &TrainConfig,
    head: &HeadConfig,
    episode_id: u64,
) -> Result<LossReport> {
    let label = episode
        .query_label
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("training episode lacks a query label".into()))?;
    let (support_feats, query) = encode_episode(state, episode)?;
    let support: Vec<_> = support_feats
        .iter()
        .zip(&episode.support)
        .map(|(f, s)| (&f.values, &s.mask))
        .collect();
    let out = episode_losses(&support, &query.values, label, head, cfg.lambda_reg, cfg.alignment)?;
    let seg_loss = scalar(&out.seg)?;
    let reg_loss = out.reg.as_ref().map(scalar).transpose()?.unwrap_or(0.0);
    let total = scalar(&out.total)?;
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss { episode: episode_id });
    }
    let grads = out.total.backward()?;
    let grad_norm = sgd_step(state, &grads, &cfg.optimizer, cfg.grad_clip).map_err(|e| match e {
        Error::InvalidInput(_) => Error::NonFiniteLoss { episode: episode_id },
        other => other,
    })?;
    state.step += 1;
    Ok(LossReport {
        episode_id,
        seg_loss,
        reg_loss,
        total,
        grad_norm,
    })
}

/// Per-episode generator: the root seed with the episode index as stream.
pub fn episode_rng(seed: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode);
    rng
}

/// Slices and their superpixel maps available for episode sampling.
pub struct TrainingData<'a> {
    pub pool: &'a [SliceSample],
    pub superpixels: &'a [SuperpixelMap],
    /// Classes that must never appear in a training slice.
    pub test_classes: &'a [ClassId],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingAudit {
    pub test_classes: Vec<ClassId>,
    pub pool_slices: usize,
    pub pool_test_pixels: usize,
    pub episodes: u64,
    pub episodes_with_test_pixels: u64,
}

#[derive(Clone, Debug)]
pub struct TrainingRun {
    pub reports: Vec<LossReport>,
    pub audit: TrainingAudit,
    pub checkpoints: Vec<PathBuf>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Serialize, Deserialize)]
struct MetricsRow {
    episode_id: u64,
    seg_loss: f64,
    reg_loss: f64,
    total: f64,
    wall_time: f64,
}

pub fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("step_{step:06}"))
}

/// Most recent checkpoint under `out`, if any.
pub fn latest_checkpoint(out: &Path) -> Option<PathBuf> {
    let dir = out.join(CHECKPOINT_DIR);
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("state.json").exists())
        .collect();
    found.sort();
    found.pop()
}

/// Opens the metrics file, keeping rows of episodes before `resume_from`.
fn open_metrics(path: &Path, resume_from: u64) -> Result<csv::Writer<File>> {
    let mut kept = Vec::new();
    if resume_from > 0 && path.exists() {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
        for row in r.deserialize::<MetricsRow>() {
            let row = row.map_err(|e| Error::Serde(e.to_string()))?;
            if row.episode_id < resume_from {
                kept.push(row);
            }
        }
    }
    let file = OpenOptions::new()
        .write(true)
        .create(true)
        .truncate(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(["episode_id", "seg_loss", "reg_loss", "total", "wall_time"])
        .map_err(|e| Error::Serde(e.to_string()))?;
    for row in kept {
        w.serialize(row).map_err(|e| Error::Serde(e.to_string()))?;
    }
    Ok(w)
}

/// Trains from `state.step` up to `cfg.episodes`.
///
/// The pool must not contain test-class pixels; this is checked before
/// training and every sampled episode is audited against it. With `out`
/// set, one metrics row is appended per episode and checkpoints are written
/// every `checkpoint_every` episodes and at the end.
pub fn run_training(
    state: &mut ModelState,
    data: &TrainingData,
    aug: &AugmentationSpec,
    cfg: &TrainConfig,
    head: &HeadConfig,
    out: Option<&Path>,
) -> Result<TrainingRun> {
    cfg.validate()?;
    aug.validate()?;
    let pool_test_pixels = test_class_pixels(data.pool, data.test_classes);
    if pool_test_pixels > 0 {
        return Err(Error::Audit(format!(
            "training pool contains {pool_test_pixels} pixels of held-out classes {:?}",
            data.test_classes
        )));
    }
    let contaminated: HashMap<(&str, usize), bool> = data
        .pool
        .iter()
        .map(|s| {
            let dirty = data.test_classes.iter().any(|&c| s.class_pixels(c) > 0);
            ((s.source.as_str(), s.z_index), dirty)
        })
        .collect();

    let mut metrics = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(open_metrics(&dir.join(METRICS_FILE), state.step)?)
        }
        None => None,
    };
    let start = Instant::now();
    let mut audit = TrainingAudit {
        test_classes: data.test_classes.to_vec(),
        pool_slices: data.pool.len(),
        pool_test_pixels,
        episodes: 0,
        episodes_with_test_pixels: 0,
    };
    let mut reports = Vec::new();
    let mut checkpoints = Vec::new();
    let mut saved_at = None;
    for ep in state.step..cfg.episodes {
        let mut rng = episode_rng(cfg.seed, ep);
        let episode = sample_training_episode(data.pool, data.superpixels, aug, &mut rng)?;
        audit.episodes += 1;
        if let Some((src, z)) = &episode.source {
            if contaminated.get(&(src.as_str(), *z)).copied().unwrap_or(true) {
                audit.episodes_with_test_pixels += 1;
            }
        }
        let report = train_episode(state, &episode, cfg, head, ep)?;
        log::info!(
            "episode {ep}: seg {:.4} reg {:.4} total {:.4}",
            report.seg_loss,
            report.reg_loss,
            report.total
        );
        if let Some(w) = metrics.as_mut() {
            w.serialize(MetricsRow {
                episode_id: ep,
                seg_loss: report.seg_loss,
                reg_loss: report.reg_loss,
                total: report.total,
                wall_time: start.elapsed().as_secs_f64(),
            })
            .map_err(|e| Error::Serde(e.to_string()))?;
            w.flush().map_err(|e| Error::io(out.unwrap().join(METRICS_FILE), e))?;
        }
        reports.push(report);
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                let p = checkpoint_path(dir, state.step);
                state.save_checkpoint(&p)?;
                checkpoints.push(p);
                saved_at = Some(state.step);
            }
        }
    }
    if let Some(dir) = out {
        if saved_at != Some(state.step) {
            let p = checkpoint_path(dir, state.step);
            state.save_checkpoint(&p)?;
            checkpoints.push(p);
        }
        let path = dir.join("audit.json");
        std::fs::write(&path, serde_json::to_string_pretty(&audit)?).map_err(|e| Error::io(&path, e))?;
    }
    if audit.episodes_with_test_pixels > 0 {
        return Err(Error::Audit(format!(
            "{} episodes drew from slices containing held-out classes",
            audit.episodes_with_test_pixels
        )));
    }
    Ok(TrainingRun {
        reports,
        audit,
        checkpoints,
    })
}
