//! Adaptive local prototype pooling.
//!
//! Support features are tiled by non-overlapping pooling windows (partial
//! windows at the right/bottom edges are pooled over their actual extent).
//! A window yields a local prototype for a class when the class covers at
//! least `coverage_threshold` of it; the prototype is the plain window mean
//! of the features. Every class also gets a global prototype, the
//! mask-weighted mean of all its features.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureMap;
use crate::resample::{downsample_area, resample_tensor, Taps};
use crate::{ClassId, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolingWindow {
    pub lh: usize,
    pub lw: usize,
}

impl Default for PoolingWindow {
    fn default() -> Self {
        PoolingWindow { lh: 4, lw: 4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub window: PoolingWindow,
    pub coverage_threshold: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            window: PoolingWindow::default(),
            coverage_threshold: 0.95,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window.lh == 0 || self.window.lw == 0 {
            return Err(Error::InvalidConfig("pooling window must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.coverage_threshold) {
            return Err(Error::InvalidConfig(format!(
                "coverage threshold {} outside [0, 1]",
                self.coverage_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PrototypeKind {
    /// Window at grid position `(m, n)`.
    Local(usize, usize),
    Global,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    pub vector: Vec<f64>,
    pub class_id: ClassId,
    pub kind: PrototypeKind,
    /// Index of the support example it came from.
    pub source_index: usize,
}

/// Prototypes of one class as a `K x D` matrix plus their tags.
#[derive(Clone, Debug)]
pub struct ClassPrototypes {
    pub class_id: ClassId,
    pub vectors: Tensor,
    pub tags: Vec<(PrototypeKind, usize)>,
}

/// Prototypes grouped by class; background first.
#[derive(Clone, Debug)]
pub struct PrototypeSet {
    pub groups: Vec<ClassPrototypes>,
}

impl PrototypeSet {
    pub fn classes(&self) -> Vec<ClassId> {
        self.groups.iter().map(|g| g.class_id).collect()
    }

    pub fn count(&self, class: ClassId) -> usize {
        self.groups
            .iter()
            .find(|g| g.class_id == class)
            .map_or(0, |g| g.tags.len())
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.tags.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn prototypes(&self) -> Result<Vec<Prototype>> {
        let mut out = Vec::with_capacity(self.len());
        for g in &self.groups {
            let rows = g.vectors.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            for (vector, &(kind, source_index)) in rows.into_iter().zip(&g.tags) {
                out.push(Prototype {
                    vector,
                    class_id: g.class_id,
                    kind,
                    source_index,
                });
            }
        }
        Ok(out)
    }
}

/// Averaging taps for non-overlapping windows of length `l` over `n` cells.
fn window_taps(n: usize, l: usize) -> Vec<Taps> {
    (0..n.div_ceil(l))
        .map(|i| {
            let lo = i * l;
            let hi = (lo + l).min(n);
            let w = 1.0 / (hi - lo) as f64;
            (lo..hi).map(|j| (j, w)).collect()
        })
        .collect()
}

fn window_means(mask: ArrayView2<f32>, window: PoolingWindow) -> Array2<f64> {
    let (h, w) = mask.dim();
    let rows = window_taps(h, window.lh);
    let cols = window_taps(w, window.lw);
    Array2::from_shape_fn((rows.len(), cols.len()), |(m, n)| {
        let mut s = 0.0;
        for &(y, wy) in &rows[m] {
            for &(x, wx) in &cols[n] {
                s += wy * wx * mask[[y, x]] as f64;
            }
        }
        s
    })
}

fn check_shapes(features: &Tensor, mask: ArrayView2<f32>) -> Result<(usize, usize, usize)> {
    let (d, h, w) = features.dims3()?;
    if mask.dim() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} does not match feature grid {:?}",
            mask.dim(),
            (h, w)
        )));
    }
    Ok((d, h, w))
}

/// Local prototypes as a `K x D` tensor (None when no window qualifies)
/// and the grid position of each.
pub fn local_prototype_tensor(
    features: &Tensor,
    mask: ArrayView2<f32>,
    window: PoolingWindow,
    threshold: f64,
) -> Result<(Option<Tensor>, Vec<(usize, usize)>)> {
    let (d, h, w) = check_shapes(features, mask)?;
    if window.lh == 0 || window.lw == 0 || window.lh > h || window.lw > w {
        return Err(Error::InvalidConfig(format!(
            "pooling window {window:?} does not fit feature grid {h}x{w}"
        )));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidConfig(format!("coverage threshold {threshold} outside [0, 1]")));
    }
    let coverage = window_means(mask, window);
    let (nh, nw) = coverage.dim();
    let picked: Vec<(usize, usize)> = coverage
        .indexed_iter()
        .filter(|(_, &c)| c + 1e-9 >= threshold)
        .map(|(idx, _)| idx)
        .collect();
    if picked.is_empty() {
        return Ok((None, picked));
    }
    let pooled = resample_tensor(features, &window_taps(h, window.lh), &window_taps(w, window.lw))?
        .reshape((d, nh * nw))?;
    let idx: Vec<u32> = picked.iter().map(|&(m, n)| (m * nw + n) as u32).collect();
    let idx = Tensor::from_vec(idx, picked.len(), features.device())?;
    let vectors = pooled.index_select(&idx, 1)?.t()?.contiguous()?;
    Ok((Some(vectors), picked))
}

/// Mask-weighted mean feature, `D`.
pub fn global_prototype_tensor(features: &Tensor, mask: ArrayView2<f32>) -> Result<Tensor> {
    let (d, h, w) = check_shapes(features, mask)?;
    let total: f64 = mask.iter().map(|&v| v as f64).sum();
    if !(total > 0.0) {
        return Err(Error::InvalidInput("empty mask".into()));
    }
    let m = crate::ops::array2_to_tensor(mask, features.dtype(), features.device())?.reshape((1, h * w))?;
    let weighted = features.reshape((d, h * w))?.broadcast_mul(&m)?.sum(1)?;
    Ok((weighted / total)?)
}

pub fn pool_local_prototypes(
    fmap: &FeatureMap,
    mask: ArrayView2<f32>,
    window: PoolingWindow,
    coverage_threshold: f64,
    class_id: ClassId,
    source_index: usize,
) -> Result<Vec<Prototype>> {
    let (vectors, picked) = local_prototype_tensor(&fmap.values, mask, window, coverage_threshold)?;
    let Some(vectors) = vectors else {
        return Ok(Vec::new());
    };
    let rows = vectors.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(rows
        .into_iter()
        .zip(picked)
        .map(|(vector, (m, n))| Prototype {
            vector,
            class_id,
            kind: PrototypeKind::Local(m, n),
            source_index,
        })
        .collect())
}

pub fn compute_class_prototype(
    fmap: &FeatureMap,
    mask: ArrayView2<f32>,
    class_id: ClassId,
    source_index: usize,
) -> Result<Prototype> {
    let v = global_prototype_tensor(&fmap.values, mask).map_err(|e| match e {
        Error::InvalidInput(_) => Error::EmptyMask(class_id),
        other => other,
    })?;
    Ok(Prototype {
        vector: v.to_dtype(DType::F64)?.to_vec1::<f64>()?,
        class_id,
        kind: PrototypeKind::Global,
        source_index,
    })
}

/// One support example: features `D x H' x W'` and per-class foreground
/// coverage on the same grid. Background is the complement of the union.
pub struct SupportFeatures<'a> {
    pub features: &'a Tensor,
    pub masks: &'a BTreeMap<ClassId, Array2<f32>>,
}

pub fn background_mask(masks: &BTreeMap<ClassId, Array2<f32>>, grid: (usize, usize)) -> Array2<f32> {
    let mut bg = Array2::<f32>::ones(grid);
    for m in masks.values() {
        bg -= m;
    }
    bg.mapv_inplace(|v| v.clamp(0.0, 1.0));
    bg
}

/// Local and global prototypes of background and every foreground class,
/// across all support examples.
pub fn assemble_prototype_set(support: &[SupportFeatures], head: &HeadConfig) -> Result<PrototypeSet> {
    head.validate()?;
    let Some(first) = support.first() else {
        return Err(Error::InvalidInput("no support examples".into()));
    };
    let mut classes = vec![ClassId::BACKGROUND];
    classes.extend(first.masks.keys().copied());
    let mut groups = Vec::with_capacity(classes.len());
    for &class in &classes {
        let mut parts = Vec::new();
        let mut tags = Vec::new();
        for (i, s) in support.iter().enumerate() {
            let (_, h, w) = s.features.dims3()?;
            let bg;
            let mask = if class.is_background() {
                bg = background_mask(s.masks, (h, w));
                bg.view()
            } else {
                s.masks
                    .get(&class)
                    .ok_or_else(|| Error::InvalidInput(format!("support {i} lacks a mask for class {class}")))?
                    .view()
            };
            let (local, picked) =
                local_prototype_tensor(s.features, mask, head.window, head.coverage_threshold)?;
            if let Some(t) = local {
                parts.push(t);
                tags.extend(picked.into_iter().map(|(m, n)| (PrototypeKind::Local(m, n), i)));
            }
            match global_prototype_tensor(s.features, mask) {
                Ok(g) => {
                    parts.push(g.unsqueeze(0)?);
                    tags.push((PrototypeKind::Global, i));
                }
                Err(Error::InvalidInput(_)) => {}
                Err(e) => return Err(e),
            }
        }
        if parts.is_empty() {
            return Err(Error::NoPrototype(class));
        }
        groups.push(ClassPrototypes {
            class_id: class,
            vectors: Tensor::cat(&parts, 0)?,
            tags,
        });
    }
    Ok(PrototypeSet { groups })
}

/// Area-averaged coverage of a binary mask on a feature grid.
pub fn mask_to_grid(mask: ArrayView2<u8>, grid: (usize, usize)) -> Array2<f32> {
    downsample_area(mask.mapv(|v| (v != 0) as u8 as f32).view(), grid)
}
