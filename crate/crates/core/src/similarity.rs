//! Scaled cosine similarity between prototypes and query features, per-class
//! fusion and per-pixel class probabilities.

use candle_core::{DType, Tensor};
use ndarray::{Array2, Array3, Axis};

use crate::encoder::FeatureMap;
use crate::ops::{softmax, tensor_to_array2, tensor_to_array3};
use crate::prototype::PrototypeSet;
use crate::resample::resize_tensor_bilinear;
use crate::{ClassId, Error, Result};

pub const SIMILARITY_SCALE: f64 = 20.0;
pub const COSINE_EPS: f64 = 1e-8;

/// `20 * cos(p_k, f(h, w))` for prototypes `K x D` and features `D x H x W`,
/// giving `K x H x W`.
pub fn cosine_maps(prototypes: &Tensor, features: &Tensor) -> Result<Tensor> {
    let (k, dp) = prototypes.dims2()?;
    let (d, h, w) = features.dims3()?;
    if d != dp {
        return Err(Error::ShapeMismatch(format!(
            "prototype dimension {dp} differs from feature dimension {d}"
        )));
    }
    let f = features.reshape((d, h * w))?;
    let dot = prototypes.matmul(&f)?;
    // a tiny floor inside the square root keeps gradients finite at zero vectors
    let pn = (prototypes.sqr()?.sum_keepdim(1)? + 1e-30)?.sqrt()?;
    let fn_ = (f.sqr()?.sum_keepdim(0)? + 1e-30)?.sqrt()?;
    let denom = (pn.broadcast_mul(&fn_)? + COSINE_EPS)?;
    let cos = dot.broadcast_div(&denom)?.clamp(-1.0, 1.0)?;
    Ok((cos * SIMILARITY_SCALE)?.reshape((k, h, w))?)
}

/// `sum_l S_l * softmax_l(S_l)` per pixel, `K x H x W -> H x W`.
pub fn fuse_tensor(maps: &Tensor) -> Result<Tensor> {
    let weights = softmax(maps, 0)?;
    Ok((maps * weights)?.sum(0)?)
}

/// Fused similarity of every class in `set`, `C x H x W`, in set order.
pub fn class_similarity_tensor(set: &PrototypeSet, features: &Tensor) -> Result<Tensor> {
    let fused = set
        .groups
        .iter()
        .map(|g| fuse_tensor(&cosine_maps(&g.vectors, features)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&fused, 0)?)
}

/// Softmax over classes on the feature grid, then bilinear upsampling to
/// `resolution`.
pub fn probability_tensor(class_sims: &Tensor, resolution: (usize, usize)) -> Result<Tensor> {
    let probs = softmax(class_sims, 0)?;
    resize_tensor_bilinear(&probs, resolution)
}

/// Probabilities `C x H x W` for a query given a prototype set.
pub fn segment_tensor(set: &PrototypeSet, features: &Tensor, resolution: (usize, usize)) -> Result<Tensor> {
    probability_tensor(&class_similarity_tensor(set, features)?, resolution)
}

#[derive(Clone, Debug)]
pub struct SimilarityMap {
    pub values: Array2<f32>,
    /// Position of the prototype within its class group.
    pub prototype_index: usize,
    pub class_id: ClassId,
}

#[derive(Clone, Debug)]
pub struct ClassSimilarity {
    pub values: Array2<f32>,
    pub class_id: ClassId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationResult {
    /// `classes x H x W`.
    pub probabilities: Array3<f32>,
    /// Per-pixel argmax as a class id.
    pub prediction: Array2<u16>,
    pub classes: Vec<ClassId>,
    pub resolution: (usize, usize),
}

impl SegmentationResult {
    pub fn from_probabilities(probabilities: Array3<f32>, classes: Vec<ClassId>) -> Result<Self> {
        let (c, h, w) = probabilities.dim();
        if c != classes.len() {
            return Err(Error::ShapeMismatch(format!("{c} probability planes for {} classes", classes.len())));
        }
        let prediction = Array2::from_shape_fn((h, w), |(y, x)| {
            let mut best = 0;
            for k in 1..c {
                if probabilities[[k, y, x]] > probabilities[[best, y, x]] {
                    best = k;
                }
            }
            classes[best].0
        });
        Ok(SegmentationResult {
            probabilities,
            prediction,
            classes,
            resolution: (h, w),
        })
    }

    pub fn from_tensor(probs: &Tensor, classes: Vec<ClassId>) -> Result<Self> {
        Self::from_probabilities(tensor_to_array3(probs)?, classes)
    }

    pub fn probability(&self, class: ClassId) -> Option<Array2<f32>> {
        let k = self.classes.iter().position(|&c| c == class)?;
        Some(self.probabilities.index_axis(Axis(0), k).to_owned())
    }

    pub fn binary(&self, class: ClassId) -> Array2<u8> {
        self.prediction.mapv(|v| (v == class.0) as u8)
    }
}

pub fn local_similarity_maps(set: &PrototypeSet, query: &FeatureMap) -> Result<Vec<SimilarityMap>> {
    let mut out = Vec::with_capacity(set.len());
    for g in &set.groups {
        let maps = tensor_to_array3(&cosine_maps(&g.vectors, &query.values)?)?;
        for (i, m) in maps.outer_iter().enumerate() {
            out.push(SimilarityMap {
                values: m.to_owned(),
                prototype_index: i,
                class_id: g.class_id,
            });
        }
    }
    Ok(out)
}

fn stack_maps<'a>(maps: impl Iterator<Item = &'a Array2<f32>>) -> Result<Tensor> {
    let maps: Vec<&Array2<f32>> = maps.collect();
    let Some(first) = maps.first() else {
        return Err(Error::InvalidInput("no similarity maps".into()));
    };
    let (h, w) = first.dim();
    if maps.iter().any(|m| m.dim() != (h, w)) {
        return Err(Error::ShapeMismatch("similarity maps differ in shape".into()));
    }
    let data: Vec<f64> = maps.iter().flat_map(|m| m.iter().map(|&v| v as f64)).collect();
    Ok(Tensor::from_vec(data, (maps.len(), h, w), &candle_core::Device::Cpu)?)
}

/// Fuses the maps of a single class.
pub fn fuse_similarities(maps: &[SimilarityMap]) -> Result<ClassSimilarity> {
    let Some(first) = maps.first() else {
        return Err(Error::InvalidInput("no similarity maps to fuse".into()));
    };
    if maps.iter().any(|m| m.class_id != first.class_id) {
        return Err(Error::InvalidInput("fusing maps of different classes".into()));
    }
    let fused = fuse_tensor(&stack_maps(maps.iter().map(|m| &m.values))?)?;
    Ok(ClassSimilarity {
        values: tensor_to_array2(&fused)?,
        class_id: first.class_id,
    })
}

pub fn predict_probabilities(class_sims: &[ClassSimilarity], resolution: (usize, usize)) -> Result<SegmentationResult> {
    if class_sims.len() < 2 {
        return Err(Error::InvalidInput("need background and at least one foreground class".into()));
    }
    let sims = stack_maps(class_sims.iter().map(|c| &c.values))?;
    let probs = probability_tensor(&sims, resolution)?.to_dtype(DType::F32)?;
    SegmentationResult::from_tensor(&probs, class_sims.iter().map(|c| c.class_id).collect())
}
