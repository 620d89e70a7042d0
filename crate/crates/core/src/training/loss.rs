use candle_core::{DType, Device, Tensor};
use ndarray::ArrayView2;

use crate::similarity::SegmentationResult;
use crate::{Error, Result};

/// Floor applied to probabilities before taking logs.
pub const LOG_EPS: f64 = 1e-8;

/// Mean over pixels of `-sum_j t_j log(max(p_j, eps))`; both `C x H x W`.
pub fn cross_entropy(probs: &Tensor, target: &Tensor) -> Result<Tensor> {
    if probs.dims() != target.dims() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            probs.dims(),
            target.dims()
        )));
    }
    let (_, h, w) = probs.dims3()?;
    let logp = probs.clamp(LOG_EPS, f64::INFINITY)?.log()?;
    Ok(((target * logp)?.sum_all()? * (-1.0 / (h * w) as f64))?)
}

/// Two-plane one-hot target `[background, foreground]` from a binary mask.
pub fn binary_target(mask: ArrayView2<u8>, dtype: DType, device: &Device) -> Result<Tensor> {
    if mask.iter().any(|&v| v > 1) {
        return Err(Error::InvalidInput("target mask is not binary".into()));
    }
    let fg = crate::ops::array2_to_tensor(mask.mapv(|v| v as f32).view(), dtype, device)?;
    let bg = (1.0 - &fg)?;
    Ok(Tensor::stack(&[bg, fg], 0)?)
}

/// Cross-entropy of a two-class result against a binary mask.
pub fn segmentation_loss(pred: &SegmentationResult, target: ArrayView2<u8>) -> Result<f64> {
    if pred.classes.len() != 2 {
        return Err(Error::InvalidInput("segmentation loss expects background and one foreground class".into()));
    }
    if pred.resolution != target.dim() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            pred.resolution,
            target.dim()
        )));
    }
    let probs = crate::ops::array3_to_tensor(pred.probabilities.view(), DType::F64, &Device::Cpu)?;
    let t = binary_target(target, DType::F64, &Device::Cpu)?;
    crate::ops::scalar(&cross_entropy(&probs, &t)?)
}
