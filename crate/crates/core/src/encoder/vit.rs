//! Plain ViT with layer scale, laid out like the public DINOv2 checkpoints
//! (`patch_embed.proj`, `cls_token`, `pos_embed`, `blocks.N.*`, `norm`).

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::state::{ModelState, ParamInit};
use super::{backbone_input_shape, lora, Backbone};
use crate::ops::{layer_norm, linear, softmax};
use crate::resample::{bilinear_taps, resample_tensor};
use crate::{Error, Result};

const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub mlp_hidden: usize,
    /// Side of the square position-embedding grid stored in the weights.
    pub pos_grid: usize,
    pub eps: f64,
}

impl VitConfig {
    /// DINOv2 ViT-L/14.
    pub fn large() -> Self {
        VitConfig {
            hidden: 1024,
            depth: 24,
            heads: 16,
            patch_size: 14,
            mlp_hidden: 4096,
            pos_grid: 37,
            eps: 1e-6,
        }
    }

    /// Desk-scale variant with the same layout.
    pub fn tiny() -> Self {
        VitConfig {
            hidden: 48,
            depth: 2,
            heads: 4,
            patch_size: 14,
            mlp_hidden: 96,
            pos_grid: 4,
            eps: 1e-6,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "vit hidden size {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.patch_size == 0 || self.pos_grid == 0 || self.mlp_hidden == 0 {
            return Err(Error::InvalidConfig("vit sizes must be positive".into()));
        }
        Ok(())
    }
}

pub(crate) fn init(cfg: &VitConfig, init: &mut ParamInit) -> Result<()> {
    let (d, p, m) = (cfg.hidden, cfg.patch_size, cfg.mlp_hidden);
    let std = 0.02;
    init.normal("backbone.patch_embed.proj.weight".into(), &[d, 3, p, p], (1.0 / (3 * p * p) as f64).sqrt())?;
    init.constant("backbone.patch_embed.proj.bias".into(), &[d], 0.0)?;
    init.normal("backbone.cls_token".into(), &[1, 1, d], std)?;
    init.normal("backbone.pos_embed".into(), &[1, 1 + cfg.pos_grid * cfg.pos_grid, d], std)?;
    for i in 0..cfg.depth {
        let b = format!("backbone.blocks.{i}");
        init.constant(format!("{b}.norm1.weight"), &[d], 1.0)?;
        init.constant(format!("{b}.norm1.bias"), &[d], 0.0)?;
        init.normal(format!("{b}.attn.qkv.weight"), &[3 * d, d], std)?;
        init.constant(format!("{b}.attn.qkv.bias"), &[3 * d], 0.0)?;
        init.normal(format!("{b}.attn.proj.weight"), &[d, d], std)?;
        init.constant(format!("{b}.attn.proj.bias"), &[d], 0.0)?;
        init.constant(format!("{b}.ls1.gamma"), &[d], 1.0)?;
        init.constant(format!("{b}.norm2.weight"), &[d], 1.0)?;
        init.constant(format!("{b}.norm2.bias"), &[d], 0.0)?;
        init.normal(format!("{b}.mlp.fc1.weight"), &[m, d], std)?;
        init.constant(format!("{b}.mlp.fc1.bias"), &[m], 0.0)?;
        init.normal(format!("{b}.mlp.fc2.weight"), &[d, m], std)?;
        init.constant(format!("{b}.mlp.fc2.bias"), &[d], 0.0)?;
        init.constant(format!("{b}.ls2.gamma"), &[d], 1.0)?;
    }
    init.constant("backbone.norm.weight".into(), &[d], 1.0)?;
    init.constant("backbone.norm.bias".into(), &[d], 0.0)?;
    Ok(())
}

/// Position embeddings resampled from the stored grid to `(gh, gw)`.
fn position_embedding(cfg: &VitConfig, state: &ModelState, gh: usize, gw: usize) -> Result<Tensor> {
    let pos = state.get("backbone.pos_embed")?;
    let g = cfg.pos_grid;
    if (gh, gw) == (g, g) {
        return Ok(pos.clone());
    }
    let d = cfg.hidden;
    let cls = pos.narrow(1, 0, 1)?;
    let grid = pos
        .narrow(1, 1, g * g)?
        .reshape((g, g, d))?
        .permute((2, 0, 1))?
        .contiguous()?;
    let grid = resample_tensor(&grid, &bilinear_taps(g, gh), &bilinear_taps(g, gw))?;
    let grid = grid.permute((1, 2, 0))?.reshape((1, gh * gw, d))?;
    Ok(Tensor::cat(&[&cls, &grid], 1)?)
}

fn attention(cfg: &VitConfig, state: &ModelState, block: usize, x: &Tensor) -> Result<Tensor> {
    let (b, n, d) = x.dims3()?;
    let heads = cfg.heads;
    let hd = d / heads;
    let qkv = lora::qkv(state, block, x)?
        .reshape((b, n, 3, heads, hd))?
        .permute((2, 0, 3, 1, 4))?
        .contiguous()?;
    let (q, k, v) = (qkv.get(0)?, qkv.get(1)?, qkv.get(2)?);
    let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (hd as f64).sqrt()))?;
    let att = softmax(&scores, 3)?;
    let out = att.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
    lora::proj(state, block, &out)
}

pub(crate) fn forward(cfg: &VitConfig, state: &ModelState, images: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = images.dims4()?;
    let (ih, iw) = backbone_input_shape(&Backbone::FoundationVit(cfg.clone()), (h, w))?;
    let x = if (ih, iw) == (h, w) {
        images.clone()
    } else {
        resample_tensor(images, &bilinear_taps(h, ih), &bilinear_taps(w, iw))?
    };
    let dev = images.device();
    let mean = Tensor::new(&MEAN, dev)?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
    let std = Tensor::new(&STD, dev)?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
    let x = x.broadcast_sub(&mean)?.broadcast_div(&std)?;

    let p = cfg.patch_size;
    let d = cfg.hidden;
    let tokens = x
        .conv2d(state.get("backbone.patch_embed.proj.weight")?, 0, p, 1, 1)?
        .broadcast_add(&state.get("backbone.patch_embed.proj.bias")?.reshape((1, d, 1, 1))?)?;
    let (gh, gw) = (ih / p, iw / p);
    let tokens = tokens.flatten_from(2)?.transpose(1, 2)?;
    let cls = state.get("backbone.cls_token")?.broadcast_as((b, 1, d))?;
    let mut x = Tensor::cat(&[&cls, &tokens], 1)?
        .broadcast_add(&position_embedding(cfg, state, gh, gw)?)?;

    for i in 0..cfg.depth {
        let pre = |name: &str| state.get(&format!("backbone.blocks.{i}.{name}"));
        let y = layer_norm(&x, pre("norm1.weight")?, pre("norm1.bias")?, cfg.eps)?;
        let y = attention(cfg, state, i, &y)?;
        x = (x + y.broadcast_mul(pre("ls1.gamma")?)?)?;
        let y = layer_norm(&x, pre("norm2.weight")?, pre("norm2.bias")?, cfg.eps)?;
        let y = linear(&y, pre("mlp.fc1.weight")?, Some(pre("mlp.fc1.bias")?))?.gelu_erf()?;
        let y = linear(&y, pre("mlp.fc2.weight")?, Some(pre("mlp.fc2.bias")?))?;
        x = (x + y.broadcast_mul(pre("ls2.gamma")?)?)?;
    }
    let x = layer_norm(&x, state.get("backbone.norm.weight")?, state.get("backbone.norm.bias")?, cfg.eps)?;
    let patches = x.narrow(1, 1, gh * gw)?;
    Ok(patches
        .reshape((b, gh, gw, d))?
        .permute((0, 3, 1, 2))?
        .contiguous()?)
}
