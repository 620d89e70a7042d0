//! Low-rank adapters on the attention projections of the ViT backbone.
//!
//! A targeted projection `W` computes `x W^T + (alpha / rank) (x A^T) B^T`
//! with `A: rank x d_in` drawn uniformly in `+-1/sqrt(d_in)` and `B: d_out x
//! rank` zero, so a freshly wrapped model is unchanged. Wrapping freezes
//! every backbone weight.

use candle_core::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::state::{ModelState, Param};
use super::Backbone;
use crate::ops::linear;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Query,
    Key,
    Value,
    Output,
}

impl LoraTarget {
    fn name(self) -> &'static str {
        match self {
            LoraTarget::Query => "query",
            LoraTarget::Key => "key",
            LoraTarget::Value => "value",
            LoraTarget::Output => "output",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRankAdapterSpec {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
    /// Blocks receiving adapters; all blocks when absent.
    #[serde(default)]
    pub blocks: Option<Vec<usize>>,
}

impl Default for LowRankAdapterSpec {
    fn default() -> Self {
        LowRankAdapterSpec {
            rank: 16,
            alpha: 16.0,
            targets: vec![LoraTarget::Query, LoraTarget::Value],
            blocks: None,
        }
    }
}

impl LowRankAdapterSpec {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub(crate) fn validate(&self, backbone: &Backbone) -> Result<()> {
        let Backbone::FoundationVit(vit) = backbone else {
            return Err(Error::InvalidConfig(
                "low-rank adapters require the ViT backbone".into(),
            ));
        };
        if self.rank == 0 || self.rank >= vit.hidden {
            return Err(Error::InvalidConfig(format!(
                "lora rank {} must be in 1..{}",
                self.rank, vit.hidden
            )));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidConfig("lora alpha must be positive".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::InvalidConfig("lora needs at least one target".into()));
        }
        if let Some(bad) = self.blocks.iter().flatten().find(|&&b| b >= vit.depth) {
            return Err(Error::InvalidConfig(format!(
                "lora targets block {bad}, but the backbone has {} blocks",
                vit.depth
            )));
        }
        Ok(())
    }

    fn block_list(&self, depth: usize) -> Vec<usize> {
        self.blocks.clone().unwrap_or_else(|| (0..depth).collect())
    }
}

fn param_name(block: usize, target: LoraTarget, which: &str) -> String {
    format!("lora.blocks.{block}.{}.{which}", target.name())
}

/// Freezes the backbone and attaches zero-initialized adapters.
pub fn wrap_with_low_rank_adapters(mut state: ModelState, spec: &LowRankAdapterSpec) -> Result<ModelState> {
    spec.validate(&state.config.backbone)?;
    if state.config.lora.is_some() {
        return Err(Error::InvalidConfig("model already carries low-rank adapters".into()));
    }
    let Backbone::FoundationVit(vit) = state.config.backbone.clone() else {
        unreachable!("validated above");
    };
    state.freeze("backbone.");
    let d = vit.hidden;
    let bound = 1.0 / (d as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(state.config.init_seed);
    rng.set_stream(1);
    for block in spec.block_list(vit.depth) {
        for &target in &spec.targets {
            let a: Vec<f32> = (0..spec.rank * d)
                .map(|_| rng.random_range(-bound..bound) as f32)
                .collect();
            let a = Tensor::from_vec(a, (spec.rank, d), &candle_core::Device::Cpu)?;
            let b = Tensor::zeros((d, spec.rank), candle_core::DType::F32, &candle_core::Device::Cpu)?;
            state.insert(param_name(block, target, "a"), Param::Trainable(Var::from_tensor(&a)?));
            state.insert(param_name(block, target, "b"), Param::Trainable(Var::from_tensor(&b)?));
        }
    }
    state.config.lora = Some(spec.clone());
    Ok(state)
}

fn delta(state: &ModelState, block: usize, target: LoraTarget, x: &Tensor) -> Result<Option<Tensor>> {
    let Some(spec) = &state.config.lora else {
        return Ok(None);
    };
    let a = param_name(block, target, "a");
    if !state.contains(&a) {
        return Ok(None);
    }
    let low = linear(x, state.get(&a)?, None)?;
    let up = linear(&low, state.get(&param_name(block, target, "b"))?, None)?;
    Ok(Some((up * spec.scale())?))
}

/// Fused query/key/value projection of `block`, adapters included.
pub(crate) fn qkv(state: &ModelState, block: usize, x: &Tensor) -> Result<Tensor> {
    let pre = format!("backbone.blocks.{block}.attn.qkv");
    let base = linear(x, state.get(&format!("{pre}.weight"))?, Some(state.get(&format!("{pre}.bias"))?))?;
    let d = base.dims()[2] / 3;
    let targets = [LoraTarget::Query, LoraTarget::Key, LoraTarget::Value];
    let mut parts = Vec::with_capacity(3);
    let mut any = false;
    for (i, t) in targets.into_iter().enumerate() {
        let part = base.narrow(2, i * d, d)?;
        parts.push(match delta(state, block, t, x)? {
            Some(dl) => {
                any = true;
                (part + dl)?
            }
            None => part,
        });
    }
    if !any {
        return Ok(base);
    }
    Ok(Tensor::cat(&parts, 2)?)
}

/// Attention output projection of `block`, adapters included.
pub(crate) fn proj(state: &ModelState, block: usize, x: &Tensor) -> Result<Tensor> {
    let pre = format!("backbone.blocks.{block}.attn.proj");
    let base = linear(x, state.get(&format!("{pre}.weight"))?, Some(state.get(&format!("{pre}.bias"))?))?;
    match delta(state, block, LoraTarget::Output, x)? {
        Some(dl) => Ok((base + dl)?),
        None => Ok(base),
    }
}
