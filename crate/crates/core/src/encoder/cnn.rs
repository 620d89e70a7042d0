//! Dilated convolutional backbone.
//!
//! Two stride-1 stages with 2x2 average pooling, a dilated stage (dilation
//! 2 then 4) and a linear 1x1 projection; overall stride 4. Hidden layers
//! are optionally normalized per sample before the ReLU. Kernels are
//! symmetrized horizontally, which makes the network exactly equivariant to
//! left-right flips of inputs whose width is a multiple of the stride.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::state::{ModelState, ParamInit};
use crate::{Error, Result};

/// Per-sample normalization applied to hidden conv outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CnnNorm {
    None,
    /// Each channel over its spatial extent.
    #[default]
    Instance,
    /// All channels and positions together.
    Layer,
}

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    /// Channel widths of the three stages.
    pub widths: Vec<usize>,
    pub out_dim: usize,
    #[serde(default)]
    pub norm: CnnNorm,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            widths: vec![32, 64, 128],
            out_dim: 128,
            norm: CnnNorm::default(),
        }
    }
}

struct Layer {
    cin: usize,
    cout: usize,
    kernel: usize,
    dilation: usize,
    relu: bool,
    pool_after: bool,
}

impl CnnConfig {
    pub fn stride(&self) -> usize {
        4
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.widths.len() != 3 || self.widths.iter().any(|&w| w == 0) || self.out_dim == 0 {
            return Err(Error::InvalidConfig(
                "cnn needs three positive stage widths and a positive out_dim".into(),
            ));
        }
        Ok(())
    }

    fn layers(&self) -> Vec<Layer> {
        let w = &self.widths;
        let l = |cin, cout, kernel, dilation, relu, pool_after| Layer {
            cin,
            cout,
            kernel,
            dilation,
            relu,
            pool_after,
        };
        vec![
            l(3, w[0], 3, 1, true, false),
            l(w[0], w[0], 3, 1, true, true),
            l(w[0], w[1], 3, 1, true, false),
            l(w[1], w[1], 3, 1, true, true),
            l(w[1], w[2], 3, 2, true, false),
            l(w[2], w[2], 3, 4, true, false),
            l(w[2], self.out_dim, 1, 1, false, false),
        ]
    }
}

pub(crate) fn init(cfg: &CnnConfig, init: &mut ParamInit) -> Result<()> {
    for (i, l) in cfg.layers().iter().enumerate() {
        let fan_in = l.cin * l.kernel * l.kernel;
        let std = if l.relu { (2.0 / fan_in as f64).sqrt() } else { (1.0 / fan_in as f64).sqrt() };
        init.normal(format!("backbone.conv{i}.weight"), &[l.cout, l.cin, l.kernel, l.kernel], std)?;
        init.constant(format!("backbone.conv{i}.bias"), &[l.cout], 0.0)?;
    }
    Ok(())
}

fn normalize(x: &Tensor, norm: CnnNorm) -> Result<Tensor> {
    let dims: &[usize] = match norm {
        CnnNorm::None => return Ok(x.clone()),
        CnnNorm::Instance => &[2, 3],
        CnnNorm::Layer => &[1, 2, 3],
    };
    let mean = x.mean_keepdim(dims)?;
    let centred = x.broadcast_sub(&mean)?;
    let var = centred.sqr()?.mean_keepdim(dims)?;
    Ok(centred.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?)
}

pub(crate) fn forward(cfg: &CnnConfig, state: &ModelState, images: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = images.dims4()?;
    let s = cfg.stride();
    let (ph, pw) = (h.div_ceil(s) * s - h, w.div_ceil(s) * s - w);
    let mut x = images.pad_with_zeros(2, 0, ph)?.pad_with_zeros(3, 0, pw)?;
    x = ((x - 0.5)? / 0.25)?;
    for (i, l) in cfg.layers().iter().enumerate() {
        let weight = state.get(&format!("backbone.conv{i}.weight"))?;
        let bias = state.get(&format!("backbone.conv{i}.bias"))?;
        let weight = ((weight + weight.flip(&[3])?)? * 0.5)?;
        let pad = l.dilation * (l.kernel / 2);
        x = x
            .conv2d(&weight, pad, 1, l.dilation, 1)?
            .broadcast_add(&bias.reshape((1, l.cout, 1, 1))?)?;
        if l.relu {
            x = normalize(&x, cfg.norm)?.relu()?;
        }
        if l.pool_after {
            x = x.avg_pool2d(2)?;
        }
    }
    Ok(x)
}
