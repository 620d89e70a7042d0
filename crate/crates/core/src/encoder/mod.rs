//! Dense feature extraction.
//!
//! An [`EncoderConfig`] selects the backbone, how a slice (or slice triplet)
//! becomes a 3-channel input, and the working grid on which prototypes are
//! pooled. Parameters live in a [`ModelState`].

mod cnn;
mod lora;
mod slice_adapter;
mod state;
mod vit;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

pub use cnn::{CnnConfig, CnnNorm};
pub use lora::{wrap_with_low_rank_adapters, LoraTarget, LowRankAdapterSpec};
pub use slice_adapter::apply_slice_adapter;
pub use state::{ModelState, Param, WeightsRef};
pub use vit::VitConfig;

use crate::resample::{bilinear_taps, resample_tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backbone {
    DilatedCnn(CnnConfig),
    FoundationVit(VitConfig),
}

impl Backbone {
    /// Input pixels per native backbone output cell.
    pub fn stride(&self) -> usize {
        match self {
            Backbone::DilatedCnn(c) => c.stride(),
            Backbone::FoundationVit(v) => v.patch_size,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Backbone::DilatedCnn(c) => c.out_dim,
            Backbone::FoundationVit(v) => v.hidden,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// The centre slice repeated across the three channels.
    Replicate1Slice,
    /// `(z-1, z, z+1)` as the three channels.
    Stack3Slice,
    /// `(z-1, z, z+1)` mixed by a learned 1x1 convolution.
    SliceAdapter,
}

/// Spatial size of the feature grid handed to the prototype head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureUpsample {
    /// Keep the backbone's native grid.
    None,
    /// `ceil(input / n)` in each dimension.
    Divisor(usize),
    Size(usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub backbone: Backbone,
    pub input_mode: InputMode,
    pub train_resolution: (usize, usize),
    pub test_resolution: (usize, usize),
    #[serde(default)]
    pub lora: Option<LowRankAdapterSpec>,
    pub feature_upsample: FeatureUpsample,
    /// Pretrained backbone weights; random initialization when absent.
    #[serde(default)]
    pub weights: Option<WeightsRef>,
    #[serde(default)]
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::cnn_default()
    }
}

impl EncoderConfig {
    pub fn cnn_default() -> Self {
        EncoderConfig {
            backbone: Backbone::DilatedCnn(CnnConfig::default()),
            input_mode: InputMode::Replicate1Slice,
            train_resolution: (256, 256),
            test_resolution: (256, 256),
            lora: None,
            feature_upsample: FeatureUpsample::Divisor(4),
            weights: None,
            init_seed: 0,
        }
    }

    pub fn vit_large() -> Self {
        EncoderConfig {
            backbone: Backbone::FoundationVit(VitConfig::large()),
            input_mode: InputMode::Replicate1Slice,
            train_resolution: (252, 252),
            test_resolution: (672, 672),
            lora: Some(LowRankAdapterSpec::default()),
            feature_upsample: FeatureUpsample::Divisor(4),
            weights: None,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for res in [self.train_resolution, self.test_resolution] {
            backbone_input_shape(&self.backbone, res)?;
        }
        if let FeatureUpsample::Divisor(0) | FeatureUpsample::Size(0, _) | FeatureUpsample::Size(_, 0) =
            self.feature_upsample
        {
            return Err(Error::InvalidConfig("feature_upsample must be positive".into()));
        }
        if let Some(spec) = &self.lora {
            spec.validate(&self.backbone)?;
        }
        match &self.backbone {
            Backbone::DilatedCnn(c) => c.validate(),
            Backbone::FoundationVit(v) => v.validate(),
        }
    }

    /// Working grid for an input of `shape`.
    pub fn feature_grid(&self, shape: (usize, usize)) -> Result<(usize, usize)> {
        let native = backbone_input_shape(&self.backbone, shape)?;
        let s = self.backbone.stride();
        Ok(match self.feature_upsample {
            FeatureUpsample::None => (native.0 / s, native.1 / s),
            FeatureUpsample::Divisor(d) => (shape.0.div_ceil(d), shape.1.div_ceil(d)),
            FeatureUpsample::Size(h, w) => (h, w),
        })
    }
}

/// Shape actually fed to the backbone for an input of `shape`: the CNN
/// zero-pads to a multiple of its stride, the ViT resizes down to a multiple
/// of its patch size.
pub fn backbone_input_shape(backbone: &Backbone, shape: (usize, usize)) -> Result<(usize, usize)> {
    let s = backbone.stride();
    match backbone {
        Backbone::DilatedCnn(_) => {
            if shape.0 == 0 || shape.1 == 0 {
                return Err(Error::InvalidInput(format!("empty input {shape:?}")));
            }
            Ok((shape.0.div_ceil(s) * s, shape.1.div_ceil(s) * s))
        }
        Backbone::FoundationVit(_) => {
            if shape.0 < s || shape.1 < s {
                return Err(Error::InvalidInput(format!(
                    "input {shape:?} is smaller than one {s}x{s} patch"
                )));
            }
            Ok((shape.0 / s * s, shape.1 / s * s))
        }
    }
}

/// Three consecutive axial slices `(z-1, z, z+1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceTriplet {
    pub slices: [Array2<f32>; 3],
    pub center_index: usize,
}

impl SliceTriplet {
    pub fn new(slices: [Array2<f32>; 3]) -> Self {
        SliceTriplet {
            slices,
            center_index: 0,
        }
    }

    pub fn at(mut self, z: usize) -> Self {
        self.center_index = z;
        self
    }

    /// A triplet whose three slices are all `image`.
    pub fn replicate(image: Array2<f32>) -> Self {
        SliceTriplet::new([image.clone(), image.clone(), image])
    }

    pub fn center(&self) -> &Array2<f32> {
        &self.slices[1]
    }

    pub fn shape(&self) -> Result<(usize, usize)> {
        let shape = self.slices[1].dim();
        if self.slices.iter().any(|s| s.dim() != shape) {
            return Err(Error::ShapeMismatch(format!(
                "triplet slices differ in shape: {:?}",
                self.slices.iter().map(|s| s.dim()).collect::<Vec<_>>()
            )));
        }
        Ok(shape)
    }

    pub fn map(&self, mut f: impl FnMut(&Array2<f32>) -> Array2<f32>) -> SliceTriplet {
        SliceTriplet {
            slices: [f(&self.slices[0]), f(&self.slices[1]), f(&self.slices[2])],
            center_index: self.center_index,
        }
    }

    pub fn stacked(&self) -> Result<Array3<f32>> {
        let (h, w) = self.shape()?;
        let mut out = Array3::zeros((3, h, w));
        for (c, s) in self.slices.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), c).assign(s);
        }
        Ok(out)
    }
}

/// Encoder output for one image.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    /// `D x H' x W'`.
    pub values: Tensor,
    /// Input pixels per feature cell along each axis.
    pub stride: (f64, f64),
    pub source_shape: (usize, usize),
}

impl FeatureMap {
    pub fn new(values: Tensor, source_shape: (usize, usize)) -> Result<Self> {
        let (_, h, w) = values.dims3()?;
        Ok(FeatureMap {
            values,
            stride: (source_shape.0 as f64 / h as f64, source_shape.1 as f64 / w as f64),
            source_shape,
        })
    }

    pub fn from_array(values: &Array3<f32>, source_shape: (usize, usize)) -> Result<Self> {
        let t = crate::ops::array3_to_tensor(values.view(), DType::F32, &Device::Cpu)?;
        Self::new(t, source_shape)
    }

    pub fn dim(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        let d = self.values.dims();
        (d[1], d[2])
    }

    pub fn to_array(&self) -> Result<Array3<f32>> {
        crate::ops::tensor_to_array3(&self.values)
    }
}

/// Builds the `3 x H x W` backbone input for a triplet under `mode`.
pub fn input_tensor(triplet: &SliceTriplet, mode: InputMode, state: &ModelState) -> Result<Tensor> {
    let stacked = match mode {
        InputMode::Replicate1Slice => SliceTriplet::replicate(triplet.center().clone()).stacked()?,
        InputMode::Stack3Slice => triplet.stacked()?,
        InputMode::SliceAdapter => {
            let t = crate::ops::array3_to_tensor(triplet.stacked()?.view(), DType::F32, &Device::Cpu)?;
            return slice_adapter::adapt(&t, state);
        }
    };
    crate::ops::array3_to_tensor(stacked.view(), DType::F32, &Device::Cpu)
}

/// Differentiable forward pass over a batch `B x 3 x H x W`, returning
/// features on the working grid, `B x D x H' x W'`.
pub fn forward(state: &ModelState, images: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = images.dims4()?;
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("expected 3 input channels, got {c}")));
    }
    let config = &state.config;
    let native = match &config.backbone {
        Backbone::DilatedCnn(cfg) => cnn::forward(cfg, state, images)?,
        Backbone::FoundationVit(cfg) => vit::forward(cfg, state, images)?,
    };
    let (_, _, nh, nw) = native.dims4()?;
    let (gh, gw) = config.feature_grid((h, w))?;
    if (gh, gw) == (nh, nw) {
        Ok(native)
    } else {
        resample_tensor(&native, &bilinear_taps(nh, gh), &bilinear_taps(nw, gw))
    }
}

/// Encodes a batch of triplets; the result keeps the autodiff graph.
pub fn encode_batch(state: &ModelState, inputs: &[&SliceTriplet]) -> Result<Vec<FeatureMap>> {
    let Some(first) = inputs.first() else {
        return Ok(Vec::new());
    };
    let shape = first.shape()?;
    let tensors = inputs
        .iter()
        .map(|t| {
            if t.shape()? != shape {
                return Err(Error::ShapeMismatch("batch inputs differ in shape".into()));
            }
            input_tensor(t, state.config.input_mode, state)
        })
        .collect::<Result<Vec<_>>>()?;
    let batch = Tensor::stack(&tensors, 0)?;
    let feats = forward(state, &batch)?;
    (0..inputs.len())
        .map(|i| FeatureMap::new(feats.get(i)?, shape))
        .collect()
}

/// Encodes one slice triplet (eval mode: the result is detached).
pub fn encode(input: &SliceTriplet, state: &ModelState) -> Result<FeatureMap> {
    let mut fm = encode_batch(state, &[input])?.remove(0);
    fm.values = fm.values.detach();
    Ok(fm)
}
