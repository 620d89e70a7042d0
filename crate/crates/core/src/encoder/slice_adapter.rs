//! 1x1 convolution mixing three consecutive slices into the three encoder
//! input channels. Initialized to the identity and always trainable.

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;

use super::state::{ModelState, ParamInit};
use super::SliceTriplet;
use crate::Result;

pub(crate) fn init(init: &mut ParamInit) -> Result<()> {
    init.add(
        "adapter.weight".into(),
        vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        &[3, 3],
    )?;
    init.constant("adapter.bias".into(), &[3], 0.0)
}

/// Applies the adapter to `3 x H x W` (or `B x 3 x H x W`) stacks.
pub(crate) fn adapt(stack: &Tensor, state: &ModelState) -> Result<Tensor> {
    let weight = state.get("adapter.weight")?.to_dtype(stack.dtype())?;
    let bias = state.get("adapter.bias")?.to_dtype(stack.dtype())?;
    let dims = stack.dims().to_vec();
    let n = dims.len();
    let (h, w) = (dims[n - 2], dims[n - 1]);
    let flat = stack.reshape(&[&dims[..n - 2], &[h * w]].concat()[..])?;
    let mixed = weight
        .broadcast_matmul(&flat)?
        .broadcast_add(&bias.reshape((3, 1))?)?;
    Ok(mixed.reshape(dims)?)
}

/// Per-pixel linear map of the triplet's channels, `3 x H x W`.
pub fn apply_slice_adapter(triplet: &SliceTriplet, state: &ModelState) -> Result<Array3<f32>> {
    let stack = crate::ops::array3_to_tensor(triplet.stacked()?.view(), DType::F32, &Device::Cpu)?;
    if !state.contains("adapter.weight") {
        return Err(crate::Error::InvalidConfig(
            "model has no slice adapter (input_mode is not slice_adapter)".into(),
        ));
    }
    crate::ops::tensor_to_array3(&adapt(&stack, state)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, InputMode, Param};
    use candle_core::Var;
    use ndarray::Array2;

    fn state_with(weight: [f32; 9], bias: [f32; 3]) -> ModelState {
        let mut cfg = EncoderConfig::cnn_default();
        cfg.input_mode = InputMode::SliceAdapter;
        let mut s = ModelState::init(&cfg).unwrap();
        let w = Tensor::from_vec(weight.to_vec(), (3, 3), &Device::Cpu).unwrap();
        let b = Tensor::from_vec(bias.to_vec(), 3, &Device::Cpu).unwrap();
        s.insert("adapter.weight".into(), Param::Trainable(Var::from_tensor(&w).unwrap()));
        s.insert("adapter.bias".into(), Param::Trainable(Var::from_tensor(&b).unwrap()));
        s
    }

    fn triplet() -> SliceTriplet {
        SliceTriplet::new([
            Array2::from_elem((2, 3), 1.0),
            Array2::from_shape_fn((2, 3), |(r, c)| (r * 3 + c) as f32),
            Array2::from_elem((2, 3), -2.0),
        ])
    }

    #[test]
    fn identity_returns_stack() {
        let s = state_with([1., 0., 0., 0., 1., 0., 0., 0., 1.], [0.; 3]);
        assert_eq!(apply_slice_adapter(&triplet(), &s).unwrap(), triplet().stacked().unwrap());
    }

    #[test]
    fn zero_weights_give_constant_bias() {
        let s = state_with([0.; 9], [0.5, -1.0, 2.0]);
        let out = apply_slice_adapter(&triplet(), &s).unwrap();
        for (c, b) in [0.5, -1.0, 2.0].iter().enumerate() {
            assert!(out.index_axis(ndarray::Axis(0), c).iter().all(|v| v == b));
        }
    }

    #[test]
    fn weighted_average_by_hand() {
        let row = [0.25, 0.5, 0.25];
        let s = state_with([row, row, row].concat().try_into().unwrap(), [0.; 3]);
        let out = apply_slice_adapter(&triplet(), &s).unwrap();
        // pixel (1, 2): 0.25 * 1 + 0.5 * 5 + 0.25 * -2 = 2.25
        assert_eq!(out[[0, 1, 2]], 2.25);
        assert_eq!(out[[2, 1, 2]], 2.25);
    }

    #[test]
    fn mismatched_slices_fail() {
        let s = state_with([0.; 9], [0.; 3]);
        let mut t = triplet();
        t.slices[0] = Array2::zeros((3, 3));
        assert!(apply_slice_adapter(&t, &s).is_err());
    }
}
