//! Separable 1D resampling kernels shared by the image path (ndarray) and the
//! differentiable path (tensors, as interpolation matrices).
//!
//! Bilinear sampling uses half-pixel centers: output index `i` reads input
//! coordinate `(i + 0.5) * n_in / n_out - 0.5`, clamped to the valid range.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, ArrayView2};

use crate::Result;

/// One output sample as a weighted sum of input samples.
pub type Taps = Vec<(usize, f64)>;

pub fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<Taps> {
    bilinear_taps_scaled(n_in, n_out, n_in as f64 / n_out as f64)
}

/// Bilinear taps where one output step spans `scale` input samples.
pub fn bilinear_taps_scaled(n_in: usize, n_out: usize, scale: f64) -> Vec<Taps> {
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            let w1 = src - i0 as f64;
            if i1 == i0 || w1 == 0.0 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - w1), (i1, w1)]
            }
        })
        .collect()
}

/// Area (box) averaging taps: each output cell averages the input samples it
/// overlaps, weighted by overlap length.
pub fn area_taps(n_in: usize, n_out: usize) -> Vec<Taps> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n_in);
            (first..last)
                .filter_map(|j| {
                    let overlap = (hi.min((j + 1) as f64) - lo.max(j as f64)).max(0.0);
                    (overlap > 0.0).then_some((j, overlap / scale))
                })
                .collect()
        })
        .collect()
}

pub fn nearest_index(n_in: usize, n_out: usize, i: usize) -> usize {
    let src = ((i as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize;
    src.min(n_in - 1)
}

/// Dense `n_out x n_in` matrix form of a tap list.
pub fn taps_matrix(taps: &[Taps], n_in: usize) -> Vec<f64> {
    let mut m = vec![0.0; taps.len() * n_in];
    for (i, row) in taps.iter().enumerate() {
        for &(j, w) in row {
            m[i * n_in + j] += w;
        }
    }
    m
}

fn apply_separable(src: ArrayView2<f32>, rows: &[Taps], cols: &[Taps]) -> Array2<f32> {
    let (h_in, _) = src.dim();
    let mut tmp = Array2::<f64>::zeros((h_in, cols.len()));
    for r in 0..h_in {
        for (c, taps) in cols.iter().enumerate() {
            tmp[[r, c]] = taps.iter().map(|&(j, w)| w * src[[r, j]] as f64).sum();
        }
    }
    let mut out = Array2::<f32>::zeros((rows.len(), cols.len()));
    for (r, taps) in rows.iter().enumerate() {
        for c in 0..cols.len() {
            out[[r, c]] = taps.iter().map(|&(j, w)| w * tmp[[j, c]]).sum::<f64>() as f32;
        }
    }
    out
}

pub fn resize_bilinear(src: ArrayView2<f32>, size: (usize, usize)) -> Array2<f32> {
    let (h, w) = src.dim();
    if (h, w) == size {
        return src.as_standard_layout().into_owned();
    }
    apply_separable(src, &bilinear_taps(h, size.0), &bilinear_taps(w, size.1))
}

pub fn resize_nearest<T: Copy + Default>(src: ArrayView2<T>, size: (usize, usize)) -> Array2<T> {
    let (h, w) = src.dim();
    if (h, w) == size {
        return src.as_standard_layout().into_owned();
    }
    Array2::from_shape_fn(size, |(r, c)| {
        src[[nearest_index(h, size.0, r), nearest_index(w, size.1, c)]]
    })
}

/// Fractional coverage of each target cell by a (soft) mask.
pub fn downsample_area(src: ArrayView2<f32>, size: (usize, usize)) -> Array2<f32> {
    let (h, w) = src.dim();
    if (h, w) == size {
        return src.as_standard_layout().into_owned();
    }
    apply_separable(src, &area_taps(h, size.0), &area_taps(w, size.1))
}

fn matrix_tensor(taps: &[Taps], n_in: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let m = taps_matrix(taps, n_in);
    Ok(Tensor::from_vec(m, (taps.len(), n_in), device)?.to_dtype(dtype)?)
}

/// Applies row/column resampling matrices to the two trailing axes of `t`.
pub fn resample_tensor(t: &Tensor, rows: &[Taps], cols: &[Taps]) -> Result<Tensor> {
    let dims = t.dims();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let ry = matrix_tensor(rows, h, t.dtype(), t.device())?;
    let rx = matrix_tensor(cols, w, t.dtype(), t.device())?;
    let out = ry.broadcast_matmul(t)?;
    Ok(out.broadcast_matmul(&rx.t()?)?)
}

/// Differentiable bilinear resize of the trailing two axes.
pub fn resize_tensor_bilinear(t: &Tensor, size: (usize, usize)) -> Result<Tensor> {
    let dims = t.dims();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    if (h, w) == size {
        return Ok(t.clone());
    }
    resample_tensor(t, &bilinear_taps(h, size.0), &bilinear_taps(w, size.1))
}
