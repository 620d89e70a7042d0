//! Geometric and intensity augmentations for episode construction.
//!
//! Geometric transforms are applied to images with bilinear sampling and to
//! labels with nearest-neighbour sampling; intensity transforms touch images
//! only.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::superpixel::gaussian_smooth;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticSpec {
    /// Displacement magnitude in pixels.
    pub alpha: f64,
    /// Smoothing of the random displacement field in pixels.
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometricSpec {
    pub rotation_deg: [f64; 2],
    pub scale: [f64; 2],
    pub shear_deg: [f64; 2],
    /// Translation as a fraction of the image extent.
    pub translate_frac: [f64; 2],
    pub elastic: Option<ElasticSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensitySpec {
    pub gamma: [f64; 2],
    pub noise_std: f64,
    pub brightness: [f64; 2],
    pub contrast: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub geometric: GeometricSpec,
    pub intensity: IntensitySpec,
    pub seed: u64,
}

impl GeometricSpec {
    pub fn identity() -> Self {
        GeometricSpec {
            rotation_deg: [0.0, 0.0],
            scale: [1.0, 1.0],
            shear_deg: [0.0, 0.0],
            translate_frac: [0.0, 0.0],
            elastic: None,
        }
    }
}

impl IntensitySpec {
    pub fn identity() -> Self {
        IntensitySpec {
            gamma: [1.0, 1.0],
            noise_std: 0.0,
            brightness: [0.0, 0.0],
            contrast: [1.0, 1.0],
        }
    }
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            geometric: GeometricSpec {
                rotation_deg: [-15.0, 15.0],
                scale: [0.9, 1.1],
                shear_deg: [-5.0, 5.0],
                translate_frac: [-0.05, 0.05],
                elastic: Some(ElasticSpec {
                    alpha: 4.0,
                    sigma: 6.0,
                }),
            },
            intensity: IntensitySpec {
                gamma: [0.7, 1.4],
                noise_std: 0.02,
                brightness: [-0.05, 0.05],
                contrast: [0.9, 1.1],
            },
            seed: 0,
        }
    }
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        AugmentationSpec {
            geometric: GeometricSpec::identity(),
            intensity: IntensitySpec::identity(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometric;
        let i = &self.intensity;
        let ranges = [
            ("rotation_deg", g.rotation_deg),
            ("scale", g.scale),
            ("shear_deg", g.shear_deg),
            ("translate_frac", g.translate_frac),
            ("gamma", i.gamma),
            ("brightness", i.brightness),
            ("contrast", i.contrast),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::InvalidConfig(format!(
                    "augmentation range {name} = [{lo}, {hi}] must be finite and ordered"
                )));
            }
        }
        if g.scale[0] <= 0.0 || i.gamma[0] <= 0.0 {
            return Err(Error::InvalidConfig("scale and gamma must be positive".into()));
        }
        if !(i.noise_std.is_finite() && i.noise_std >= 0.0) {
            return Err(Error::InvalidConfig("noise_std must be finite and >= 0".into()));
        }
        if let Some(e) = &g.elastic {
            if !(e.alpha.is_finite() && e.sigma.is_finite() && e.alpha >= 0.0 && e.sigma >= 0.0) {
                return Err(Error::InvalidConfig("elastic parameters must be finite and >= 0".into()));
            }
        }
        Ok(())
    }
}

fn draw<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// A sampled geometric transform, stored as the inverse mapping from output
/// pixel `(x, y)` to source coordinates.
#[derive(Clone, Debug)]
pub struct GeometricTransform {
    size: (usize, usize),
    /// Inverse affine, `[x_src, y_src] = m * [x - cx - tx, y - cy - ty] + c`.
    inverse: [[f64; 2]; 2],
    translate: [f64; 2],
    displacement: Option<(Array2<f64>, Array2<f64>)>,
}

impl GeometricTransform {
    pub fn identity(size: (usize, usize)) -> Self {
        GeometricTransform {
            size,
            inverse: [[1.0, 0.0], [0.0, 1.0]],
            translate: [0.0, 0.0],
            displacement: None,
        }
    }

    /// Rotation by `degrees` about the image centre. Positive angles turn
    /// the image clockwise as displayed (rows pointing down).
    pub fn rotation(size: (usize, usize), degrees: f64) -> Self {
        Self::affine(size, degrees, 1.0, 0.0, [0.0, 0.0])
    }

    fn affine(size: (usize, usize), rot_deg: f64, scale: f64, shear_deg: f64, translate: [f64; 2]) -> Self {
        let (s, c) = rot_deg.to_radians().sin_cos();
        let sh = shear_deg.to_radians().tan();
        // forward = rotation * shear * scale
        let f = [
            [scale * c, scale * (c * sh - s)],
            [scale * s, scale * (s * sh + c)],
        ];
        let det = f[0][0] * f[1][1] - f[0][1] * f[1][0];
        let inverse = [
            [f[1][1] / det, -f[0][1] / det],
            [-f[1][0] / det, f[0][0] / det],
        ];
        GeometricTransform {
            size,
            inverse,
            translate,
            displacement: None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(spec: &GeometricSpec, size: (usize, usize), rng: &mut R) -> Self {
        let rot = draw(rng, spec.rotation_deg);
        let scale = draw(rng, spec.scale);
        let shear = draw(rng, spec.shear_deg);
        let tx = draw(rng, spec.translate_frac) * size.1 as f64;
        let ty = draw(rng, spec.translate_frac) * size.0 as f64;
        let mut t = Self::affine(size, rot, scale, shear, [tx, ty]);
        if let Some(e) = &spec.elastic {
            if e.alpha > 0.0 {
                let mut field = || {
                    let raw = Array2::from_shape_fn(size, |_| rng.random_range(-1.0..1.0));
                    gaussian_smooth(&raw, e.sigma).mapv(|v| v * e.alpha)
                };
                let dx = field();
                let dy = field();
                t.displacement = Some((dx, dy));
            }
        }
        t
    }

    pub fn is_identity(&self) -> bool {
        self.inverse == [[1.0, 0.0], [0.0, 1.0]] && self.translate == [0.0, 0.0] && self.displacement.is_none()
    }

    fn source(&self, y: usize, x: usize) -> (f64, f64) {
        let (h, w) = self.size;
        let cx = (w as f64 - 1.0) / 2.0;
        let cy = (h as f64 - 1.0) / 2.0;
        let (mut px, mut py) = (x as f64, y as f64);
        if let Some((dx, dy)) = &self.displacement {
            px += dx[[y, x]];
            py += dy[[y, x]];
        }
        let u = px - cx - self.translate[0];
        let v = py - cy - self.translate[1];
        let m = &self.inverse;
        (m[0][0] * u + m[0][1] * v + cx, m[1][0] * u + m[1][1] * v + cy)
    }

    pub fn apply_image(&self, img: &Array2<f32>) -> Array2<f32> {
        if self.is_identity() {
            return img.clone();
        }
        let (h, w) = img.dim();
        let at = |y: isize, x: isize| -> f64 {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                img[[y as usize, x as usize]] as f64
            }
        };
        Array2::from_shape_fn((h, w), |(y, x)| {
            let (sx, sy) = self.source(y, x);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            (top * (1.0 - fy) + bottom * fy) as f32
        })
    }

    pub fn apply_label<T: Copy + Default>(&self, label: &Array2<T>) -> Array2<T> {
        if self.is_identity() {
            return label.clone();
        }
        let (h, w) = label.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            let (sx, sy) = self.source(y, x);
            let (rx, ry) = (sx.round(), sy.round());
            if rx < 0.0 || ry < 0.0 || rx >= w as f64 || ry >= h as f64 {
                T::default()
            } else {
                label[[ry as usize, rx as usize]]
            }
        })
    }
}

#[derive(Clone, Debug)]
pub struct IntensityTransform {
    gamma: f64,
    contrast: f64,
    brightness: f64,
    noise_std: f64,
    noise_seed: u64,
}

impl IntensityTransform {
    pub fn identity() -> Self {
        IntensityTransform {
            gamma: 1.0,
            contrast: 1.0,
            brightness: 0.0,
            noise_std: 0.0,
            noise_seed: 0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(spec: &IntensitySpec, rng: &mut R) -> Self {
        IntensityTransform {
            gamma: draw(rng, spec.gamma),
            contrast: draw(rng, spec.contrast),
            brightness: draw(rng, spec.brightness),
            noise_std: spec.noise_std,
            noise_seed: rng.random(),
        }
    }

    /// Applies the same transform to every channel; noise is drawn per channel.
    pub fn apply(&self, img: &Array2<f32>, channel: u64) -> Array2<f32> {
        let mut out = img.clone();
        if self.gamma != 1.0 {
            out.mapv_inplace(|v| (v.max(0.0) as f64).powf(self.gamma) as f32);
        }
        if self.contrast != 1.0 || self.brightness != 0.0 {
            let mean = out.mean().unwrap_or(0.0) as f64;
            out.mapv_inplace(|v| ((v as f64 - mean) * self.contrast + mean + self.brightness) as f32);
        }
        if self.noise_std > 0.0 {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.noise_seed);
            rng.set_stream(channel);
            let normal = Normal::new(0.0, self.noise_std).expect("validated std");
            out.mapv_inplace(|v| v + normal.sample(&mut rng) as f32);
        }
        out
    }
}
