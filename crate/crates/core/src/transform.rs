//! Invertible image transformations and their inverse warps on feature maps.
//!
//! Spatial warps resample through [`Graph::bilinear_sample`] with
//! corner-aligned normalized grids; horizontal flips are exact index
//! reversals. Every warp reports a validity mask so losses can be restricted
//! to the region where the transformed view overlaps the original.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{sample_tensor, Graph, Tensor, Var};

pub const MIN_SCALE: f64 = 0.3;
pub const MAX_SCALE: f64 = 2.0;
pub const MAX_DEFAULT_ROTATION: f64 = 15.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformSpec {
    Hflip,
    Resize {
        scale: f64,
    },
    /// Counter-clockwise rotation about the image center, in degrees.
    Rotate {
        degrees: f64,
    },
    /// `gain * (x - 0.5) + 0.5 + offset`, clipped to `[0, 1]`.
    ColorJitter {
        brightness: f64,
        contrast: f64,
    },
}

/// Warped tensor plus its `{0,1}` validity mask at output resolution.
#[derive(Clone, Debug)]
pub struct WarpResult {
    pub output: Tensor,
    pub validity_mask: Tensor,
}

/// Graph-recorded warp.
#[derive(Clone, Debug)]
pub struct WarpVar {
    pub output: Var,
    pub validity_mask: Tensor,
}

impl TransformSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TransformSpec::Resize { scale } if !(MIN_SCALE..=MAX_SCALE).contains(&scale) => {
                Err(Error::config(format!(
                    "resize scale {scale} outside [{MIN_SCALE}, {MAX_SCALE}]"
                )))
            }
            TransformSpec::Rotate { degrees } if !(-180.0..=180.0).contains(&degrees) => Err(
                Error::config(format!("rotation {degrees} outside [-180, 180]")),
            ),
            TransformSpec::ColorJitter {
                brightness,
                contrast,
            } if !(brightness.is_finite() && contrast.is_finite() && contrast > 0.0) => Err(
                Error::config(format!("invalid color jitter ({brightness}, {contrast})")),
            ),
            _ => Ok(()),
        }
    }

    pub fn is_spatial(&self) -> bool {
        !matches!(self, TransformSpec::ColorJitter { .. })
    }

    pub fn label(&self) -> String {
        match self {
            TransformSpec::Hflip => "hflip".into(),
            TransformSpec::Resize { scale } => format!("resize({scale:.3})"),
            TransformSpec::Rotate { degrees } => format!("rotate({degrees:.2})"),
            TransformSpec::ColorJitter {
                brightness,
                contrast,
            } => format!("jitter({brightness:.3},{contrast:.3})"),
        }
    }

    /// Output extent of the forward warp on an `h × w` input.
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        match *self {
            TransformSpec::Resize { scale } => (
                ((h as f64 * scale).round() as usize).max(2),
                ((w as f64 * scale).round() as usize).max(2),
            ),
            _ => (h, w),
        }
    }

    /// Forward warp `g(x)`, recorded on the graph.
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<WarpVar> {
        self.validate()?;
        let (n, _, h, w) = g.value(x).dims4("transform")?;
        match *self {
            TransformSpec::Hflip => Ok(WarpVar {
                output: g.flip_w(x)?,
                validity_mask: Tensor::ones(&[n, 1, h, w]),
            }),
            TransformSpec::ColorJitter {
                brightness,
                contrast,
            } => {
                let y = g.add_scalar(x, -0.5)?;
                let y = g.mul_scalar(y, contrast)?;
                let y = g.add_scalar(y, 0.5 + brightness)?;
                let y = g.clamp(y, 0.0, 1.0)?;
                Ok(WarpVar {
                    output: y,
                    validity_mask: Tensor::ones(&[n, 1, h, w]),
                })
            }
            TransformSpec::Resize { .. } | TransformSpec::Rotate { .. } => {
                let (ho, wo) = self.output_size(h, w);
                let grid = self.forward_grid(n, ho, wo);
                let (output, validity_mask) = g.bilinear_sample(x, &grid)?;
                Ok(WarpVar {
                    output,
                    validity_mask,
                })
            }
        }
    }

    /// `g⁻¹` applied to a feature map computed on a transformed input,
    /// resampled back to the reference `ref_h × ref_w` geometry.
    ///
    /// Color jitter has no spatial component, so its inverse here is the
    /// identity.
    pub fn apply_inverse_to_features(
        &self,
        g: &mut Graph,
        feat: Var,
        ref_h: usize,
        ref_w: usize,
    ) -> Result<WarpVar> {
        self.validate()?;
        let (n, _, h, w) = g.value(feat).dims4("inverse transform")?;
        match *self {
            TransformSpec::Hflip | TransformSpec::ColorJitter { .. } => {
                if (h, w) != (ref_h, ref_w) {
                    return Err(Error::shape(
                        "inverse transform",
                        format!("{h}x{w} features for a {ref_h}x{ref_w} reference"),
                    ));
                }
                let out = if matches!(self, TransformSpec::Hflip) {
                    g.flip_w(feat)?
                } else {
                    feat
                };
                Ok(WarpVar {
                    output: out,
                    validity_mask: Tensor::ones(&[n, 1, ref_h, ref_w]),
                })
            }
            TransformSpec::Resize { .. } | TransformSpec::Rotate { .. } => {
                let grid = self.inverse_grid(n, ref_h, ref_w);
                let (output, validity_mask) = g.bilinear_sample(feat, &grid)?;
                Ok(WarpVar {
                    output,
                    validity_mask,
                })
            }
        }
    }

    /// Positions of the `ref_h × ref_w` reference map where the round trip
    /// `g⁻¹ ∘ g` is defined: the inverse sample lands inside the transformed
    /// view and that location itself came from inside the source image.
    pub fn overlap_mask(
        &self,
        img_h: usize,
        img_w: usize,
        ref_h: usize,
        ref_w: usize,
    ) -> Result<Tensor> {
        match *self {
            TransformSpec::Hflip
            | TransformSpec::ColorJitter { .. }
            | TransformSpec::Resize { .. } => Ok(Tensor::ones(&[1, 1, ref_h, ref_w])),
            TransformSpec::Rotate { .. } => {
                let (ho, wo) = self.output_size(img_h, img_w);
                let fwd = sample_tensor(
                    &Tensor::ones(&[1, 1, img_h, img_w]),
                    &self.forward_grid(1, ho, wo),
                )?
                .mask;
                let back = sample_tensor(&fwd, &self.inverse_grid(1, ref_h, ref_w))?;
                Ok(back.output.zip_map(&back.mask, |v, m| {
                    if m > 0.5 && v >= 1.0 - 1e-9 {
                        1.0
                    } else {
                        0.0
                    }
                })?)
            }
        }
    }

    /// Sampling grid for the forward warp: output pixel → source location.
    pub fn forward_grid(&self, n: usize, ho: usize, wo: usize) -> Tensor {
        match *self {
            TransformSpec::Rotate { degrees } => rotation_grid(n, ho, wo, -degrees),
            TransformSpec::Hflip => Tensor::from_fn(&[n, ho, wo, 2], |k| {
                let v = identity_coord(k, ho, wo);
                if k % 2 == 0 {
                    -v
                } else {
                    v
                }
            }),
            _ => identity_grid(n, ho, wo),
        }
    }

    /// Sampling grid for the inverse warp at reference resolution.
    pub fn inverse_grid(&self, n: usize, ho: usize, wo: usize) -> Tensor {
        match *self {
            TransformSpec::Rotate { degrees } => rotation_grid(n, ho, wo, degrees),
            TransformSpec::Hflip => TransformSpec::Hflip.forward_grid(n, ho, wo),
            _ => identity_grid(n, ho, wo),
        }
    }
}

fn norm_coord(i: usize, extent: usize) -> f64 {
    if extent <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (extent - 1) as f64 - 1.0
    }
}

fn identity_coord(k: usize, ho: usize, wo: usize) -> f64 {
    let p = k / 2;
    let (y, x) = ((p / wo) % ho, p % wo);
    if k % 2 == 0 {
        norm_coord(x, wo)
    } else {
        norm_coord(y, ho)
    }
}

/// Corner-aligned identity grid, `(N, H, W, 2)` holding `(x, y)`.
pub fn identity_grid(n: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[n, h, w, 2], |k| identity_coord(k, h, w))
}

/// Grid that reads each output pixel from the source location rotated by
/// `degrees` about the center (pixel units, y down).
fn rotation_grid(n: usize, h: usize, w: usize, degrees: f64) -> Tensor {
    let (s, c) = degrees.to_radians().sin_cos();
    let hx = (w as f64 - 1.0) * 0.5;
    let hy = (h as f64 - 1.0) * 0.5;
    let mut data = Vec::with_capacity(n * h * w * 2);
    for _ in 0..n {
        for y in 0..h {
            for x in 0..w {
                let u = x as f64 - hx;
                let v = y as f64 - hy;
                // Visual counter-clockwise rotation with the y axis pointing down.
                let su = c * u + s * v;
                let sv = -s * u + c * v;
                data.push(if hx > 0.0 { su / hx } else { 0.0 });
                data.push(if hy > 0.0 { sv / hy } else { 0.0 });
            }
        }
    }
    Tensor::new(vec![n, h, w, 2], data).expect("grid shape")
}

/// Apply a transform to a plain tensor.
pub fn apply(spec: &TransformSpec, x: &Tensor) -> Result<WarpResult> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let r = spec.apply(&mut g, xv)?;
    Ok(WarpResult {
        output: g.value(r.output).clone(),
        validity_mask: r.validity_mask,
    })
}

/// Inverse-warp a plain feature map to the given reference extent.
pub fn apply_inverse_to_features(
    spec: &TransformSpec,
    feat: &Tensor,
    ref_h: usize,
    ref_w: usize,
) -> Result<WarpResult> {
    let mut g = Graph::new();
    let fv = g.constant(feat.clone());
    let r = spec.apply_inverse_to_features(&mut g, fv, ref_h, ref_w)?;
    Ok(WarpResult {
        output: g.value(r.output).clone(),
        validity_mask: r.validity_mask,
    })
}

/// Eight transforms: four resizes with scales in `[0.3, 2]`, one color
/// jitter, one horizontal flip and two rotations within ±15°.
pub fn default_transform_set(seed: u64) -> Vec<TransformSpec> {
    let mut rng = seed::child_rng(seed, "transforms", 0);
    let mut specs = Vec::with_capacity(8);
    // One scale from each quarter of the range, so every set mixes strong
    // downscales with upscales.
    let quarter = (MAX_SCALE - MIN_SCALE) / 4.0;
    for k in 0..4 {
        let lo = MIN_SCALE + k as f64 * quarter;
        specs.push(TransformSpec::Resize {
            scale: rng.random_range(lo..=lo + quarter).min(MAX_SCALE),
        });
    }
    specs.push(TransformSpec::ColorJitter {
        brightness: rng.random_range(-0.2..=0.2),
        contrast: rng.random_range(0.8..=1.2),
    });
    specs.push(TransformSpec::Hflip);
    for _ in 0..2 {
        specs.push(TransformSpec::Rotate {
            degrees: rng.random_range(-MAX_DEFAULT_ROTATION..=MAX_DEFAULT_ROTATION),
        });
    }
    specs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[1, 3, h, w], |k| {
            let (c, y, x) = (k / (h * w), (k / w) % h, k % w);
            0.2 + 0.5 * (x as f64 / w as f64) * (1.0 + 0.1 * c as f64) + 0.2 * (y as f64 / h as f64)
        })
    }

    fn smooth(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[1, 3, h, w], |k| {
            let (c, y, x) = (k / (h * w), (k / w) % h, k % w);
            0.5 + 0.3 * ((x as f64 * 0.2 + c as f64).sin() * (y as f64 * 0.15).cos())
        })
    }

    #[test]
    fn hflip_is_an_exact_involution() {
        let x = smooth(9, 13);
        let once = apply(&TransformSpec::Hflip, &x).unwrap();
        let twice = apply(&TransformSpec::Hflip, &once.output).unwrap();
        assert_eq!(twice.output, x);
        assert!(twice.validity_mask.data().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn zero_rotation_is_identity() {
        let x = smooth(16, 16);
        let r = apply(&TransformSpec::Rotate { degrees: 0.0 }, &x).unwrap();
        assert!(r.output.max_abs_diff(&x) < 1e-12);
        assert!(r.validity_mask.data().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn resize_round_trip_on_smooth_image() {
        let x = ramp(32, 32);
        let up = apply(&TransformSpec::Resize { scale: 2.0 }, &x).unwrap();
        assert_eq!(up.output.shape(), &[1, 3, 64, 64]);
        let down = apply(&TransformSpec::Resize { scale: 0.5 }, &up.output).unwrap();
        assert_eq!(down.output.shape(), &[1, 3, 32, 32]);
        assert!(down.output.max_abs_diff(&x) < 0.05);
    }

    #[test]
    fn inverse_recovers_image_on_valid_pixels() {
        let x = smooth(32, 32);
        for spec in [
            TransformSpec::Resize { scale: 0.7 },
            TransformSpec::Resize { scale: 1.6 },
            TransformSpec::Rotate { degrees: 12.0 },
            TransformSpec::Rotate { degrees: -9.0 },
        ] {
            let fwd = apply(&spec, &x).unwrap();
            let back = apply_inverse_to_features(&spec, &fwd.output, 32, 32).unwrap();
            let mask = spec.overlap_mask(32, 32, 32, 32).unwrap();
            let mut worst: f64 = 0.0;
            for c in 0..3 {
                for p in 0..32 * 32 {
                    if mask.data()[p] > 0.5 {
                        worst = worst
                            .max((back.output.data()[c * 1024 + p] - x.data()[c * 1024 + p]).abs());
                    }
                }
            }
            assert!(worst < 0.05, "{spec:?}: {worst}");
        }
    }

    #[test]
    fn rotation_grids_compose_to_identity() {
        let spec = TransformSpec::Rotate { degrees: 15.0 };
        let (h, w) = (32, 32);
        // Treat the forward grid as a two-channel image and read it at the
        // locations given by the inverse grid; bilinear interpolation of an
        // affine field is exact, so the composition must be the identity.
        let fwd = spec.forward_grid(1, h, w);
        let planes = Tensor::from_fn(&[1, 2, h, w], |k| {
            fwd.data()[2 * (k % (h * w)) + k / (h * w)]
        });
        let composed = sample_tensor(&planes, &spec.inverse_grid(1, h, w)).unwrap();
        let id = identity_grid(1, h, w);
        for y in 4..28 {
            for x in 4..28 {
                let p = y * w + x;
                assert_eq!(composed.mask.data()[p], 1.0);
                for axis in 0..2 {
                    let got = composed.output.data()[axis * h * w + p];
                    assert!((got - id.data()[2 * p + axis]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn rotation_mask_excludes_corners() {
        let spec = TransformSpec::Rotate { degrees: 15.0 };
        let fwd = apply(&spec, &smooth(32, 32)).unwrap();
        let m = &fwd.validity_mask;
        assert_eq!(m.data()[0], 0.0);
        assert_eq!(m.data()[31], 0.0);
        assert_eq!(m.data()[32 * 31], 0.0);
        assert_eq!(m.data()[32 * 32 - 1], 0.0);
        assert_eq!(m.data()[16 * 32 + 16], 1.0);
        let overlap = spec.overlap_mask(32, 32, 32, 32).unwrap();
        assert_eq!(overlap.data()[0], 0.0);
        assert_eq!(overlap.data()[16 * 32 + 16], 1.0);
    }

    #[test]
    fn default_set_matches_recipe() {
        let a = default_transform_set(3);
        assert_eq!(a.len(), 8);
        assert_eq!(a, default_transform_set(3));
        assert_ne!(a, default_transform_set(4));
        let count = |f: fn(&TransformSpec) -> bool| a.iter().filter(|s| f(s)).count();
        assert_eq!(count(|s| matches!(s, TransformSpec::Resize { .. })), 4);
        assert_eq!(count(|s| matches!(s, TransformSpec::ColorJitter { .. })), 1);
        assert_eq!(count(|s| matches!(s, TransformSpec::Hflip)), 1);
        assert_eq!(count(|s| matches!(s, TransformSpec::Rotate { .. })), 2);
        let scales: Vec<f64> = a
            .iter()
            .filter_map(|s| match s {
                TransformSpec::Resize { scale } => Some(*scale),
                _ => None,
            })
            .collect();
        assert!(scales[0] <= 0.725 && scales[3] >= 1.575, "{scales:?}");
        for s in &a {
            s.validate().unwrap();
            if let TransformSpec::Rotate { degrees } = s {
                assert!(degrees.abs() <= 15.0);
            }
        }
    }

    #[test]
    fn out_of_range_parameters_are_rejected() {
        let x = smooth(8, 8);
        assert!(apply(&TransformSpec::Resize { scale: 0.2 }, &x).is_err());
        assert!(apply(&TransformSpec::Resize { scale: 2.5 }, &x).is_err());
        assert!(apply(&TransformSpec::Rotate { degrees: 181.0 }, &x).is_err());
        assert!(apply(&TransformSpec::Rotate { degrees: 120.0 }, &x).is_ok());
    }

    #[test]
    fn transform_set_serializes_as_json_list() {
        let set = default_transform_set(1);
        let json = serde_json::to_string(&set).unwrap();
        assert!(json.starts_with("[{\"kind\":\"resize\""));
        let back: Vec<TransformSpec> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, set);
    }
}
