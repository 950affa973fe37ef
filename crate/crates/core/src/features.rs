//! Per-detection input features for the covariance network.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{inverse_pose, transform_box, wrap_angle, Box7, PoseYawT};
use crate::linalg::Mat;

pub const POSITIONAL_LEN: usize = 18;
/// Frequency count per encoded scalar; each scalar becomes `2 * d` values.
pub const DEFAULT_ENCODING_DIM: usize = 128;
const FRAME_TOLERANCE: f64 = 1e-6;

/// `f_global (8) ⊕ f_local (5) ⊕ f_local_to_global (5)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionalFeature(pub [f64; POSITIONAL_LEN]);

impl PositionalFeature {
    pub fn global(&self) -> &[f64] {
        &self.0[0..8]
    }

    pub fn local(&self) -> &[f64] {
        &self.0[8..13]
    }

    pub fn transform(&self) -> &[f64] {
        &self.0[13..18]
    }
}

/// Builds the 18-entry positional feature of one detection.
///
/// `det_global` must equal `transform_box(det_local, pose)` to within 1e-6.
pub fn extract_positional(
    det_global: &Box7,
    det_local: &Box7,
    pose: &PoseYawT,
) -> Result<PositionalFeature> {
    let expected = transform_box(det_local, pose);
    let gap = expected
        .center_distance(det_global)
        .max(wrap_angle(expected.a - det_global.a).abs());
    if !(gap <= FRAME_TOLERANCE) {
        return Err(Error::Input(format!(
            "global detection is not the transformed local detection (gap {gap:.3e})"
        )));
    }
    let g = det_global;
    let l = det_local;
    Ok(PositionalFeature([
        g.x,
        g.y,
        g.z,
        g.a,
        g.l,
        g.w,
        g.h,
        g.x.hypot(g.y),
        l.x,
        l.y,
        l.z,
        l.a,
        l.x.hypot(l.y),
        pose.tx,
        pose.ty,
        pose.tz,
        pose.yaw,
        pose.translation_norm_xy(),
    ]))
}

/// Recomputes the local entries from the global ones via the inverse pose.
pub fn local_from_global(f: &PositionalFeature) -> Result<[f64; 5]> {
    let g = f.global();
    let t = f.transform();
    let pose = PoseYawT::new(t[0], t[1], t[2], t[3]);
    let b = Box7::new(g[0], g[1], g[2], g[3], g[4], g[5], g[6])?;
    let local = transform_box(&b, &inverse_pose(&pose));
    Ok([local.x, local.y, local.z, local.a, local.x.hypot(local.y)])
}

/// Per-entry `[min, max]` ranges mapped onto `[-π, π]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NormalizationBounds(pub Vec<[f64; 2]>);

impl Default for NormalizationBounds {
    fn default() -> Self {
        let xy = [-100.0, 100.0];
        let z = [-5.0, 5.0];
        let yaw = [-PI, PI];
        let radial = [0.0, 150.0];
        NormalizationBounds(vec![
            // global
            xy,
            xy,
            z,
            yaw,
            [0.0, 12.0],
            [0.0, 4.0],
            [0.0, 4.0],
            radial,
            // local
            xy,
            xy,
            z,
            yaw,
            radial,
            // local-to-global translation and yaw
            xy,
            xy,
            xy,
            yaw,
            radial,
        ])
    }
}

impl NormalizationBounds {
    pub fn validate(&self) -> Result<()> {
        if self.0.len() != POSITIONAL_LEN {
            return Err(Error::Config(format!(
                "need {POSITIONAL_LEN} normalization ranges, got {}",
                self.0.len()
            )));
        }
        for (i, [lo, hi]) in self.0.iter().enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!(
                    "normalization range {i} is invalid: [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn normalize(&self, f: &PositionalFeature) -> Result<[f64; POSITIONAL_LEN]> {
        self.validate()?;
        let mut out = [0.0; POSITIONAL_LEN];
        for (i, o) in out.iter_mut().enumerate() {
            *o = normalize_var(f.0[i], self.0[i])?;
        }
        Ok(out)
    }
}

/// Linear map of `[min, max]` onto `[-π, π]`, clamped outside the range.
pub fn normalize_var(x: f64, [min, max]: [f64; 2]) -> Result<f64> {
    if !(min < max) {
        return Err(Error::Config(format!(
            "normalization range [{min}, {max}] is empty"
        )));
    }
    let t = ((x - min) / (max - min)).clamp(0.0, 1.0);
    Ok(-PI + 2.0 * PI * t)
}

/// Each normalized scalar `x̄` becomes `sin(x̄ / 2^(i/d))` at column `2i` and
/// `cos(x̄ / 2^(i/d))` at column `2i + 1`, `i = 0..d`.
pub fn positional_encoding(normalized: &[f64], d: usize) -> Mat {
    let divisors: Vec<f64> = (0..d).map(|i| 2f64.powf(i as f64 / d as f64)).collect();
    let mut m = Mat::zeros(normalized.len(), 2 * d);
    for (r, x) in normalized.iter().enumerate() {
        for (i, div) in divisors.iter().enumerate() {
            let (s, c) = (x / div).sin_cos();
            m.set(r, 2 * i, s);
            m.set(r, 2 * i + 1, c);
        }
    }
    m
}

/// Normalize then encode: the `18 × 2d` network input.
pub fn encode_positional(
    f: &PositionalFeature,
    bounds: &NormalizationBounds,
    d: usize,
) -> Result<Mat> {
    Ok(positional_encoding(&bounds.normalize(f)?, d))
}

/// Shape of the appearance tensor (`channels × height × width`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppearanceShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for AppearanceShape {
    fn default() -> Self {
        AppearanceShape {
            channels: 8,
            height: 8,
            width: 8,
        }
    }
}

impl AppearanceShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A per-detection local feature crop, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceFeature {
    pub shape: AppearanceShape,
    pub data: Vec<f64>,
}

impl AppearanceFeature {
    pub fn new(shape: AppearanceShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "appearance tensor needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(
                "appearance tensor has non-finite entries".into(),
            ));
        }
        Ok(AppearanceFeature { shape, data })
    }

    /// `channels × (height·width)` matrix view for the convolution stages.
    pub fn to_mat(&self) -> Mat {
        Mat::from_vec(
            self.shape.channels,
            self.shape.height * self.shape.width,
            self.data.clone(),
        )
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.shape.height * self.shape.width;
        &self.data[c * hw..(c + 1) * hw]
    }
}

/// What the sensor "saw" of one object, as seen by the feature synthesizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensingContext {
    /// Distance from the sensor to the object center in the BEV plane.
    pub range: f64,
    /// Fraction of the object's angular extent hidden by nearer objects.
    pub blockage: f64,
    /// Positional noise standard deviation applied to this detection.
    pub noise_scale: f64,
}

/// Range divisor of the distance-coded channel.
const RANGE_CODE_SCALE: f64 = 50.0;

/// Synthesizes an appearance tensor whose statistics follow the sensing
/// conditions: channel 0 codes range, channel 1 codes blockage, and the
/// remaining channels carry a smooth blob plus speckle whose amplitude
/// grows with the noise scale. A zero-noise, unoccluded context gives
/// spatially constant channels.
pub fn synth_appearance<R: Rng + ?Sized>(
    ctx: &SensingContext,
    shape: AppearanceShape,
    rng: &mut R,
) -> AppearanceFeature {
    let (h, w) = (shape.height, shape.width);
    let hw = h * w;
    let mut data = vec![0.0; shape.len()];
    let range_code = ctx.range / RANGE_CODE_SCALE;
    for c in 0..shape.channels {
        let plane = &mut data[c * hw..(c + 1) * hw];
        match c {
            0 => plane.iter_mut().for_each(|v| *v = range_code),
            1 => plane.iter_mut().for_each(|v| *v = ctx.blockage),
            _ => {
                let freq = 1.0 + (c % 3) as f64;
                for i in 0..h {
                    for j in 0..w {
                        let u = (i as f64 + 0.5) / h as f64 - 0.5;
                        let v = (j as f64 + 0.5) / w as f64 - 0.5;
                        let blob = (-(u * u + v * v) * 8.0).exp() * (freq * PI * (u + v)).cos();
                        let speckle: f64 = StandardNormal.sample(rng);
                        plane[i * w + j] = ctx.noise_scale * (blob + 0.25 * speckle);
                    }
                }
            }
        }
    }
    AppearanceFeature { shape, data }
}

/// Flat storage of many appearance tensors of one shape, addressed by index.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceStore {
    shape: AppearanceShape,
    data: Vec<f64>,
}

impl AppearanceStore {
    pub fn new(shape: AppearanceShape) -> Self {
        AppearanceStore {
            shape,
            data: Vec::new(),
        }
    }

    pub fn from_raw(shape: AppearanceShape, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || !data.len().is_multiple_of(shape.len()) {
            return Err(Error::Shape(format!(
                "{} values do not split into tensors of {}",
                data.len(),
                shape.len()
            )));
        }
        Ok(AppearanceStore { shape, data })
    }

    pub fn shape(&self) -> AppearanceShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        if self.shape.is_empty() {
            0
        } else {
            self.data.len() / self.shape.len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    pub fn push(&mut self, f: &AppearanceFeature) -> Result<u32> {
        if f.shape != self.shape {
            return Err(Error::Shape(format!(
                "appearance shape {:?} does not match store shape {:?}",
                f.shape, self.shape
            )));
        }
        let idx = self.len() as u32;
        self.data.extend_from_slice(&f.data);
        Ok(idx)
    }

    pub fn get(&self, idx: u32) -> Result<AppearanceFeature> {
        let n = self.shape.len();
        let start = idx as usize * n;
        let slice = self.data.get(start..start + n).ok_or_else(|| {
            Error::Input(format!(
                "appearance index {idx} out of range ({} stored)",
                self.len()
            ))
        })?;
        Ok(AppearanceFeature {
            shape: self.shape,
            data: slice.to_vec(),
        })
    }
}
