//! Homogeneous fog: `I = J t + A (1 - t)` with `t = exp(-attenuation * depth)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Grid, SceneSample};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    None,
    Low,
    Mid,
    High,
}

impl Severity {
    pub const ALL: [Severity; 4] = [Severity::None, Severity::Low, Severity::Mid, Severity::High];

    pub fn as_str(self) -> &'static str {
        match self {
            Severity::None => "none",
            Severity::Low => "low",
            Severity::Mid => "mid",
            Severity::High => "high",
        }
    }

    /// Attenuation per unit scene depth.
    pub fn default_attenuation(self) -> f64 {
        match self {
            Severity::None => 0.0,
            Severity::Low => 0.5,
            Severity::Mid => 1.0,
            Severity::High => 2.0,
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Severity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Severity::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown fog severity {s:?}, expected none|low|mid|high")))
    }
}

pub const DEFAULT_AIRLIGHT: [f64; 3] = [0.9, 0.9, 0.92];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FogParams {
    pub severity: Severity,
    pub attenuation: f64,
    pub airlight: [f64; 3],
}

impl FogParams {
    pub fn preset(severity: Severity) -> Self {
        Self {
            severity,
            attenuation: severity.default_attenuation(),
            airlight: DEFAULT_AIRLIGHT,
        }
    }

    pub fn presets() -> Vec<Self> {
        Severity::ALL.into_iter().map(Self::preset).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.attenuation >= 0.0) || !self.attenuation.is_finite() {
            return Err(Error::invalid(format!(
                "fog attenuation must be finite and nonnegative, got {}",
                self.attenuation
            )));
        }
        if self.airlight.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::invalid(format!("airlight components must lie in [0, 1], got {:?}", self.airlight)));
        }
        Ok(())
    }
}

#[inline]
pub fn transmittance(depth: f64, attenuation: f64) -> f64 {
    (-attenuation * depth).exp()
}

/// Renders `sample` seen through fog. Labels and depth are unaffected.
pub fn apply_fog(sample: &SceneSample, fog: &FogParams) -> Result<Tensor<f64>> {
    apply_fog_to(&sample.image, &sample.depth, fog)
}

/// Fogs an `(n, 3, h, w)` image whose pixels all lie at the given depths.
pub fn apply_fog_to(image: &Tensor<f64>, depth: &Grid<f64>, fog: &FogParams) -> Result<Tensor<f64>> {
    fog.validate()?;
    let s = image.shape();
    if s.c != 3 || (s.h, s.w) != (depth.height(), depth.width()) {
        return Err(Error::ShapeMismatch {
            op: "apply_fog",
            expected: format!("(n, 3, {}, {}) image", depth.height(), depth.width()),
            found: s.to_string(),
        });
    }
    if let Some(d) = depth.data().iter().find(|d| !(**d >= 0.0)) {
        return Err(Error::invalid(format!("depth must be nonnegative, found {d}")));
    }
    let plane = s.plane();
    let t: Vec<f64> = depth.data().iter().map(|&d| transmittance(d, fog.attenuation)).collect();
    let mut out = Tensor::zeros(Shape::new(s.n, 3, s.h, s.w));
    for n in 0..s.n {
        for c in 0..3 {
            let a = fog.airlight[c];
            let src = image.plane(n, c);
            let dst = out.plane_mut(n, c);
            for p in 0..plane {
                dst[p] = (src[p] * t[p] + a * (1.0 - t[p])).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}
