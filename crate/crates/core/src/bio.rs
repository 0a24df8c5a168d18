//! A fixed, untrained early-vision model: an oriented multi-scale filter bank
//! followed by divisive normalization with Gaussian pooling.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::divnorm::{dn_forward, DnParams};
use crate::error::{Error, Result};
use crate::imageio::{load_luminance, write_pgm};
use crate::metrics::{equalization_stats, tile_rms_cv};
use crate::tensor::{reflect_index, Shape, Tensor};

pub const DEFAULT_SCALES: [f64; 3] = [1.0, 2.0, 4.0];
pub const DEFAULT_ORIENTATIONS: usize = 4;
pub const DEFAULT_TILE: usize = 8;

/// One odd-symmetric kernel stored as half its taps: the response at `p` is
/// `sum_k weight_k * (x[p + offset_k] - x[p - offset_k])`, which is exactly
/// zero on a constant input.
#[derive(Clone, Debug, PartialEq)]
pub struct Band {
    pub sigma: f64,
    /// Radians; 0 responds to intensity changes along x (vertical edges).
    pub orientation: f64,
    pub scale_index: usize,
    pub orientation_index: usize,
    pub radius: usize,
    half: Vec<(isize, isize, f64)>,
}

impl Band {
    fn new(sigma: f64, orientation: f64, scale_index: usize, orientation_index: usize) -> Self {
        let radius = (3.0 * sigma).ceil() as usize;
        let r = radius as isize;
        let (c, s) = (orientation.cos(), orientation.sin());
        let mut half = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                // Upper half-plane, plus the positive x axis.
                if dy < 0 || (dy == 0 && dx <= 0) {
                    continue;
                }
                let (x, y) = (dx as f64, dy as f64);
                let u = x * c + y * s;
                let g = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
                half.push((dy, dx, u * g));
            }
        }
        // Full kernel holds each weight twice (with opposite signs).
        let norm = (2.0 * half.iter().map(|t| t.2 * t.2).sum::<f64>()).sqrt();
        for t in &mut half {
            t.2 /= norm;
        }
        Self {
            sigma,
            orientation,
            scale_index,
            orientation_index,
            radius,
            half,
        }
    }

    pub fn name(&self) -> String {
        format!("s{}_o{}", self.scale_index, self.orientation_index)
    }

    /// Dense `(2r+1)^2` kernel in row-major order, for inspection.
    pub fn kernel(&self) -> Vec<f64> {
        let size = 2 * self.radius + 1;
        let r = self.radius as isize;
        let mut k = vec![0.0; size * size];
        for &(dy, dx, w) in &self.half {
            k[((r + dy) as usize) * size + (r + dx) as usize] = w;
            k[((r - dy) as usize) * size + (r - dx) as usize] = -w;
        }
        k
    }

    fn apply(&self, plane: &[f64], h: usize, w: usize, out: &mut [f64]) {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for &(dy, dx, wt) in &self.half {
                    let a = plane[reflect_index(y as isize + dy, h) * w + reflect_index(x as isize + dx, w)];
                    let b = plane[reflect_index(y as isize - dy, h) * w + reflect_index(x as isize - dx, w)];
                    acc += wt * (a - b);
                }
                out[y * w + x] = acc;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    pub bands: Vec<Band>,
    pub scales: Vec<f64>,
    pub orientations: usize,
    /// Unit-sum Gaussian at the coarsest scale.
    pub lowpass_sigma: f64,
}

impl FilterBank {
    pub fn new(scales: &[f64], orientations: usize) -> Result<Self> {
        if scales.is_empty() || orientations == 0 || scales.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("filter bank needs positive scales and at least one orientation"));
        }
        let mut bands = Vec::with_capacity(scales.len() * orientations);
        for (si, &sigma) in scales.iter().enumerate() {
            for oi in 0..orientations {
                bands.push(Band::new(sigma, PI * oi as f64 / orientations as f64, si, oi));
            }
        }
        Ok(Self {
            bands,
            scales: scales.to_vec(),
            orientations,
            lowpass_sigma: scales.iter().copied().fold(0.0, f64::max),
        })
    }

    /// Spatial frequency (cycles per pixel) a single band of width `sigma`
    /// responds to most strongly.
    pub fn peak_frequency(sigma: f64) -> f64 {
        1.0 / (2.0 * PI * sigma)
    }

    /// Frequency at which the `sigma` bands beat the bands an octave finer and
    /// an octave coarser. Unit-norm kernels give coarse bands more gain, so this
    /// sits above [`FilterBank::peak_frequency`].
    pub fn tuned_frequency(sigma: f64) -> f64 {
        1.0 / (2f64.sqrt() * PI * sigma)
    }

    pub fn band_index(&self, scale: usize, orientation: usize) -> usize {
        scale * self.orientations + orientation
    }
}

impl Default for FilterBank {
    fn default() -> Self {
        Self::new(&DEFAULT_SCALES, DEFAULT_ORIENTATIONS).expect("valid defaults")
    }
}

/// Band-pass responses, one channel per band in scale-major order, and the
/// low-pass residual.
#[derive(Clone, Debug, PartialEq)]
pub struct Responses {
    pub bands: Tensor<f64>,
    pub lowpass: Tensor<f64>,
}

pub fn analyze(luminance: &Tensor<f64>, bank: &FilterBank) -> Result<Responses> {
    let s = luminance.shape();
    if s.c != 1 {
        return Err(Error::ShapeMismatch {
            op: "analyze",
            expected: "a single-channel luminance image".into(),
            found: s.to_string(),
        });
    }
    let nb = bank.bands.len();
    let mut bands = Tensor::zeros(Shape::new(s.n, nb, s.h, s.w));
    let mut lowpass = Tensor::zeros(s);
    for n in 0..s.n {
        let plane = luminance.plane(n, 0);
        for (b, band) in bank.bands.iter().enumerate() {
            band.apply(plane, s.h, s.w, bands.plane_mut(n, b));
        }
        gaussian_blur(plane, s.h, s.w, bank.lowpass_sigma, lowpass.plane_mut(n, 0));
    }
    Ok(Responses { bands, lowpass })
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable unit-gain Gaussian blur with reflect padding.
fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64, out: &mut [f64]) {
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * plane[y * w + reflect_index(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * tmp[reflect_index(y as isize + k as isize - r, h) * w + x])
                .sum();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedDnConfig {
    pub beta: f64,
    /// Width of the Gaussian spatial pool, in pixels.
    pub sigma: f64,
    /// Pool weight of the other orientations at the same scale; a band's own
    /// weight is 1.
    pub coupling: f64,
}

impl Default for FixedDnConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            sigma: 4.0,
            coupling: 0.5,
        }
    }
}

impl FixedDnConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("sigma", self.sigma), ("coupling", self.coupling)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }

    /// Normalization parameters for one scale with `orientations` bands.
    pub fn params(&self, orientations: usize) -> Result<DnParams<f64>> {
        self.validate()?;
        let taps = gaussian_taps(self.sigma);
        let k = taps.len();
        let gamma = Tensor::from_fn(Shape::new(orientations, orientations, k, k), |i, j, y, x| {
            let w = if i == j { 1.0 } else { self.coupling };
            w * taps[y] * taps[x]
        });
        DnParams::new(vec![self.beta; orientations], gamma)
    }
}

/// Normalizes each scale's bands by a Gaussian pool of their magnitudes.
/// The low-pass residual is passed through unchanged.
pub fn normalize_fixed(z: &Responses, bank: &FilterBank, config: &FixedDnConfig) -> Result<Responses> {
    let s = z.bands.shape();
    if s.c != bank.bands.len() {
        return Err(Error::ShapeMismatch {
            op: "normalize_fixed",
            expected: format!("{} bands", bank.bands.len()),
            found: s.to_string(),
        });
    }
    let params = config.params(bank.orientations)?;
    let o = bank.orientations;
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for scale in 0..bank.scales.len() {
            let group = Tensor::from_fn(Shape::new(1, o, s.h, s.w), |_, c, y, x| {
                z.bands.get(n, scale * o + c, y, x)
            });
            let (y, _) = dn_forward(&group, &params)?;
            for c in 0..o {
                out.plane_mut(n, scale * o + c).copy_from_slice(y.plane(0, c));
            }
        }
    }
    Ok(Responses {
        bands: out,
        lowpass: z.lowpass.clone(),
    })
}

/// Sinusoidal grating whose contrast rises linearly from `min_contrast` at the
/// left edge to 1 at the right edge.
pub fn contrast_ramp_grating(
    height: usize,
    width: usize,
    frequency: f64,
    orientation: f64,
    min_contrast: f64,
) -> Tensor<f64> {
    let (c, s) = (orientation.cos(), orientation.sin());
    Tensor::from_fn(Shape::new(1, 1, height, width), |_, _, y, x| {
        let a = min_contrast + (1.0 - min_contrast) * x as f64 / (width.max(2) - 1) as f64;
        let phase = 2.0 * PI * frequency * (x as f64 * c + y as f64 * s);
        0.5 + 0.5 * a * phase.sin()
    })
}

/// Per-band summary written to `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandReport {
    pub name: String,
    pub sigma: f64,
    pub orientation_deg: f64,
    pub energy_before: f64,
    pub cv_before: Option<f64>,
    pub cv_after: Option<f64>,
    /// Value range mapped to 0..255 in the written graymaps.
    pub range_before: (f64, f64),
    pub range_after: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EqualizeReport {
    pub image: Option<PathBuf>,
    pub height: usize,
    pub width: usize,
    pub tile: usize,
    pub config: FixedDnConfig,
    /// True when every band-pass response is zero (e.g. a uniform image).
    pub degenerate: bool,
    pub dominant_band: String,
    pub bands: Vec<BandReport>,
}

impl EqualizeReport {
    pub fn band(&self, name: &str) -> Option<&BandReport> {
        self.bands.iter().find(|b| b.name == name)
    }

    pub fn dominant(&self) -> &BandReport {
        self.band(&self.dominant_band).expect("dominant band is listed")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub row: usize,
    pub col: usize,
    /// RMS of the dominant band and of its orthogonal band in this patch.
    pub before: [f64; 2],
    pub after: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scatter {
    pub bands: [String; 2],
    pub tile: usize,
    pub patches: Vec<ScatterPoint>,
}

/// Loads a grayscale version of `image_path` and runs [`demo_equalize_image`].
pub fn demo_equalize(
    image_path: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    config: &FixedDnConfig,
    tile: usize,
) -> Result<(EqualizeReport, Scatter)> {
    let path = image_path.as_ref();
    let out_dir = out_dir.as_ref();
    let lum = load_luminance(path)?;
    let (mut report, scatter) = demo_equalize_image(&lum, out_dir, config, tile)?;
    report.image = Some(path.to_path_buf());
    write_json(&out_dir.join("report.json"), &report)?;
    Ok((report, scatter))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_vec_pretty(value)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Crops `luminance` to a multiple of `tile`, analyzes and normalizes it, and
/// writes before/after graymaps per band, `report.json` and `scatter.json`.
pub fn demo_equalize_image(
    luminance: &Tensor<f64>,
    out_dir: impl AsRef<Path>,
    config: &FixedDnConfig,
    tile: usize,
) -> Result<(EqualizeReport, Scatter)> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    let s = luminance.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::ShapeMismatch {
            op: "demo_equalize",
            expected: "(1, 1, h, w) luminance".into(),
            found: s.to_string(),
        });
    }
    if tile == 0 || s.h < tile || s.w < tile {
        return Err(Error::invalid(format!("image {}x{} is smaller than one {tile}px tile", s.h, s.w)));
    }
    let (h, w) = (s.h / tile * tile, s.w / tile * tile);
    let lum = Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| luminance.get(0, 0, y, x));
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let bank = FilterBank::default();
    let before = analyze(&lum, &bank)?;
    let after = normalize_fixed(&before, &bank, config)?;
    let stats = equalization_stats(&before.bands, &after.bands, tile)?;

    let mut bands = Vec::with_capacity(bank.bands.len());
    for (b, band) in bank.bands.iter().enumerate() {
        let name = band.name();
        let pb = before.bands.plane(0, b);
        let pa = after.bands.plane(0, b);
        let range_before = write_pgm(out_dir.join(format!("{name}_before.pgm")), pb, h, w)?;
        let range_after = write_pgm(out_dir.join(format!("{name}_after.pgm")), pa, h, w)?;
        bands.push(BandReport {
            name,
            sigma: band.sigma,
            orientation_deg: band.orientation.to_degrees(),
            energy_before: pb.iter().map(|v| v * v).sum::<f64>() / pb.len() as f64,
            cv_before: stats.cv_before[b],
            cv_after: stats.cv_after[b],
            range_before,
            range_after,
        });
    }
    let degenerate = bands.iter().all(|b| b.energy_before == 0.0);
    let dominant = (0..bands.len())
        .max_by(|&a, &b| bands[a].energy_before.total_cmp(&bands[b].energy_before).then(b.cmp(&a)))
        .expect("non-empty bank");
    let dom = &bank.bands[dominant];
    let ortho = bank.band_index(dom.scale_index, (dom.orientation_index + bank.orientations / 2) % bank.orientations);

    let report = EqualizeReport {
        image: None,
        height: h,
        width: w,
        tile,
        config: *config,
        degenerate,
        dominant_band: bands[dominant].name.clone(),
        bands,
    };
    let scatter = Scatter {
        bands: [bank.bands[dominant].name(), bank.bands[ortho].name()],
        tile,
        patches: patch_rms(&before.bands, &after.bands, [dominant, ortho], tile),
    };
    write_json(&out_dir.join("report.json"), &report)?;
    write_json(&out_dir.join("scatter.json"), &scatter)?;
    Ok((report, scatter))
}

fn patch_rms(before: &Tensor<f64>, after: &Tensor<f64>, bands: [usize; 2], tile: usize) -> Vec<ScatterPoint> {
    let s = before.shape();
    let rms = |t: &Tensor<f64>, b: usize, by: usize, bx: usize| {
        let plane = t.plane(0, b);
        let mut ss = 0.0;
        for y in by * tile..(by + 1) * tile {
            for v in &plane[y * s.w + bx * tile..y * s.w + (bx + 1) * tile] {
                ss += v * v;
            }
        }
        (ss / (tile * tile) as f64).sqrt()
    };
    let mut out = Vec::with_capacity((s.h / tile) * (s.w / tile));
    for row in 0..s.h / tile {
        for col in 0..s.w / tile {
            out.push(ScatterPoint {
                row,
                col,
                before: [rms(before, bands[0], row, col), rms(before, bands[1], row, col)],
                after: [rms(after, bands[0], row, col), rms(after, bands[1], row, col)],
            });
        }
    }
    out
}

/// Coefficient of variation of per-tile RMS for one band before and after
/// normalization.
pub fn band_equalization(z: &Responses, y: &Responses, band: usize, tile: usize) -> Result<(Option<f64>, Option<f64>)> {
    let pick = |t: &Tensor<f64>| {
        let s = t.shape();
        Tensor::from_fn(Shape::new(s.n, 1, s.h, s.w), |n, _, yy, xx| t.get(n, band, yy, xx))
    };
    let before = tile_rms_cv(&pick(&z.bands), tile)?;
    let after = tile_rms_cv(&pick(&y.bands), tile)?;
    Ok((before[0], after[0]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_are_zero_mean_unit_norm() {
        let bank = FilterBank::default();
        assert_eq!(bank.bands.len(), 12);
        for b in &bank.bands {
            let k = b.kernel();
            assert!(k.iter().sum::<f64>().abs() < 1e-12, "{}", b.name());
            let l2: f64 = k.iter().map(|v| v * v).sum();
            assert!((l2 - 1.0).abs() < 1e-12);
            assert_eq!(k.len(), (2 * (3.0 * b.sigma).ceil() as usize + 1).pow(2));
        }
    }

    #[test]
    fn constant_input_gives_zero_bands() {
        let bank = FilterBank::default();
        let x = Tensor::full(Shape::new(1, 1, 16, 16), 0.37);
        let r = analyze(&x, &bank).unwrap();
        assert!(r.bands.data().iter().all(|&v| v == 0.0));
        assert!(r.lowpass.data().iter().all(|&v| (v - 0.37).abs() < 1e-12));
        assert!(analyze(&Tensor::zeros(Shape::new(1, 3, 8, 8)), &bank).is_err());
    }

    #[test]
    fn matching_band_wins_on_vertical_grating() {
        let bank = FilterBank::default();
        for (si, &sigma) in bank.scales.iter().enumerate() {
            let f = FilterBank::tuned_frequency(sigma);
            let x = Tensor::from_fn(Shape::new(1, 1, 64, 64), |_, _, _, xx| {
                0.5 + 0.4 * (2.0 * PI * f * xx as f64).sin()
            });
            let r = analyze(&x, &bank).unwrap();
            let energy: Vec<f64> = (0..bank.bands.len())
                .map(|b| r.bands.plane(0, b).iter().map(|v| v * v).sum())
                .collect();
            let best = (0..energy.len()).max_by(|&a, &b| energy[a].total_cmp(&energy[b])).unwrap();
            assert_eq!(best, bank.band_index(si, 0), "sigma {sigma}: {energy:?}");
        }
    }

    #[test]
    fn isolated_constant_band_closed_form() {
        let bank = FilterBank::new(&[1.0], 4).unwrap();
        let config = FixedDnConfig::default();
        let (c, z0) = (0.3, -0.3);
        let mut bands = Tensor::zeros(Shape::new(1, 4, 20, 20));
        bands.plane_mut(0, 2).fill(z0);
        let z = Responses {
            bands,
            lowpass: Tensor::zeros(Shape::new(1, 1, 20, 20)),
        };
        let y = normalize_fixed(&z, &bank, &config).unwrap();
        let expected = z0 / (config.beta + c);
        for v in y.bands.plane(0, 2) {
            assert!((v - expected).abs() < 1e-12);
        }
        for ch in [0, 1, 3] {
            assert!(y.bands.plane(0, ch).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn ramp_grating_is_equalized() {
        let bank = FilterBank::default();
        let f = FilterBank::peak_frequency(2.0);
        let x = contrast_ramp_grating(32, 64, f, 0.0, 0.1);
        let z = analyze(&x, &bank).unwrap();
        let y = normalize_fixed(&z, &bank, &FixedDnConfig::default()).unwrap();
        let band = bank.band_index(1, 0);
        let edge_ratio = |t: &Tensor<f64>| {
            let col_rms = |c0: usize| {
                let mut ss = 0.0;
                for yy in 8..24 {
                    for xx in c0..c0 + 8 {
                        ss += t.get(0, band, yy, xx).powi(2);
                    }
                }
                ss.sqrt()
            };
            col_rms(48) / col_rms(8)
        };
        assert!(edge_ratio(&y.bands) < edge_ratio(&z.bands));
        let (cb, ca) = band_equalization(&z, &y, band, 8).unwrap();
        assert!(ca.unwrap() < cb.unwrap());
        // Signs survive normalization.
        for (a, b) in z.bands.data().iter().zip(y.bands.data()) {
            assert_eq!(a.signum() * (a.abs() > 0.0) as i32 as f64, b.signum() * (b.abs() > 0.0) as i32 as f64);
        }
    }

    #[test]
    fn demo_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let x = contrast_ramp_grating(24, 40, FilterBank::peak_frequency(2.0), 0.0, 0.1);
        let (report, scatter) = demo_equalize_image(&x, dir.path(), &FixedDnConfig::default(), 8).unwrap();
        assert!(!report.degenerate);
        let dom = report.dominant();
        assert!(dom.cv_after.unwrap() < dom.cv_before.unwrap());
        assert_eq!(scatter.patches.len(), (24 / 8) * (40 / 8));
        assert!(dir.path().join("s1_o0_after.pgm").is_file());
        assert!(dir.path().join("scatter.json").is_file());

        let flat = Tensor::full(Shape::new(1, 1, 16, 16), 0.5);
        let (report, _) = demo_equalize_image(&flat, dir.path().join("flat"), &FixedDnConfig::default(), 8).unwrap();
        assert!(report.degenerate);
        assert!(report.bands.iter().all(|b| b.cv_before.is_none() && b.cv_after.is_none()));
    }

    #[test]
    fn config_must_be_positive() {
        let bad = FixedDnConfig {
            coupling: 0.0,
            ..FixedDnConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
