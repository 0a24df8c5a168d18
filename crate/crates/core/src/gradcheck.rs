//! Central finite-difference checks of every analytic backward pass.
//!
//! Each op is wrapped in the scalar objective `L = sum(r * f(x))` with a fixed
//! random `r`, so the analytic gradient is the op's backward applied to `r`.
//! Coordinates sitting on a kink (where the piecewise branch taken by the
//! forward pass differs between `x + h` and `x - h`, or where the magnitude
//! inside a normalization pool is within `kink` of zero) are skipped and
//! counted.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::divnorm::{dn_backward, dn_forward, DnParams};
use crate::error::{Error, Result};
use crate::rng::{substream, Rng, STREAM_GRADCHECK};
use crate::tensor::{
    concat_channels, conv2d_backward, conv2d_forward, maxpool2_backward, maxpool2_forward, relu_backward,
    relu_forward, split_channels, upsample2_backward, upsample2_forward, ConvSpec, PaddingMode, Shape, Tensor,
};
use crate::train::mae_loss;
use crate::unet::{build_model, model_backward, model_forward, DnVariant, UNet, UNetConfig};

pub const OPS: [&str; 10] = [
    "conv2d", "maxpool2", "upsample2", "relu", "concat", "mae", "dn_input", "dn_beta", "dn_gamma", "unet_dn4",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Finite-difference step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    /// Half-width of the excluded neighbourhood around `|z| = 0`.
    pub kink: f64,
    /// Corrupts the analytic gradient of this op; used to test the checker.
    pub inject_fault: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            kink: 1e-3,
            inject_fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpReport {
    pub op: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub ops: Vec<OpReport>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn failures(&self) -> Vec<&str> {
        self.ops.iter().filter(|o| !o.passed).map(|o| o.op.as_str()).collect()
    }
}

/// Checks every op in [`OPS`].
pub fn run_gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    run_ops(config, &OPS)
}

pub fn run_ops(config: &GradcheckConfig, ops: &[&str]) -> Result<GradcheckReport> {
    if let Some(op) = &config.inject_fault {
        if !OPS.contains(&op.as_str()) {
            return Err(Error::invalid(format!("unknown op {op:?} for fault injection")));
        }
    }
    let mut reports = Vec::with_capacity(ops.len());
    for &op in ops {
        let mut rng = substream(config.seed, STREAM_GRADCHECK);
        let report = match op {
            "conv2d" => check_conv(config, &mut rng),
            "maxpool2" => check_maxpool(config, &mut rng),
            "upsample2" => check_upsample(config, &mut rng),
            "relu" => check_relu(config, &mut rng),
            "concat" => check_concat(config, &mut rng),
            "mae" => check_mae(config, &mut rng),
            "dn_input" | "dn_beta" | "dn_gamma" => check_dn(config, &mut rng, op),
            "unet_dn4" => check_unet(config, &mut rng),
            other => return Err(Error::invalid(format!("unknown op {other:?}"))),
        }?;
        log::debug!(
            "{}: {} checked, {} skipped, max rel err {:.3e}",
            report.op,
            report.checked,
            report.skipped,
            report.max_rel_error
        );
        reports.push(report);
    }
    let passed = reports.iter().all(|r| r.passed);
    Ok(GradcheckReport {
        config: config.clone(),
        ops: reports,
        passed,
    })
}

/// Result of evaluating the objective at a perturbed point: the value and a
/// fingerprint of every branch decision taken.
struct Eval {
    value: f64,
    pattern: Vec<u64>,
}

fn plain(value: f64) -> Eval {
    Eval {
        value,
        pattern: Vec::new(),
    }
}

fn sign_pattern(values: &[f64]) -> Vec<u64> {
    values.iter().map(|v| (*v > 0.0) as u64 + 2 * (*v < 0.0) as u64).collect()
}

/// Compares `analytic` against central differences of `eval(i, delta)`.
fn compare(
    op: &str,
    config: &GradcheckConfig,
    mut analytic: Vec<f64>,
    skip: impl Fn(usize) -> bool,
    mut eval: impl FnMut(usize, f64) -> Result<Eval>,
) -> Result<OpReport> {
    if config.inject_fault.as_deref() == Some(op) {
        if let Some(a) = analytic.iter_mut().find(|a| **a != 0.0) {
            *a *= 1.01;
        } else if let Some(a) = analytic.first_mut() {
            *a = 1.0;
        }
    }
    let h = config.step;
    let (mut checked, mut skipped) = (0, 0);
    let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
    for (i, &a) in analytic.iter().enumerate() {
        if skip(i) {
            skipped += 1;
            continue;
        }
        let plus = eval(i, h)?;
        let minus = eval(i, -h)?;
        if plus.pattern != minus.pattern {
            skipped += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * h);
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(config.floor);
        max_rel = max_rel.max(rel);
        max_abs = max_abs.max(abs);
        checked += 1;
    }
    Ok(OpReport {
        op: op.to_string(),
        checked,
        skipped,
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        passed: checked > 0 && max_rel < config.tolerance,
    })
}

fn random_tensor(rng: &mut Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

/// Values with magnitude in `[0.1, 1)` and random sign.
fn signed_tensor(rng: &mut Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn bumped(t: &Tensor<f64>, i: usize, delta: f64) -> Tensor<f64> {
    let mut t = t.clone();
    t.data_mut()[i] += delta;
    t
}

fn merge(parts: Vec<OpReport>, op: &str, config: &GradcheckConfig) -> OpReport {
    let max_rel = parts.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    let checked = parts.iter().map(|p| p.checked).sum();
    OpReport {
        op: op.to_string(),
        checked,
        skipped: parts.iter().map(|p| p.skipped).sum(),
        max_rel_error: max_rel,
        max_abs_error: parts.iter().map(|p| p.max_abs_error).fold(0.0, f64::max),
        passed: checked > 0 && parts.iter().all(|p| p.passed) && max_rel < config.tolerance,
    }
}

fn check_conv(config: &GradcheckConfig, rng: &mut Rng) -> Result<OpReport> {
    let cases = [
        (ConvSpec::same(2, 3, 3, PaddingMode::Zero)?, 6usize),
        (
            ConvSpec {
                stride: 2,
                ..ConvSpec::same(2, 2, 3, PaddingMode::Reflect)?
            },
            7,
        ),
        (ConvSpec::same(3, 2, 1, PaddingMode::Zero)?, 4),
    ];
    let mut parts = Vec::new();
    for (spec, size) in cases {
        let x = random_tensor(rng, Shape::new(2, spec.in_channels, size, size), -1.0, 1.0);
        let w = random_tensor(rng, spec.weight_shape(), -1.0, 1.0);
        let b: Vec<f64> = (0..spec.out_channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = conv2d_forward(&x, &w, &b, &spec)?;
        let r = random_tensor(rng, out.shape(), -1.0, 1.0);
        let g = conv2d_backward(&x, &w, &r, &spec)?;

        let (nx, nw) = (x.shape().len(), w.shape().len());
        let mut analytic = g.input.data().to_vec();
        analytic.extend_from_slice(g.weights.data());
        analytic.extend_from_slice(&g.bias);
        parts.push(compare("conv2d", config, analytic, |_| false, |i, d| {
            let (mut xx, mut ww, mut bb) = (x.clone(), w.clone(), b.clone());
            if i < nx {
                xx.data_mut()[i] += d;
            } else if i < nx + nw {
                ww.data_mut()[i - nx] += d;
            } else {
                bb[i - nx - nw] += d;
            }
            Ok(plain(dot(&r, &conv2d_forward(&xx, &ww, &bb, &spec)?)))
        })?);
    }
    Ok(merge(parts, "conv2d", config))
}

fn check_maxpool(config: &GradcheckConfig, rng: &mut Rng) -> Result<OpReport> {
    let x = random_tensor(rng, Shape::new(2, 2, 6, 8), -1.0, 1.0);
    let (out, idx) = maxpool2_forward(&x)?;
    let r = random_tensor(rng, out.shape(), -1.0, 1.0);
    let analytic = maxpool2_backward(&r, &idx)?.into_data();
    compare("maxpool2", config, analytic, |_| false, |i, d| {
        let (out, idx) = maxpool2_forward(&bumped(&x, i, d))?;
        Ok(Eval {
            value: dot(&r, &out),
            pattern: idx.as_slice().iter().map(|&a| a as u64).collect(),
        })
    })
}

fn check_upsample(config: &GradcheckConfig, rng: &mut Rng) -> Result<OpReport> {
    let x = random_tensor(rng, Shape::new(2, 2, 3, 4), -1.0, 1.0);
    let r = random_tensor(rng, upsample2_forward(&x).shape(), -1.0, 1.0);
    let analytic = upsample2_backward(&r)?.into_data();
    compare("upsample2", config, analytic, |_| false, |i, d| {
        Ok(plain(dot(&r, &upsample2_forward(&bumped(&x, i, d)))))
    })
}

fn check_relu(config: &GradcheckConfig, rng: &mut Rng) -> Result<OpReport> {
    let x = signed_tensor(rng, Shape::new(2, 3, 4, 4));
    let r = random_tensor(rng, x.shape(), -1.0, 1.0);
    let analytic = relu_backward(&x, &r)?.into_data();
    let kink = config.kink;
    compare("relu", config, analytic, |i| x.data()[i].abs() < kink, |i, d| {
        let xx = bumped(&x, i, d);
        Ok(Eval {
            value: dot(&r, &relu_forward(&xx)),
            pattern: sign_pattern(xx.data()),
        })
    })
}

fn check_concat(config: &GradcheckConfig, rng: &mut Rng) -> Result<OpReport> {
    let a = random_tensor(rng, Shape::new(2, 2, 3, 3), -1.0, 1.0);
    let b = random_tensor(rng, Shape::new(2, 1, 3, 3), -1.0, 1.0);
    let r = random_tensor(rng, Shape::new(2, 3, 3, 3), -1.0, 1.0);
    let (ga, gb) = split_channels(&r, 2)?;
    let mut analytic = ga.into_data();
    analytic.extend(gb.into_data());
    let na = a.shape().len();
    compare("concat", config, analytic, |_| false, |i, d| {
        let out = if i < na {
            concat_channels(&bumped(&a, i, d), &b)?
        } else {
            concat_channels(&a, &bumped(&b, i - na, d))?
        };
        Ok(plain(dot(&r, &out)))
    })
}

fn check_mae(config: &GradcheckConfig, rng: &mut Rng) -> Result<OpReport> {
    let shape = Shape::new(2, 3, 3, 4);
    let z = random_tensor(rng, shape, -0.5, 1.5);
    let labels: Vec<u16> = (0..shape.n * shape.plane()).map(|_| rng.gen_range(0..3)).collect();
    let (_, grad) = mae_loss(&z, &labels)?;
    let kink = config.kink;
    let plane = shape.plane();
    let residual = |t: &Tensor<f64>, i: usize| {
        let c = (i / plane) % shape.c;
        let label = labels[(i / (plane * shape.c)) * plane + i % plane];
        t.data()[i] - if label as usize == c { 1.0 } else { 0.0 }
    };
    compare("mae", config, grad.into_data(), |i| residual(&z, i).abs() < kink, |i, d| {
        let zz = bumped(&z, i, d);
        let (loss, _) = mae_loss(&zz, &labels)?;
        let res: Vec<f64> = (0..shape.len()).map(|k| residual(&zz, k)).collect();
        Ok(Eval {
            value: loss,
            pattern: sign_pattern(&res),
        })
    })
}

fn random_dn(rng: &mut Rng, channels: usize, window: usize) -> Result<DnParams<f64>> {
    let beta = (0..channels).map(|_| rng.gen_range(0.5..1.5)).collect();
    let gamma = random_tensor(rng, Shape::new(channels, channels, window, window), 0.01, 0.2);
    DnParams::new(beta, gamma)
}

fn check_dn(config: &GradcheckConfig, rng: &mut Rng, op: &str) -> Result<OpReport> {
    let mut parts = Vec::new();
    for (channels, window, size) in [(3usize, 3usize, 6usize), (2, 5, 5)] {
        let z = signed_tensor(rng, Shape::new(2, channels, size, size));
        let params = random_dn(rng, channels, window)?;
        let (y, denom) = dn_forward(&z, &params)?;
        let r = random_tensor(rng, y.shape(), -1.0, 1.0);
        let g = dn_backward(&z, &params, &denom, &r)?;
        let kink = config.kink;
        let report = match op {
            "dn_input" => compare(op, config, g.input.into_data(), |i| z.data()[i].abs() < kink, |i, d| {
                let zz = bumped(&z, i, d);
                Ok(Eval {
                    value: dot(&r, &dn_forward(&zz, &params)?.0),
                    pattern: sign_pattern(zz.data()),
                })
            }),
            "dn_beta" => compare(op, config, g.beta, |_| false, |i, d| {
                let mut p = params.clone();
                p.beta[i] += d;
                Ok(plain(dot(&r, &dn_forward(&z, &p)?.0)))
            }),
            _ => compare(op, config, g.gamma.into_data(), |_| false, |i, d| {
                let mut p = params.clone();
                p.gamma.data_mut()[i] += d;
                Ok(plain(dot(&r, &dn_forward(&z, &p)?.0)))
            }),
        }?;
        parts.push(report);
    }
    Ok(merge(parts, op, config))
}

/// A small dn4 network with strictly positive interaction weights everywhere.
fn tiny_model(rng: &mut Rng, seed: u64) -> Result<UNet<f64>> {
    let config = UNetConfig {
        dn_window: 3,
        ..UNetConfig::new(3, DnVariant::Dn4, seed).with_encoder_channels(&[2, 3, 4])
    };
    let mut model: UNet<f64> = build_model(&config)?;
    model.randomize_head(rng);
    for site in model.dn_sites() {
        let p = model.dn_site_mut(site).expect("listed site");
        *p = random_dn(rng, p.channels(), p.window())?;
    }
    Ok(model)
}

fn check_unet(config: &GradcheckConfig, rng: &mut Rng) -> Result<OpReport> {
    let model = tiny_model(rng, config.seed)?;
    let x = random_tensor(rng, Shape::new(1, 3, 8, 8), 0.05, 1.0);
    let (logits, cache) = model_forward(&model, &x)?;
    let r = random_tensor(rng, logits.shape(), -1.0, 1.0);
    let grads = model_backward(&model, &cache, &r)?;
    let analytic: Vec<f64> = grads.params().iter().flat_map(|p| p.data.iter().copied()).collect();
    compare("unet_dn4", config, analytic, |_| false, |i, d| {
        let mut m = model.clone();
        let mut k = i;
        for (_, buf) in m.params_mut() {
            if k < buf.len() {
                buf[k] += d;
                break;
            }
            k -= buf.len();
        }
        let (logits, cache) = model_forward(&m, &x)?;
        Ok(Eval {
            value: dot(&r, &logits),
            pattern: cache.activation_pattern(),
        })
    })
}
