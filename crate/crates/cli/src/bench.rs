use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use rand::Rng as _;
use serde::Serialize;

use dnseg::divnorm::{dn_backward_with, dn_forward_with, PoolStrategy};
use dnseg::rng::substream;
use dnseg::tensor::{conv2d_forward, reflect_index, ConvSpec, PaddingMode};
use dnseg::{DnParams, Shape, Tensor};

use crate::manifest::{beside, Run};
use crate::{fail, Status};

/// Largest accepted disagreement between the two implementations of an op,
/// relative to the magnitude of the value once that exceeds 1.
const AGREEMENT: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchOp {
    DnForward,
    DnBackward,
    Conv,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long, value_enum)]
    pub op: BenchOp,
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    /// Height and width of the input.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Pool window for the normalization ops, kernel size for `conv`.
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the timings as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Timing {
    implementation: &'static str,
    median_ms: f64,
    p95_ms: f64,
    mean_ms: f64,
    variance_ms2: f64,
    elements_per_sec: f64,
}

#[derive(Debug, Serialize)]
struct BenchReport<'a> {
    config: &'a BenchArgs,
    elements: usize,
    max_disagreement: f64,
    timings: Vec<Timing>,
}

fn summarize(implementation: &'static str, mut samples: Vec<f64>, elements: usize) -> Timing {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    let pick = |q: f64| samples[((q * (n - 1) as f64).round() as usize).min(n - 1)];
    let mean = samples.iter().sum::<f64>() / n as f64;
    let variance = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
    Timing {
        implementation,
        median_ms: pick(0.5) * 1e3,
        p95_ms: pick(0.95) * 1e3,
        mean_ms: mean * 1e3,
        variance_ms2: variance * 1e6,
        elements_per_sec: elements as f64 / pick(0.5),
    }
}

fn time(warmup: usize, iters: usize, mut f: impl FnMut() -> dnseg::Result<()>) -> dnseg::Result<Vec<f64>> {
    for _ in 0..warmup {
        f()?;
    }
    let mut out = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        f()?;
        out.push(t.elapsed().as_secs_f64());
    }
    Ok(out)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(1.0)).fold(0.0, f64::max)
}

fn random(shape: Shape, lo: f64, hi: f64, rng: &mut dnseg::rng::Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

/// Direct loops, used as the reference for the im2col path.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, spec: &ConvSpec) -> Tensor<f64> {
    let s = x.shape();
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    Tensor::from_fn(Shape::new(s.n, spec.out_channels, s.h, s.w), |n, o, y, xx| {
        let mut acc = 0.0;
        for i in 0..s.c {
            for dy in 0..kh {
                for dx in 0..kw {
                    let sy = reflect_index(y as isize + dy as isize - (kh / 2) as isize, s.h);
                    let sx = reflect_index(xx as isize + dx as isize - (kw / 2) as isize, s.w);
                    acc += w.get(o, i, dy, dx) * x.get(n, i, sy, sx);
                }
            }
        }
        acc
    })
}

pub fn run(args: BenchArgs) -> Result<()> {
    let run = Run::start("bench", &args, Some(args.seed), 1);
    if args.iters == 0 {
        return Err(fail(Status::Usage, "--iters must be at least 1"));
    }
    if args.channels == 0 || args.size == 0 {
        return Err(fail(Status::Usage, "--channels and --size must be at least 1"));
    }
    let mut rng = substream(args.seed, "bench");
    let shape = Shape::new(1, args.channels, args.size, args.size);
    let elements = shape.len();
    let z = random(shape, -1.0, 1.0, &mut rng);
    let (c, k) = (args.channels, args.window);

    let (disagreement, timings) = match args.op {
        BenchOp::DnForward | BenchOp::DnBackward => {
            let mut params = DnParams::<f64>::init(c, k)?;
            for g in params.gamma.data_mut() {
                *g *= rng.gen_range(0.5..1.5);
            }
            let (y_naive, d_naive) = dn_forward_with(&z, &params, PoolStrategy::Naive)?;
            let (y_block, d_block) = dn_forward_with(&z, &params, PoolStrategy::ChannelBlocked)?;
            let mut diff = max_diff(y_naive.data(), y_block.data()).max(max_diff(d_naive.data(), d_block.data()));
            let grad_y = random(shape, -1.0, 1.0, &mut rng);
            if args.op == BenchOp::DnBackward {
                let a = dn_backward_with(&z, &params, &d_naive, &grad_y, PoolStrategy::Naive)?;
                let b = dn_backward_with(&z, &params, &d_block, &grad_y, PoolStrategy::ChannelBlocked)?;
                diff = diff
                    .max(max_diff(a.input.data(), b.input.data()))
                    .max(max_diff(&a.beta, &b.beta))
                    .max(max_diff(a.gamma.data(), b.gamma.data()));
            }
            check(diff)?;
            let mut timings = Vec::new();
            for (name, strategy) in [("naive", PoolStrategy::Naive), ("channel-blocked", PoolStrategy::ChannelBlocked)] {
                let samples = if args.op == BenchOp::DnForward {
                    time(args.warmup, args.iters, || dn_forward_with(&z, &params, strategy).map(drop))?
                } else {
                    let denom = &d_block;
                    time(args.warmup, args.iters, || {
                        dn_backward_with(&z, &params, denom, &grad_y, strategy).map(drop)
                    })?
                };
                timings.push(summarize(name, samples, elements));
            }
            (diff, timings)
        }
        BenchOp::Conv => {
            let spec = ConvSpec::same(c, c, k, PaddingMode::Reflect)?;
            let bound = (6.0 / (2 * c * k * k) as f64).sqrt();
            let w = random(spec.weight_shape(), -bound, bound, &mut rng);
            let bias = vec![0.0; c];
            let fast = conv2d_forward(&z, &w, &bias, &spec)?;
            let diff = max_diff(fast.data(), naive_conv(&z, &w, &spec).data());
            check(diff)?;
            let naive = time(args.warmup, args.iters, || {
                naive_conv(&z, &w, &spec);
                Ok(())
            })?;
            let im2col = time(args.warmup, args.iters, || conv2d_forward(&z, &w, &bias, &spec).map(drop))?;
            (diff, vec![summarize("naive", naive, elements), summarize("im2col", im2col, elements)])
        }
    };

    println!("max disagreement {disagreement:.3e} over {elements} elements");
    println!(
        "{:<16} {:>10} {:>10} {:>10} {:>12} {:>14}",
        "implementation", "median ms", "p95 ms", "mean ms", "var ms^2", "elements/s"
    );
    for t in &timings {
        println!(
            "{:<16} {:>10.3} {:>10.3} {:>10.3} {:>12.3e} {:>14.3e}",
            t.implementation, t.median_ms, t.p95_ms, t.mean_ms, t.variance_ms2, t.elements_per_sec
        );
    }
    if let Some(path) = &args.report {
        let report = BenchReport {
            config: &args,
            elements,
            max_disagreement: disagreement,
            timings,
        };
        fs::write(path, serde_json::to_vec_pretty(&report)?).with_context(|| format!("writing {}", path.display()))?;
        run.finish(&beside(path), vec![path.clone()])?;
    }
    Ok(())
}

fn check(diff: f64) -> Result<()> {
    if diff <= AGREEMENT {
        Ok(())
    } else {
        Err(fail(
            Status::Numerical,
            format!("implementations disagree by {diff:.3e}, above {AGREEMENT:e}"),
        ))
    }
}
