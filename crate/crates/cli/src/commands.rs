use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use dnseg::bio::{demo_equalize, FixedDnConfig};
use dnseg::data::{
    apply_fog, generate_scene, read_dataset, write_dataset, FogParams, SceneSample, Severity,
};
use dnseg::gradcheck::{run_gradcheck, run_ops, GradcheckConfig, OPS};
use dnseg::imageio::{load_rgb, write_pgm, write_rgb_png};
use dnseg::metrics::{evaluate, EvalReport};
use dnseg::train::{train as fit, LabeledImage, TrainConfig};
use dnseg::unet::{build_model, load_model, model_forward, DnVariant, UNet, UNetConfig, SPATIAL_MULTIPLE};
use dnseg::{Shape, Tensor};

use crate::manifest::{beside, Run};
use crate::{fail, Status};

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of scenes. Scene `i` is rendered from seed `seed + i`.
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    /// Attenuation per unit depth of the low, mid and high severities.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.5, 1.0, 2.0])]
    pub attenuation: Vec<f64>,
    /// Also write every rendering as an 8-bit PNG under `preview/`.
    #[arg(long)]
    pub preview: bool,
}

pub fn gen(args: GenArgs, threads: usize) -> Result<()> {
    let run = Run::start("gen", &args, Some(args.seed), threads);
    if args.n == 0 {
        return Err(fail(Status::Usage, "--n must be at least 1"));
    }
    let fog: Vec<FogParams> = Severity::ALL
        .iter()
        .map(|&s| {
            let mut f = FogParams::preset(s);
            if s != Severity::None {
                f.attenuation = args.attenuation[s as usize - 1];
            }
            f
        })
        .collect();
    for f in &fog {
        f.validate()?;
    }
    let samples = render(&args, threads)?;
    let manifest = write_dataset(&samples, &fog, args.classes, &args.out)?;
    let mut outputs = vec![args.out.join(dnseg::data::MANIFEST_FILE)];
    if args.preview {
        let dir = args.out.join("preview");
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for (entry, sample) in manifest.samples.iter().zip(&samples) {
            for f in &fog {
                let path = dir.join(entry.image_file(f.severity).replace(".f64", ".png"));
                write_rgb_png(&path, &apply_fog(sample, f)?)?;
            }
        }
        outputs.push(dir);
    }
    log::info!(
        "wrote {} scenes x {} severities to {}",
        manifest.samples.len(),
        fog.len(),
        args.out.display()
    );
    run.finish(&args.out.join("run.json"), outputs)
}

fn render(args: &GenArgs, threads: usize) -> Result<Vec<SceneSample>> {
    let one = |i: usize| generate_scene(args.seed.wrapping_add(i as u64), args.height, args.width, args.classes);
    if threads <= 1 {
        return Ok((0..args.n).map(one).collect::<dnseg::Result<_>>()?);
    }
    let chunk = args.n.div_ceil(threads);
    let parts: Vec<dnseg::Result<Vec<SceneSample>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..args.n)
            .step_by(chunk)
            .map(|start| s.spawn(move || (start..(start + chunk).min(args.n)).map(one).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("scene worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(args.n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_variant)]
    pub variant: DnVariant,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint path. History and metadata are written beside it.
    #[arg(long)]
    pub out: PathBuf,
    /// Share of the clean scenes held out for model selection (taken from
    /// the end of the dataset).
    #[arg(long, default_value_t = 0.125)]
    pub val_fraction: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [16, 32, 64])]
    pub channels: Vec<usize>,
    #[arg(long, default_value_t = dnseg::divnorm::DEFAULT_WINDOW)]
    pub window: usize,
    #[arg(long, default_value_t = 1)]
    pub val_every: usize,
    /// Overwrite an existing checkpoint.
    #[arg(long)]
    pub force: bool,
}

fn parse_variant(s: &str) -> Result<DnVariant, String> {
    s.parse().map_err(|e: dnseg::Error| e.to_string())
}

pub fn train(args: TrainArgs) -> Result<()> {
    let run = Run::start("train", &args, Some(args.seed), 1);
    if args.out.exists() && !args.force {
        return Err(fail(
            Status::Usage,
            format!("{} already exists; pass --force to overwrite it", args.out.display()),
        ));
    }
    if !(args.val_fraction > 0.0 && args.val_fraction < 1.0) {
        return Err(fail(Status::Usage, "--val-fraction must lie strictly between 0 and 1"));
    }
    let reader = read_dataset(&args.data)?;
    let mut clean = Vec::with_capacity(reader.len());
    for item in reader.iter_severity(Severity::None) {
        let item = item?;
        clean.push(LabeledImage {
            image: item.image,
            labels: item.labels,
        });
    }
    let n_val = ((clean.len() as f64 * args.val_fraction).round() as usize).max(1);
    if n_val >= clean.len() {
        return Err(fail(
            Status::Usage,
            format!("{} scenes are too few to hold out {n_val} for validation", clean.len()),
        ));
    }
    let val = clean.split_off(clean.len() - n_val);

    let model_config = UNetConfig {
        dn_window: args.window,
        ..UNetConfig::new(reader.manifest().num_classes, args.variant, args.seed).with_encoder_channels(&args.channels)
    };
    let model: UNet<f64> = build_model(&model_config)?;
    log::info!(
        "training {} ({} parameters, {:.2}% in normalization) on {} scenes, validating on {}",
        args.variant,
        model.param_count(),
        100.0 * model.dn_param_fraction(),
        clean.len(),
        val.len()
    );
    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        learning_rate: args.lr,
        seed: args.seed,
        val_every: args.val_every,
        out_path: Some(args.out.clone()),
        ..TrainConfig::default()
    };
    let outcome = fit(model, &clean, &val, &config)?;
    match (outcome.best_epoch, outcome.best_val_miou) {
        (Some(e), Some(v)) => log::info!("best validation mean IoU {v:.4} at epoch {e}"),
        _ => log::info!("no validation point recorded; kept the initial model"),
    }
    let outputs = vec![
        args.out.clone(),
        dnseg::train::meta_path(&args.out),
        dnseg::train::history_path(&args.out),
    ];
    run.finish(&beside(&args.out), outputs)
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Trained checkpoint; repeat for a side-by-side report. Each model must
    /// be a different variant.
    #[arg(long, required = true)]
    pub model: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// JSON report path.
    #[arg(long)]
    pub report: PathBuf,
    /// Also write the plain-text table here.
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
}

pub fn eval(args: EvalArgs, threads: usize) -> Result<()> {
    let run = Run::start("eval", &args, None, threads);
    let reader = read_dataset(&args.data)?;
    let severities = reader.manifest().severities();
    let mut models = Vec::with_capacity(args.model.len());
    for path in &args.model {
        let model: UNet<f64> = load_model(path)?;
        if models.iter().any(|m: &UNet<f64>| m.variant() == model.variant()) {
            return Err(fail(
                Status::Usage,
                format!("two models of variant {} given; a report holds one per variant", model.variant()),
            ));
        }
        models.push(model);
    }
    let score = |m: &UNet<f64>| evaluate(m, &reader, &severities, args.batch);
    let scores: Vec<_> = if threads <= 1 || models.len() == 1 {
        models.iter().map(score).collect()
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = models.iter().map(|m| s.spawn(move || score(m))).collect();
            handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
        })
    };
    let variants = scores.into_iter().collect::<dnseg::Result<Vec<_>>>()?;
    let report = EvalReport::new(reader.manifest().classes.clone(), variants)?;
    fs::write(&args.report, serde_json::to_vec_pretty(&report)?)
        .with_context(|| format!("writing {}", args.report.display()))?;
    let table = report.to_table();
    println!("{table}");
    let mut outputs = vec![args.report.clone()];
    if let Some(path) = &args.table {
        fs::write(path, &table).with_context(|| format!("writing {}", path.display()))?;
        outputs.push(path.clone());
    }
    run.finish(&beside(&args.report), outputs)
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Restrict the check to these ops.
    #[arg(long = "op", value_parser = clap::builder::PossibleValuesParser::new(OPS))]
    pub ops: Vec<String>,
    /// Also write the summary as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

pub fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let run = Run::start("gradcheck", &args, Some(args.seed), 1);
    let config = GradcheckConfig {
        seed: args.seed,
        inject_fault: args.inject_fault.clone(),
        ..GradcheckConfig::default()
    };
    let report = if args.ops.is_empty() {
        run_gradcheck(&config)?
    } else {
        let ops: Vec<&str> = args.ops.iter().map(String::as_str).collect();
        run_ops(&config, &ops)?
    };
    println!("{:<10} {:>8} {:>8} {:>14} {:>14}  result", "op", "checked", "skipped", "max rel err", "max abs err");
    for op in &report.ops {
        println!(
            "{:<10} {:>8} {:>8} {:>14.3e} {:>14.3e}  {}",
            op.op,
            op.checked,
            op.skipped,
            op.max_rel_error,
            op.max_abs_error,
            if op.passed { "ok" } else { "FAIL" }
        );
    }
    if let Some(path) = &args.report {
        fs::write(path, serde_json::to_vec_pretty(&report)?).with_context(|| format!("writing {}", path.display()))?;
        run.finish(&beside(path), vec![path.clone()])?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(fail(
            Status::Numerical,
            format!("gradient check failed for: {}", report.failures().join(", ")),
        ))
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EqualizeArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = FixedDnConfig::default().beta)]
    pub beta: f64,
    #[arg(long, default_value_t = FixedDnConfig::default().sigma)]
    pub sigma: f64,
    #[arg(long, default_value_t = FixedDnConfig::default().coupling)]
    pub coupling: f64,
    #[arg(long, default_value_t = dnseg::bio::DEFAULT_TILE)]
    pub tile: usize,
}

pub fn equalize(args: EqualizeArgs) -> Result<()> {
    let run = Run::start("equalize", &args, None, 1);
    let config = FixedDnConfig {
        beta: args.beta,
        sigma: args.sigma,
        coupling: args.coupling,
    };
    let (report, scatter) = demo_equalize(&args.image, &args.out, &config, args.tile)?;
    if report.degenerate {
        log::warn!("{} has no band-pass content; statistics are undefined", args.image.display());
    } else {
        let d = report.dominant();
        let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        println!(
            "dominant band {}: tile RMS CV {} -> {}",
            d.name,
            show(d.cv_before),
            show(d.cv_after)
        );
    }
    log::info!("{} patches in scatter.json", scatter.patches.len());
    let outputs = vec![args.out.join("report.json"), args.out.join("scatter.json")];
    run.finish(&args.out.join("run.json"), outputs)
}

#[derive(Debug, Args, Serialize)]
pub struct DumpFeaturesArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Input image; repeat to compare several renderings of one scene. The
    /// first is the reference.
    #[arg(long, required = true)]
    pub image: Vec<PathBuf>,
    /// Normalization site, 1 (input) to 4 (deepest encoder stage).
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    pub site: u8,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct MapStats {
    min: f64,
    max: f64,
    mean_abs: f64,
}

#[derive(Debug, Serialize)]
struct ChannelDump {
    channel: usize,
    pre_file: String,
    post_file: String,
    pre: MapStats,
    post: MapStats,
}

#[derive(Debug, Serialize)]
struct ImageDump {
    image: PathBuf,
    height: usize,
    width: usize,
    channels: Vec<ChannelDump>,
}

/// How far one rendering's maps are from the reference rendering's.
#[derive(Debug, Serialize)]
struct Comparison {
    image: usize,
    /// Mean absolute difference over all channels and positions.
    pre_mean_abs_diff: f64,
    post_mean_abs_diff: f64,
    /// The same, divided by the reference maps' mean magnitude.
    pre_relative_diff: f64,
    post_relative_diff: f64,
}

#[derive(Debug, Serialize)]
struct FeatureDump {
    model: PathBuf,
    variant: String,
    site: u8,
    channels: usize,
    images: Vec<ImageDump>,
    comparisons: Vec<Comparison>,
}

fn stats(plane: &[f64]) -> MapStats {
    MapStats {
        min: plane.iter().copied().fold(f64::INFINITY, f64::min),
        max: plane.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean_abs: plane.iter().map(|v| v.abs()).sum::<f64>() / plane.len() as f64,
    }
}

fn mean_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data().len() as f64
}

fn mean_abs(t: &Tensor<f64>) -> f64 {
    t.data().iter().map(|v| v.abs()).sum::<f64>() / t.data().len() as f64
}

/// Top-left crop to the nearest size the network accepts.
fn crop_to_multiple(image: Tensor<f64>, path: &Path) -> Result<Tensor<f64>> {
    let s = image.shape();
    let (h, w) = (s.h / SPATIAL_MULTIPLE * SPATIAL_MULTIPLE, s.w / SPATIAL_MULTIPLE * SPATIAL_MULTIPLE);
    if h == 0 || w == 0 {
        return Err(fail(
            Status::Usage,
            format!("{} is smaller than {SPATIAL_MULTIPLE}x{SPATIAL_MULTIPLE}", path.display()),
        ));
    }
    if (h, w) == (s.h, s.w) {
        return Ok(image);
    }
    log::info!("cropping {} from {}x{} to {h}x{w}", path.display(), s.h, s.w);
    Ok(Tensor::from_fn(Shape::new(1, s.c, h, w), |_, c, y, x| image.get(0, c, y, x)))
}

pub fn dump_features(args: DumpFeaturesArgs) -> Result<()> {
    let run = Run::start("dump-features", &args, None, 1);
    let model: UNet<f64> = load_model(&args.model)?;
    let site = usize::from(args.site);
    if !model.dn_sites().contains(&site) {
        return Err(fail(
            Status::Usage,
            format!(
                "{} is a {} model with normalization sites {:?}; site {site} does not exist",
                args.model.display(),
                model.variant(),
                model.dn_sites()
            ),
        ));
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let mut images = Vec::with_capacity(args.image.len());
    let mut maps: Vec<(Tensor<f64>, Tensor<f64>)> = Vec::with_capacity(args.image.len());
    let mut outputs = Vec::new();
    for (i, path) in args.image.iter().enumerate() {
        let x = crop_to_multiple(load_rgb(path)?, path)?;
        let (_, cache) = model_forward(&model, &x)?;
        let (pre, post) = cache.site_activity(site).expect("site checked above");
        if maps.first().is_some_and(|(first, _)| first.shape() != pre.shape()) {
            return Err(fail(Status::Usage, format!("{} differs in size from the first image", path.display())));
        }
        let s = pre.shape();
        let mut channels = Vec::with_capacity(s.c);
        for c in 0..s.c {
            let pre_file = format!("img{i}_site{site}_c{c}_pre.pgm");
            let post_file = format!("img{i}_site{site}_c{c}_post.pgm");
            write_pgm(args.out.join(&pre_file), pre.plane(0, c), s.h, s.w)?;
            write_pgm(args.out.join(&post_file), post.plane(0, c), s.h, s.w)?;
            outputs.push(args.out.join(&pre_file));
            outputs.push(args.out.join(&post_file));
            channels.push(ChannelDump {
                channel: c,
                pre_file,
                post_file,
                pre: stats(pre.plane(0, c)),
                post: stats(post.plane(0, c)),
            });
        }
        images.push(ImageDump {
            image: path.clone(),
            height: x.shape().h,
            width: x.shape().w,
            channels,
        });
        maps.push((pre.clone(), post.clone()));
    }

    let (ref_pre, ref_post) = &maps[0];
    let comparisons = maps
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, (pre, post))| {
            let (dp, dq) = (mean_abs_diff(ref_pre, pre), mean_abs_diff(ref_post, post));
            Comparison {
                image: i,
                pre_mean_abs_diff: dp,
                post_mean_abs_diff: dq,
                pre_relative_diff: dp / mean_abs(ref_pre),
                post_relative_diff: dq / mean_abs(ref_post),
            }
        })
        .collect::<Vec<_>>();
    for c in &comparisons {
        println!(
            "image {} vs 0: mean |diff| before {:.6}, after {:.6} (relative {:.4} -> {:.4})",
            c.image, c.pre_mean_abs_diff, c.post_mean_abs_diff, c.pre_relative_diff, c.post_relative_diff
        );
    }
    let dump = FeatureDump {
        model: args.model.clone(),
        variant: model.variant().to_string(),
        site: args.site,
        channels: ref_pre.shape().c,
        images,
        comparisons,
    };
    let path = args.out.join("features.json");
    fs::write(&path, serde_json::to_vec_pretty(&dump)?).with_context(|| format!("writing {}", path.display()))?;
    outputs.push(path);
    run.finish(&args.out.join("run.json"), outputs)
}
