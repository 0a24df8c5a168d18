//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.
//!
//! The trend run trains its nine models concurrently, up to the available
//! parallelism. Training is deterministic, so this only changes wall time.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use serde_json::Value;

use dnseg::data::{apply_fog_to, generate_scene, transmittance, FogParams, Grid, Severity};
use dnseg::divnorm::{dn_forward, DnParams, BETA_MIN};
use dnseg::{Shape, Tensor};

const SEVERITIES: [&str; 4] = ["none", "low", "mid", "high"];

// Trend experiment sizes.
const SIZE: usize = 32;
const TRAIN_SCENES: usize = 256;
const VAL_SCENES: usize = 32;
const TEST_SCENES: usize = 128;
const TEST_SEED: u64 = 1_000_000;
const CHANNELS: &str = "8,16,32";
const EPOCHS: usize = 120;
const LR: &str = "1e-3";
const BATCH: &str = "8";
const SEEDS: [u64; 3] = [0, 1, 2];
const VARIANTS: [&str; 3] = ["none", "dn1", "dn4"];

struct Outcome {
    pass: bool,
    detail: String,
}

fn run(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dnseg"))
        .args(args)
        .env("DNSEG_LOG", "quiet")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn json(path: &Path) -> Result<Value, String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| e.to_string())
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gradients() -> Result<Outcome, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let report = dir.path().join("gradcheck.json");
    let started = Instant::now();
    // A failing op exits nonzero but still writes the report.
    let _ = run(&["gradcheck", "--report", s(&report)]);
    let elapsed = started.elapsed();
    let report = json(&report)?;
    let mut worst = (String::new(), 0.0f64);
    let mut pass = elapsed < Duration::from_secs(120);
    let mut seen = Vec::new();
    for op in report["ops"].as_array().ok_or("no ops in report")? {
        let name = op["op"].as_str().unwrap_or_default().to_string();
        let err = op["max_rel_error"].as_f64().unwrap_or(f64::INFINITY);
        pass &= err < 1e-4 && op["checked"].as_u64().unwrap_or(0) > 0;
        if err >= worst.1 {
            worst = (name.clone(), err);
        }
        seen.push(name);
    }
    for required in dnseg::gradcheck::OPS {
        pass &= seen.iter().any(|n| n == required);
    }
    Ok(Outcome {
        pass,
        detail: format!(
            "{} ops, worst {} at {:.2e} (< 1e-4), {:.1}s",
            seen.len(),
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    })
}

fn dn_case() -> impl Strategy<Value = (Tensor<f64>, DnParams<f64>)> {
    (1usize..=3, 1usize..=6, 1usize..=6, prop_oneof![Just(1usize), Just(3), Just(5)]).prop_flat_map(|(c, h, w, k)| {
        (
            prop::collection::vec(-10.0f64..10.0, c * h * w),
            prop::collection::vec(BETA_MIN..3.0, c),
            prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..2.0], c * c * k * k),
        )
            .prop_map(move |(z, beta, gamma)| {
                (
                    Tensor::new(Shape::new(1, c, h, w), z).unwrap(),
                    DnParams::new(beta, Tensor::new(Shape::new(c, c, k, k), gamma).unwrap()).unwrap(),
                )
            })
    })
}

fn check_invariants(z: &Tensor<f64>, params: &DnParams<f64>) -> Result<(), TestCaseError> {
    let (y, _) = dn_forward(z, params).unwrap();
    for (a, b) in z.data().iter().zip(y.data()) {
        prop_assert_eq!(a.partial_cmp(&0.0), b.partial_cmp(&0.0), "sign");
        prop_assert!(b.abs() <= a.abs() / BETA_MIN, "bound");
    }
    for k in [1.0, 2.0, 10.0] {
        let (yk, _) = dn_forward(&z.scale(k), params).unwrap();
        for (big, small) in yk.data().iter().zip(y.data()) {
            prop_assert!(big.abs() <= k * small.abs() * (1.0 + 1e-12), "sublinearity at k={}", k);
        }
    }
    let identity = DnParams::identity(params.channels(), params.window()).unwrap();
    let (same, _) = dn_forward(z, &identity).unwrap();
    prop_assert_eq!(same.data(), z.data(), "identity");
    Ok(())
}

fn invariants() -> Result<Outcome, String> {
    let started = Instant::now();
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    let result = runner.run(&dn_case(), |(z, p)| check_invariants(&z, &p));
    let elapsed = started.elapsed();
    Ok(Outcome {
        pass: result.is_ok() && elapsed < Duration::from_secs(60),
        detail: match result {
            Ok(()) => format!("1000 random cases, {:.1}s", elapsed.as_secs_f64()),
            Err(e) => format!("{e}"),
        },
    })
}

/// Paths shared between the trend experiment and the determinism check.
struct Trend {
    root: tempfile::TempDir,
    data: PathBuf,
    test: PathBuf,
}

impl Trend {
    fn model(&self, variant: &str, seed: u64) -> PathBuf {
        self.root.path().join(format!("{variant}_s{seed}.bin"))
    }

    fn train(&self, variant: &str, seed: u64, out: &Path) -> Result<(), String> {
        let val_fraction = format!("{}", VAL_SCENES as f64 / (TRAIN_SCENES + VAL_SCENES) as f64);
        run(&[
            "train", "--data", s(&self.data), "--variant", variant, "--epochs", &EPOCHS.to_string(), "--lr", LR,
            "--batch", BATCH, "--seed", &seed.to_string(), "--channels", CHANNELS, "--val-fraction", &val_fraction, "--out", s(out),
        ])
        .map(drop)
    }
}

fn mean_iou(report: &Value, variant: &str) -> Result<Vec<f64>, String> {
    let v = report["variants"]
        .as_array()
        .and_then(|vs| vs.iter().find(|v| v["variant"] == variant))
        .ok_or_else(|| format!("{variant} missing from report"))?;
    SEVERITIES
        .iter()
        .map(|sev| {
            v["scores"]
                .as_array()
                .and_then(|sc| sc.iter().find(|x| x["severity"] == *sev))
                .and_then(|x| x["mean_iou"].as_f64())
                .ok_or_else(|| format!("{variant}/{sev} missing"))
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn trend() -> Result<(Outcome, Trend), String> {
    let started = Instant::now();
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let trend = Trend {
        data: root.path().join("train"),
        test: root.path().join("test"),
        root,
    };
    let size = SIZE.to_string();
    run(&[
        "gen", "--out", s(&trend.data), "--n", &(TRAIN_SCENES + VAL_SCENES).to_string(), "--seed", "0", "--height",
        &size, "--width", &size,
    ])?;
    run(&[
        "gen", "--out", s(&trend.test), "--n", &TEST_SCENES.to_string(), "--seed", &TEST_SEED.to_string(),
        "--height", &size, "--width", &size,
    ])?;

    let jobs: Vec<(&str, u64)> = SEEDS.iter().flat_map(|&seed| VARIANTS.map(|v| (v, seed))).collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    for chunk in jobs.chunks(workers) {
        std::thread::scope(|sc| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&(variant, seed)| {
                    let trend = &trend;
                    sc.spawn(move || trend.train(variant, seed, &trend.model(variant, seed)))
                })
                .collect();
            handles.into_iter().try_for_each(|h| h.join().expect("training thread panicked"))
        })?;
    }

    // scores[variant][seed][severity]
    let mut scores = vec![vec![]; VARIANTS.len()];
    for seed in SEEDS {
        let report = trend.root.path().join(format!("report_s{seed}.json"));
        let models: Vec<PathBuf> = VARIANTS.iter().map(|v| trend.model(v, seed)).collect();
        let mut args = vec!["eval", "--data", s(&trend.test), "--report", s(&report)];
        for m in &models {
            args.extend(["--model", s(m)]);
        }
        run(&args)?;
        let report = json(&report)?;
        for (i, variant) in VARIANTS.iter().enumerate() {
            let m = mean_iou(&report, variant)?;
            println!("  seed {seed} {variant:<4} mean IoU {}", fmt(&m));
            scores[i].push(m);
        }
    }
    let medians: Vec<Vec<f64>> = scores
        .iter()
        .map(|per_seed| (0..SEVERITIES.len()).map(|k| median(per_seed.iter().map(|m| m[k]).collect())).collect())
        .collect();
    for (variant, m) in VARIANTS.iter().zip(&medians) {
        println!("  median   {variant:<4} mean IoU {}", fmt(m));
    }
    let (none, dn4) = (&medians[0], &medians[2]);
    let better = (0..4).all(|k| dn4[k] > none[k]);
    let gain = |k: usize| (dn4[k] - none[k]) / none[k];
    let grows = gain(3) > gain(0);
    let monotone = scores.iter().flatten().all(|m| m.windows(2).all(|w| w[1] < w[0]));
    let elapsed = started.elapsed();
    let detail = format!(
        "(a) dn4 > none at every severity: {} | (b) gain {:+.1}% clean -> {:+.1}% high: {} | (c) monotone for all {} models: {} | {:.0}s (target 1800s)",
        yes(better),
        100.0 * gain(0),
        100.0 * gain(3),
        yes(grows),
        VARIANTS.len() * SEEDS.len(),
        yes(monotone),
        elapsed.as_secs_f64()
    );
    Ok((
        Outcome {
            pass: better && grows && monotone,
            detail,
        },
        trend,
    ))
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" / ")
}

fn yes(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn equalization() -> Result<Outcome, String> {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let image = dir.path().join("ramp.pgm");
    let grating = dnseg::bio::contrast_ramp_grating(64, 128, 0.1, 0.0, 0.05);
    dnseg::imageio::write_pgm(&image, grating.data(), 64, 128).map_err(|e| e.to_string())?;
    let eq = dir.path().join("eq");
    run(&["equalize", "--image", s(&image), "--out", s(&eq)])?;
    let report = json(&eq.join("report.json"))?;
    let dominant = report["dominant_band"].as_str().ok_or("no dominant band")?;
    let band = report["bands"]
        .as_array()
        .and_then(|bands| bands.iter().find(|b| b["name"] == dominant))
        .ok_or_else(|| format!("dominant band {dominant} not listed"))?;
    let (before, after) = (
        band["cv_before"].as_f64().ok_or("cv_before undefined")?,
        band["cv_after"].as_f64().ok_or("cv_after undefined")?,
    );

    // A briefly trained dn4 model and one scene rendered clean and foggy.
    let data = dir.path().join("data");
    run(&["gen", "--out", s(&data), "--n", "72", "--seed", "0", "--preview"])?;
    let model = dir.path().join("dn4.bin");
    run(&[
        "train", "--data", s(&data), "--variant", "dn4", "--epochs", "12", "--lr", LR, "--batch", BATCH, "--channels", CHANNELS,
        "--val-fraction", "0.111", "--out", s(&model),
    ])?;
    let feats = dir.path().join("features");
    let clean = data.join("preview/img_00000_none.png");
    let foggy = data.join("preview/img_00000_high.png");
    run(&[
        "dump-features", "--model", s(&model), "--image", s(&clean), "--image", s(&foggy), "--site", "2", "--out",
        s(&feats),
    ])?;
    let cmp = &json(&feats.join("features.json"))?["comparisons"][0];
    let pre = cmp["pre_mean_abs_diff"].as_f64().ok_or("no pre difference")?;
    let post = cmp["post_mean_abs_diff"].as_f64().ok_or("no post difference")?;
    let elapsed = started.elapsed();
    Ok(Outcome {
        pass: after < before && post < pre && elapsed < Duration::from_secs(60),
        detail: format!(
            "ramp CV {before:.3} -> {after:.3}; site 2 clean/high mean |diff| {pre:.4} -> {post:.4} (relative {:.3} -> {:.3}); {:.1}s",
            cmp["pre_relative_diff"].as_f64().unwrap_or(f64::NAN),
            cmp["post_relative_diff"].as_f64().unwrap_or(f64::NAN),
            elapsed.as_secs_f64()
        ),
    })
}

fn fog() -> Result<Outcome, String> {
    let started = Instant::now();
    let depth = Grid::filled(2, 2, 1.0);
    let image = Tensor::full(Shape::new(1, 3, 2, 2), 0.8);
    let mut worst = 0.0f64;

    let clear = apply_fog_to(&image, &depth, &FogParams::preset(Severity::None)).map_err(|e| e.to_string())?;
    worst = worst.max(clear.max_abs_diff(&image));

    let half = FogParams {
        severity: Severity::Mid,
        attenuation: std::f64::consts::LN_2,
        airlight: [1.0; 3],
    };
    let out = apply_fog_to(&image, &depth, &half).map_err(|e| e.to_string())?;
    worst = out.data().iter().map(|v| (v - 0.9).abs()).fold(worst, f64::max);

    let far = Grid::filled(2, 2, 1e6);
    let thick = FogParams::preset(Severity::High);
    let out = apply_fog_to(&image, &far, &thick).map_err(|e| e.to_string())?;
    for c in 0..3 {
        worst = out.plane(0, c).iter().map(|v| (v - thick.airlight[c]).abs()).fold(worst, f64::max);
    }

    let presets = FogParams::presets();
    let mut pixels = 0usize;
    let mut ordered = true;
    for seed in 0..100 {
        let scene = generate_scene(50_000 + seed, 32, 32, 4).map_err(|e| e.to_string())?;
        for &d in scene.depth.data() {
            let t: Vec<f64> = presets.iter().map(|f| transmittance(d, f.attenuation)).collect();
            ordered &= d > 0.0 && t[3] < t[2] && t[2] < t[1] && t[1] < 1.0;
            pixels += 1;
        }
    }
    Ok(Outcome {
        pass: worst <= 1e-12 && ordered,
        detail: format!(
            "closed forms within {worst:.1e} (<= 1e-12); ordering at {pixels} pixels: {}; {:.2}s",
            yes(ordered),
            started.elapsed().as_secs_f64()
        ),
    })
}

fn determinism(trend: &Trend) -> Result<Outcome, String> {
    let (variant, seed) = (VARIANTS[0], SEEDS[0]);
    let first = trend.model(variant, seed);
    let again = trend.root.path().join("repeat.bin");
    trend.train(variant, seed, &again)?;
    let history = |m: &Path| fs::read(format!("{}.history.jsonl", m.display())).map_err(|e| e.to_string());
    let same_history = history(&first)? == history(&again)?;
    let same_weights = fs::read(&first).ok() == fs::read(&again).ok();

    let report = |m: &Path, name: &str| -> Result<Vec<u8>, String> {
        let path = trend.root.path().join(name);
        run(&["eval", "--model", s(m), "--data", s(&trend.test), "--report", s(&path)])?;
        fs::read(&path).map_err(|e| e.to_string())
    };
    let same_report = report(&first, "r1.json")? == report(&again, "r2.json")?;
    Ok(Outcome {
        pass: same_history && same_report && same_weights,
        detail: format!(
            "{variant} seed {seed} retrained: history identical {}, checkpoint identical {}, report identical {}",
            yes(same_history),
            yes(same_weights),
            yes(same_report)
        ),
    })
}

fn report(id: u32, name: &str, outcome: Result<Outcome, String>) -> bool {
    let (pass, detail) = match outcome {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!("{} criterion {id} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn main() {
    let mut all = true;
    all &= report(1, "gradient correctness", gradients());
    all &= report(2, "normalization invariants", invariants());
    let trend = trend();
    let (outcome, shared) = match trend {
        Ok((o, t)) => (Ok(o), Some(t)),
        Err(e) => (Err(e), None),
    };
    all &= report(3, "fog robustness trend", outcome);
    all &= report(4, "equalization", equalization());
    all &= report(5, "fog renderer", fog());
    all &= report(
        6,
        "determinism",
        shared.as_ref().ok_or_else(|| "trend run failed".to_string()).and_then(determinism),
    );
    if !all {
        std::process::exit(1);
    }
}
