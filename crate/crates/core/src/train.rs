//! MAE loss, Adam with constraint projection, and the training loop with
//! validation-IoU model selection.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{stack_labels, LabelMap};
use crate::divnorm::{project_beta, project_gamma};
use crate::error::{Error, Result};
use crate::metrics::score_model;
use crate::rng::{substream, STREAM_SHUFFLE};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::unet::{model_backward, model_forward, save_model, Gradients, ParamKind, UNet, UNetConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Validate every this many epochs (and always after the last one).
    pub val_every: usize,
    /// When set, the best model, its metadata and the history are written here.
    pub out_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            val_every: 1,
            out_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam moment decays must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("Adam eps must be positive"));
        }
        if self.val_every == 0 {
            return Err(Error::invalid("val_every must be at least 1"));
        }
        Ok(())
    }
}

/// Mean absolute error between raw scores and one-hot targets, with its
/// gradient `sign(logit - target) / len`.
pub fn mae_loss<S: Scalar>(logits: &Tensor<S>, labels: &[u16]) -> Result<(S, Tensor<S>)> {
    let s = logits.shape();
    let plane = s.plane();
    if labels.len() != s.n * plane {
        return Err(Error::ShapeMismatch {
            op: "mae_loss",
            expected: format!("{} labels for logits {s}", s.n * plane),
            found: labels.len().to_string(),
        });
    }
    if let Some(l) = labels.iter().find(|&&l| l as usize >= s.c) {
        return Err(Error::invalid(format!("label {l} out of range for {} classes", s.c)));
    }
    let scale = S::one() / S::of(s.len() as f64);
    let mut grad = Tensor::zeros(s);
    let mut total = S::zero();
    for n in 0..s.n {
        let lab = &labels[n * plane..(n + 1) * plane];
        for c in 0..s.c {
            let off = (n * s.c + c) * plane;
            let z = &logits.data()[off..off + plane];
            let g = &mut grad.data_mut()[off..off + plane];
            let mut part = S::zero();
            for p in 0..plane {
                let target = if lab[p] as usize == c { S::one() } else { S::zero() };
                let r = z[p] - target;
                part += r.abs();
                g[p] = r.sign_or_zero() * scale;
            }
            total += part;
        }
    }
    Ok((total * scale, grad))
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    pub t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(model: &UNet<S>) -> Self {
        let zeros: Vec<Vec<S>> = model.params().iter().map(|p| vec![S::zero(); p.data.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, then `beta >= 1e-6` and `gamma >= 0`.
pub fn adam_step<S: Scalar>(
    model: &mut UNet<S>,
    grads: &Gradients<S>,
    state: &mut AdamState<S>,
    config: &TrainConfig,
) -> Result<()> {
    let grads = grads.params();
    let mut params = model.params_mut();
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            expected: format!("{} parameter buffers", params.len()),
            found: format!("{} gradients, {} moment buffers", grads.len(), state.m.len()),
        });
    }
    for (i, ((_, p), g)) in params.iter().zip(&grads).enumerate() {
        if p.len() != g.data.len() || state.m[i].len() != p.len() || state.v[i].len() != p.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                expected: format!("{} values for {}", p.len(), g.name),
                found: format!("{} gradient, {} moment values", g.data.len(), state.m[i].len()),
            });
        }
    }

    state.t += 1;
    let (b1, b2) = (S::of(config.beta1), S::of(config.beta2));
    let one = S::one();
    let c1 = one - S::of(config.beta1.powi(state.t as i32));
    let c2 = one - S::of(config.beta2.powi(state.t as i32));
    let lr = S::of(config.learning_rate);
    let eps = S::of(config.eps);
    for (i, ((kind, p), g)) in params.iter_mut().zip(&grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            let gj = g.data[j];
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        match kind {
            ParamKind::DnBeta => project_beta(p),
            ParamKind::DnGamma => project_gamma(p),
            ParamKind::ConvWeight | ParamKind::ConvBias => {}
        }
    }
    drop(params);
    debug_assert!(model.validate_dn().is_ok(), "normalization constraints violated after a step");
    Ok(())
}

/// A clean image with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `(1, 3, h, w)`.
    pub image: Tensor<f64>,
    pub labels: LabelMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches, weighted by batch size.
    pub loss: f64,
    pub val_miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome<S> {
    pub best: UNet<S>,
    pub best_epoch: Option<usize>,
    pub best_val_miou: Option<f64>,
    pub history: Vec<HistoryRecord>,
}

/// Sidecar metadata written next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub train_config: TrainConfig,
    pub model_config: UNetConfig,
    pub best_epoch: Option<usize>,
    pub best_val_miou: Option<f64>,
    pub epochs_run: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    /// Full-scale settings for comparison with the desk-scale defaults.
    pub reference_protocol: ReferenceProtocol,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceProtocol {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub loss: String,
    pub optimizer: String,
}

impl Default for ReferenceProtocol {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 500,
            learning_rate: 1e-3,
            loss: "mae".into(),
            optimizer: "adam".into(),
        }
    }
}

pub fn history_path(out: &Path) -> PathBuf {
    sidecar(out, "history.jsonl")
}

pub fn meta_path(out: &Path) -> PathBuf {
    sidecar(out, "meta.json")
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_os_string();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn stack_batch<S: Scalar>(set: &[LabeledImage], idx: &[usize]) -> Result<(Tensor<S>, Vec<u16>)> {
    let images: Vec<Tensor<S>> = idx.iter().map(|&i| set[i].image.cast()).collect();
    let refs: Vec<&Tensor<S>> = images.iter().collect();
    let labels: Vec<&LabelMap> = idx.iter().map(|&i| &set[i].labels).collect();
    Ok((Tensor::stack(&refs)?, stack_labels(&labels)?))
}

/// Mean loss of `model` over `set`, without updating anything.
pub fn dataset_loss<S: Scalar>(model: &UNet<S>, set: &[LabeledImage], batch_size: usize) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = stack_batch(set, chunk)?;
        let (logits, _) = model_forward(model, &x)?;
        let (loss, _) = mae_loss(&logits, &y)?;
        total += loss.to_f64_lossy() * chunk.len() as f64;
    }
    Ok(total / set.len() as f64)
}

pub fn validation_miou<S: Scalar>(model: &UNet<S>, set: &[LabeledImage], batch_size: usize) -> Result<f64> {
    let acc = score_model(model, set.iter().map(|e| (&e.image, &e.labels)), batch_size)?;
    acc.mean().ok_or_else(|| Error::invalid("empty validation set"))
}

/// Trains `model` and returns the parameters with the best validation mean
/// IoU. Fully deterministic given `config.seed`.
pub fn train<S: Scalar>(
    model: UNet<S>,
    train_set: &[LabeledImage],
    val_set: &[LabeledImage],
    config: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    train_with_progress(model, train_set, val_set, config, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_progress<S: Scalar>(
    mut model: UNet<S>,
    train_set: &[LabeledImage],
    val_set: &[LabeledImage],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&HistoryRecord),
) -> Result<TrainOutcome<S>> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let mut rng = substream(config.seed, STREAM_SHUFFLE);
    let mut state = AdamState::new(&model);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best = model.clone();
    let mut best_epoch = None;
    let mut best_val: Option<f64> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (x, y) = stack_batch(train_set, chunk)?;
            let (logits, cache) = model_forward(&model, &x)?;
            let (loss, grad) = mae_loss(&logits, &y)?;
            let loss = loss.to_f64_lossy();
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            total += loss * chunk.len() as f64;
            let grads = model_backward(&model, &cache, &grad)?;
            adam_step(&mut model, &grads, &mut state, config)?;
        }
        let loss = total / train_set.len() as f64;

        let val_miou = if epoch % config.val_every == 0 || epoch == config.epochs {
            let v = validation_miou(&model, val_set, config.batch_size)?;
            if best_val.map_or(true, |b| v > b) {
                best_val = Some(v);
                best_epoch = Some(epoch);
                best = model.clone();
            }
            Some(v)
        } else {
            None
        };
        let record = HistoryRecord { epoch, loss, val_miou };
        log::info!("epoch {epoch}: loss {loss:.6}{}", val_miou.map_or(String::new(), |v| format!(", val mIoU {v:.4}")));
        on_epoch(&record);
        history.push(record);
    }

    let outcome = TrainOutcome {
        best,
        best_epoch,
        best_val_miou: best_val,
        history,
    };
    if let Some(out) = &config.out_path {
        save_checkpoint(&outcome, config, train_set.len(), val_set.len(), out)?;
    }
    Ok(outcome)
}

pub fn write_history(history: &[HistoryRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for r in history {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Writes the weights to `out`, metadata to `<out>.meta.json` and the
/// history to `<out>.history.jsonl`.
pub fn save_checkpoint<S: Scalar>(
    outcome: &TrainOutcome<S>,
    config: &TrainConfig,
    train_samples: usize,
    val_samples: usize,
    out: &Path,
) -> Result<()> {
    save_model(&outcome.best, out)?;
    let meta = CheckpointMeta {
        train_config: config.clone(),
        model_config: outcome.best.config().clone(),
        best_epoch: outcome.best_epoch,
        best_val_miou: outcome.best_val_miou,
        epochs_run: outcome.history.len(),
        train_samples,
        val_samples,
        reference_protocol: ReferenceProtocol::default(),
    };
    let path = meta_path(out);
    let json = serde_json::to_vec_pretty(&meta)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    write_history(&outcome.history, &history_path(out))
}
