//! Segmentation scores, the fog-degradation report, and spatial
//! equalization statistics of feature maps.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{stack_labels, DatasetReader, LabelMap, Severity};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};
use crate::unet::{model_forward, UNet};

/// Per-pixel class with the highest score; ties go to the lowest class.
pub fn argmax_classes<S: Scalar>(logits: &Tensor<S>) -> Vec<u16> {
    let s = logits.shape();
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let mut best = 0usize;
            let mut best_v = logits.data()[base + p];
            for c in 1..s.c {
                let v = logits.data()[base + c * plane + p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out.push(best as u16);
        }
    }
    out
}

/// Running intersection and union counts, pooled over every pixel added.
#[derive(Clone, Debug, PartialEq)]
pub struct IouAccumulator {
    inter: Vec<u64>,
    union: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            inter: vec![0; num_classes],
            union: vec![0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.inter.len()
    }

    pub fn add(&mut self, pred: &[u16], gt: &[u16]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::ShapeMismatch {
                op: "iou",
                expected: format!("{} predicted pixels", gt.len()),
                found: pred.len().to_string(),
            });
        }
        let k = self.num_classes();
        if let Some(v) = pred.iter().chain(gt).find(|&&v| v as usize >= k) {
            return Err(Error::invalid(format!("class {v} out of range for {k} classes")));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if p == g {
                self.inter[p as usize] += 1;
                self.union[p as usize] += 1;
            } else {
                self.union[p as usize] += 1;
                self.union[g as usize] += 1;
            }
        }
        Ok(())
    }

    /// `None` for classes absent from both prediction and ground truth.
    pub fn per_class(&self) -> Vec<Option<f64>> {
        self.inter
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect()
    }

    pub fn mean(&self) -> Option<f64> {
        mean_present(&self.per_class())
    }
}

fn mean_present(per_class: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouScore {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn iou(pred: &[u16], gt: &[u16], num_classes: usize) -> Result<IouScore> {
    let mut acc = IouAccumulator::new(num_classes);
    acc.add(pred, gt)?;
    let mean = acc.mean().ok_or_else(|| Error::invalid("iou of an empty label map"))?;
    Ok(IouScore {
        per_class: acc.per_class(),
        mean,
    })
}

/// Runs `model` over `(image, labels)` pairs in batches and pools the counts.
pub fn score_model<'a, S: Scalar>(
    model: &UNet<S>,
    pairs: impl IntoIterator<Item = (&'a Tensor<f64>, &'a LabelMap)>,
    batch_size: usize,
) -> Result<IouAccumulator> {
    let mut acc = IouAccumulator::new(model.config().num_classes);
    let mut images: Vec<Tensor<S>> = Vec::new();
    let mut labels: Vec<&LabelMap> = Vec::new();
    let mut flush = |images: &mut Vec<Tensor<S>>, labels: &mut Vec<&LabelMap>| -> Result<()> {
        if images.is_empty() {
            return Ok(());
        }
        let refs: Vec<&Tensor<S>> = images.iter().collect();
        let (logits, _) = model_forward(model, &Tensor::stack(&refs)?)?;
        acc.add(&argmax_classes(&logits), &stack_labels(labels)?)?;
        images.clear();
        labels.clear();
        Ok(())
    };
    for (image, lab) in pairs {
        images.push(image.cast());
        labels.push(lab);
        if images.len() == batch_size.max(1) {
            flush(&mut images, &mut labels)?;
        }
    }
    flush(&mut images, &mut labels)?;
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityScore {
    pub severity: Severity,
    pub per_class: Vec<Option<f64>>,
    pub mean_iou: f64,
}

/// Scores of one trained model on every requested severity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantScores {
    pub variant: String,
    pub scores: Vec<SeverityScore>,
}

impl VariantScores {
    pub fn mean(&self, severity: Severity) -> Option<f64> {
        self.scores.iter().find(|s| s.severity == severity).map(|s| s.mean_iou)
    }
}

/// Scores `model` on every listed severity of the same scenes.
pub fn evaluate<S: Scalar>(
    model: &UNet<S>,
    dataset: &DatasetReader,
    severities: &[Severity],
    batch_size: usize,
) -> Result<VariantScores> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    if severities.is_empty() {
        return Err(Error::invalid("no severities requested"));
    }
    let k = model.config().num_classes;
    if dataset.manifest().num_classes != k {
        return Err(Error::invalid(format!(
            "model predicts {k} classes, dataset has {}",
            dataset.manifest().num_classes
        )));
    }
    let labels: Vec<LabelMap> = (0..dataset.len()).map(|i| dataset.read_labels(i)).collect::<Result<_>>()?;
    let mut scores = Vec::with_capacity(severities.len());
    for &severity in severities {
        let mut acc = IouAccumulator::new(k);
        for start in (0..dataset.len()).step_by(batch_size.max(1)) {
            let end = (start + batch_size.max(1)).min(dataset.len());
            let images: Vec<Tensor<f64>> =
                (start..end).map(|i| dataset.read_image(i, severity)).collect::<Result<_>>()?;
            let pairs = images.iter().zip(&labels[start..end]);
            let part = score_model(model, pairs, batch_size)?;
            for c in 0..k {
                acc.inter[c] += part.inter[c];
                acc.union[c] += part.union[c];
            }
        }
        scores.push(SeverityScore {
            severity,
            per_class: acc.per_class(),
            mean_iou: acc.mean().expect("non-empty dataset has a present class"),
        });
    }
    Ok(VariantScores {
        variant: model.variant().to_string(),
        scores,
    })
}

/// `(a - b) / b`, undefined when `b == 0`.
pub fn relative_change(a: f64, b: f64) -> Option<f64> {
    (b != 0.0).then(|| (a - b) / b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeChange {
    pub variant: String,
    pub severity: Severity,
    /// Fraction, not percent.
    pub change: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<String>,
    pub severities: Vec<Severity>,
    pub baseline: String,
    pub variants: Vec<VariantScores>,
    /// Each non-baseline variant against the baseline at the same severity.
    pub improvements: Vec<RelativeChange>,
    /// Each foggy severity against the clean one, per variant.
    pub reductions: Vec<RelativeChange>,
}

impl EvalReport {
    /// The baseline is the variant named `none` if present, else the first.
    pub fn new(classes: Vec<String>, variants: Vec<VariantScores>) -> Result<Self> {
        let first = variants.first().ok_or_else(|| Error::invalid("report needs at least one variant"))?;
        let severities: Vec<Severity> = first.scores.iter().map(|s| s.severity).collect();
        for v in &variants {
            let s: Vec<Severity> = v.scores.iter().map(|s| s.severity).collect();
            if s != severities {
                return Err(Error::invalid(format!(
                    "variant {} was scored on {s:?}, expected {severities:?}",
                    v.variant
                )));
            }
        }
        let baseline = variants
            .iter()
            .find(|v| v.variant == "none")
            .unwrap_or(first)
            .clone();

        let mut improvements = Vec::new();
        for v in variants.iter().filter(|v| v.variant != baseline.variant) {
            for &sev in &severities {
                improvements.push(RelativeChange {
                    variant: v.variant.clone(),
                    severity: sev,
                    change: relative_change(v.mean(sev).unwrap(), baseline.mean(sev).unwrap()),
                });
            }
        }
        let mut reductions = Vec::new();
        if severities.contains(&Severity::None) {
            for &sev in severities.iter().filter(|s| **s != Severity::None) {
                for v in &variants {
                    reductions.push(RelativeChange {
                        variant: v.variant.clone(),
                        severity: sev,
                        change: relative_change(v.mean(sev).unwrap(), v.mean(Severity::None).unwrap()),
                    });
                }
            }
        }
        Ok(Self {
            classes,
            severities,
            baseline: baseline.variant,
            variants,
            improvements,
            reductions,
        })
    }

    pub fn mean(&self, variant: &str, severity: Severity) -> Option<f64> {
        self.variants.iter().find(|v| v.variant == variant)?.mean(severity)
    }

    fn lookup(list: &[RelativeChange], variant: &str, severity: Severity) -> Option<f64> {
        list.iter()
            .find(|c| c.variant == variant && c.severity == severity)
            .and_then(|c| c.change)
    }

    /// Two-panel plain-text table: absolute mean IoU with the change against
    /// the baseline in parentheses, then the change of each fog level against
    /// clean images.
    pub fn to_table(&self) -> String {
        let headers: Vec<String> = self.variants.iter().map(|v| variant_title(&v.variant)).collect();
        let mut top = vec![std::iter::once("Dataset".to_string()).chain(headers.iter().cloned()).collect::<Vec<_>>()];
        for &sev in &self.severities {
            let mut row = vec![severity_title(sev).to_string()];
            for v in &self.variants {
                let m = v.mean(sev).unwrap();
                row.push(if v.variant == self.baseline {
                    format!("{m:.2}")
                } else {
                    format!("{m:.2} ({})", percent(Self::lookup(&self.improvements, &v.variant, sev)))
                });
            }
            top.push(row);
        }
        let mut out = render(&top);
        if !self.reductions.is_empty() {
            out.push_str("\nIoU reductions (due to fog)\n");
            let mut bottom =
                vec![std::iter::once("Dataset change".to_string()).chain(headers).collect::<Vec<_>>()];
            for &sev in self.severities.iter().filter(|s| **s != Severity::None) {
                let mut row = vec![format!("Original-{}", severity_title(sev).to_lowercase())];
                for v in &self.variants {
                    row.push(percent(Self::lookup(&self.reductions, &v.variant, sev)));
                }
                bottom.push(row);
            }
            out.push_str(&render(&bottom));
        }
        out
    }
}

fn variant_title(v: &str) -> String {
    match v {
        "none" => "No DN".into(),
        "dn1" => "1 DN".into(),
        "dn4" => "4 DN".into(),
        other => other.into(),
    }
}

fn severity_title(s: Severity) -> &'static str {
    match s {
        Severity::None => "Original",
        Severity::Low => "Low fog",
        Severity::Mid => "Middle fog",
        Severity::High => "High fog",
    }
}

fn percent(change: Option<f64>) -> String {
    change.map_or_else(|| "n/a".to_string(), |c| format!("{:.1}%", 100.0 * c))
}

fn render(rows: &[Vec<String>]) -> String {
    let cols = rows[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        writeln!(out, "{}", cells.join(" | ").trim_end()).unwrap();
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            writeln!(out, "{}", rule.join("-+-")).unwrap();
        }
    }
    out
}

/// Coefficient of variation of per-tile RMS activity, per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EqualizationStats {
    pub tile: usize,
    pub cv_before: Vec<Option<f64>>,
    pub cv_after: Vec<Option<f64>>,
}

pub fn equalization_stats<S: Scalar>(before: &Tensor<S>, after: &Tensor<S>, tile: usize) -> Result<EqualizationStats> {
    if before.shape() != after.shape() {
        return Err(Error::ShapeMismatch {
            op: "equalization_stats",
            expected: before.shape().to_string(),
            found: after.shape().to_string(),
        });
    }
    Ok(EqualizationStats {
        tile,
        cv_before: tile_rms_cv(before, tile)?,
        cv_after: tile_rms_cv(after, tile)?,
    })
}

/// Per channel, the CV (population std over mean) of the RMS of each
/// `tile x tile` block, pooled over the batch. `None` when every tile is zero.
pub fn tile_rms_cv<S: Scalar>(maps: &Tensor<S>, tile: usize) -> Result<Vec<Option<f64>>> {
    let Shape { n, c, h, w } = maps.shape();
    if tile == 0 || h % tile != 0 || w % tile != 0 {
        return Err(Error::invalid(format!("tile {tile} must divide the {h}x{w} maps")));
    }
    let (ty, tx) = (h / tile, w / tile);
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let mut rms = Vec::with_capacity(n * ty * tx);
        for s in 0..n {
            let plane = maps.plane(s, ch);
            for by in 0..ty {
                for bx in 0..tx {
                    let mut ss = 0.0;
                    for y in by * tile..(by + 1) * tile {
                        for v in &plane[y * w + bx * tile..y * w + (bx + 1) * tile] {
                            let v = v.to_f64_lossy();
                            ss += v * v;
                        }
                    }
                    rms.push((ss / (tile * tile) as f64).sqrt());
                }
            }
        }
        out.push(coefficient_of_variation(&rms));
    }
    Ok(out)
}

/// Population standard deviation over mean; `None` for a zero mean.
pub fn coefficient_of_variation(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return None;
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some(var.sqrt() / mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_iou() {
        let s = iou(&[1, 1, 0, 0], &[1, 0, 1, 0], 2).unwrap();
        assert_eq!(s.per_class, vec![Some(1.0 / 3.0), Some(1.0 / 3.0)]);
        let same = iou(&[0, 2, 2, 0], &[0, 2, 2, 0], 4).unwrap();
        assert_eq!(same.per_class, vec![Some(1.0), None, Some(1.0), None]);
        assert_eq!(same.mean, 1.0);
        let disjoint = iou(&[1, 1, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(disjoint.per_class, vec![Some(0.0), Some(0.0)]);
    }

    #[test]
    fn iou_rejects_bad_input() {
        assert!(iou(&[0, 1], &[0], 2).is_err());
        assert!(iou(&[0, 2], &[0, 1], 2).is_err());
        assert!(iou(&[], &[], 2).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let t = Tensor::new(Shape::new(1, 3, 1, 2), vec![0.5, 0.1, 0.5, 0.9, 0.2, 0.9]).unwrap();
        assert_eq!(argmax_classes(&t), vec![0, 1]);
    }

    fn scores(variant: &str, means: [f64; 4]) -> VariantScores {
        VariantScores {
            variant: variant.into(),
            scores: Severity::ALL
                .iter()
                .zip(means)
                .map(|(&severity, m)| SeverityScore {
                    severity,
                    per_class: vec![Some(m)],
                    mean_iou: m,
                })
                .collect(),
        }
    }

    #[test]
    fn report_panels() {
        let report = EvalReport::new(
            vec!["background".into()],
            vec![
                scores("none", [0.5, 0.5, 0.4, 0.25]),
                scores("dn1", [0.5, 0.45, 0.4, 0.3]),
                scores("dn4", [0.55, 0.5, 0.45, 0.3]),
            ],
        )
        .unwrap();
        assert_eq!(report.severities.len(), 4);
        assert_eq!(report.improvements.len(), 2 * 4);
        assert_eq!(report.reductions.len(), 3 * 3);
        assert_eq!(EvalReport::lookup(&report.reductions, "none", Severity::Low), Some(0.0));
        assert_eq!(EvalReport::lookup(&report.reductions, "none", Severity::High), Some(-0.5));
        let gain = EvalReport::lookup(&report.improvements, "dn4", Severity::High).unwrap();
        assert!((gain - 0.2).abs() < 1e-12);

        let table = report.to_table();
        assert!(table.contains("No DN"), "{table}");
        assert!(table.contains("IoU reductions (due to fog)"));
        assert!(table.contains("Original-high fog"));
        assert!(table.contains("0.30 (20.0%)"), "{table}");
    }

    #[test]
    fn cv_examples() {
        assert_eq!(coefficient_of_variation(&[1.0, 3.0]), Some(0.5));
        assert_eq!(coefficient_of_variation(&[0.0, 0.0]), None);

        // Two 2x2 tiles with RMS 1 and 3.
        let t = Tensor::new(Shape::new(1, 1, 2, 4), vec![1.0, -1.0, 3.0, 3.0, 1.0, 1.0, -3.0, 3.0]).unwrap();
        assert_eq!(tile_rms_cv(&t, 2).unwrap(), vec![Some(0.5)]);
        let flat = Tensor::full(Shape::new(1, 2, 4, 4), 0.7);
        let stats = equalization_stats(&flat, &flat, 2).unwrap();
        assert_eq!(stats.cv_before, vec![Some(0.0), Some(0.0)]);
        assert_eq!(stats.cv_before, stats.cv_after);
        assert!(tile_rms_cv(&t, 3).is_err());
        assert_eq!(tile_rms_cv(&Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2)), 2).unwrap(), vec![None]);
    }
}
