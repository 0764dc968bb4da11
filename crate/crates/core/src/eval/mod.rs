//! Box extraction and localization metrics.

mod boxes;

pub use boxes::{extract_box, iou, largest_component, BBox, DEFAULT_THETA};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{Prediction, WsolNet};

/// IoU thresholds of the sweep, `0.1, 0.2, ..., 0.9`.
pub fn sweep_thresholds() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub threshold: f64,
    pub top1: f64,
    pub top5: f64,
    pub gt_known: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationReport {
    pub iou_threshold: f64,
    pub top1: f64,
    pub top5: f64,
    pub gt_known: f64,
    pub miou: f64,
    pub sweep: Vec<SweepPoint>,
    pub per_class_iou: BTreeMap<usize, Vec<f64>>,
}

/// Class indices sorted by descending score; equal scores keep ascending
/// index order.
pub fn ranked_classes(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx
}

/// Mean over classes of the per-class mean IoU. Classes without samples are
/// left out.
pub fn mean_iou(per_class: &BTreeMap<usize, Vec<f64>>) -> f64 {
    let means: Vec<f64> = per_class
        .values()
        .filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    if means.is_empty() {
        0.0
    } else {
        means.iter().sum::<f64>() / means.len() as f64
    }
}

struct Scored {
    iou: f64,
    top1: bool,
    top5: bool,
}

fn rates(scored: &[Scored], threshold: f64) -> SweepPoint {
    let n = scored.len().max(1) as f64;
    let count = |f: &dyn Fn(&Scored) -> bool| scored.iter().filter(|s| f(s)).count() as f64 / n;
    SweepPoint {
        threshold,
        top1: count(&|s| s.top1 && s.iou > threshold),
        top5: count(&|s| s.top5 && s.iou > threshold),
        gt_known: count(&|s| s.iou > threshold),
    }
}

/// Scores `predictions` against the boxes of `samples`. A localization is
/// correct when its IoU is strictly greater than the threshold.
pub fn evaluate(
    samples: &[Sample],
    predictions: &[Prediction],
    iou_threshold: f64,
    theta: f64,
) -> Result<LocalizationReport> {
    if samples.len() != predictions.len() {
        return Err(Error::Contract(format!(
            "{} samples but {} predictions",
            samples.len(),
            predictions.len()
        )));
    }
    let mut scored = Vec::with_capacity(samples.len());
    let mut per_class_iou: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (i, (s, p)) in samples.iter().zip(predictions).enumerate() {
        let gt = s.gt_box.ok_or_else(|| Error::Contract(format!("sample {i} has no ground-truth box")))?;
        let pred = extract_box(&p.heatmap, theta)?;
        let v = iou(&pred, &gt);
        let ranked = ranked_classes(&p.probs);
        scored.push(Scored {
            iou: v,
            top1: ranked.first() == Some(&s.label),
            top5: ranked.iter().take(5).any(|&k| k == s.label),
        });
        per_class_iou.entry(s.label).or_default().push(v);
    }
    let main = rates(&scored, iou_threshold);
    Ok(LocalizationReport {
        iou_threshold,
        top1: main.top1,
        top5: main.top5,
        gt_known: main.gt_known,
        miou: mean_iou(&per_class_iou),
        sweep: sweep_thresholds().into_iter().map(|t| rates(&scored, t)).collect(),
        per_class_iou,
    })
}

/// Runs the network on every sample. Heatmaps use the ground-truth class
/// channel, as GT-known requires; class scores do not depend on it.
pub fn predict_all(net: &WsolNet, samples: &[Sample]) -> Result<Vec<Prediction>> {
    samples.iter().map(|s| net.predict(&s.image, Some(s.label))).collect()
}

impl LocalizationReport {
    /// Human-readable table.
    pub fn table(&self, with_sweep: bool) -> String {
        let mut out = String::new();
        let pct = |v: f64| format!("{:6.2}", 100.0 * v);
        writeln!(out, "metric      value (IoU > {})", self.iou_threshold).unwrap();
        writeln!(out, "top1       {}", pct(self.top1)).unwrap();
        writeln!(out, "top5       {}", pct(self.top5)).unwrap();
        writeln!(out, "gt_known   {}", pct(self.gt_known)).unwrap();
        writeln!(out, "miou       {}", pct(self.miou)).unwrap();
        if with_sweep {
            writeln!(out, "\nthreshold    top1    top5  gt_known").unwrap();
            for p in &self.sweep {
                writeln!(out, "{:9.1}  {}  {}    {}", p.threshold, pct(p.top1), pct(p.top5), pct(p.gt_known))
                    .unwrap();
            }
        }
        out
    }

    /// One `metric threshold value` line per number. `miou` has no
    /// threshold and uses `-`.
    pub fn machine_lines(&self, with_sweep: bool) -> String {
        let mut out = String::new();
        let t = self.iou_threshold;
        for (name, v) in [("top1", self.top1), ("top5", self.top5), ("gt_known", self.gt_known)] {
            writeln!(out, "{name} {t} {v}").unwrap();
        }
        writeln!(out, "miou - {}", self.miou).unwrap();
        if with_sweep {
            for p in &self.sweep {
                for (name, v) in [("top1", p.top1), ("top5", p.top5), ("gt_known", p.gt_known)] {
                    writeln!(out, "sweep_{name} {} {v}", p.threshold).unwrap();
                }
            }
        }
        out
    }
}
