//! Grounding metrics (Acc@θ, mIoU) and training-stability curves.

use crate::geometry::{self, BBox};
use crate::grpo::StepLog;
use crate::policy::{self, PolicyError, PolicyParams};
use crate::scenes::Scene;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("metric undefined on an empty prediction set")]
    Empty,
    #[error("ground-truth box {index} is degenerate: {bbox}")]
    InvalidGt { index: usize, bbox: BBox },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// One prediction paired with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionPair {
    pub id: String,
    pub pred_box: Option<BBox>,
    pub gt_box: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
}

/// How "exceeds the threshold" is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMode {
    /// IoU > θ.
    #[default]
    Strict,
    /// IoU >= θ.
    Inclusive,
}

fn check(pairs: &[(Option<BBox>, BBox)]) -> Result<(), MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::Empty);
    }
    for (index, (_, gt)) in pairs.iter().enumerate() {
        if !gt.is_valid() {
            return Err(MetricError::InvalidGt { index, bbox: *gt });
        }
    }
    Ok(())
}

/// IoU of a pair; absent or degenerate predictions score 0.
pub fn pair_iou(pred: Option<&BBox>, gt: &BBox) -> f64 {
    pred.and_then(|p| geometry::iou(p, gt).ok()).unwrap_or(0.0)
}

pub fn accuracy_at(pairs: &[(Option<BBox>, BBox)], threshold: f64, mode: ThresholdMode) -> Result<f64, MetricError> {
    check(pairs)?;
    let hits = pairs
        .iter()
        .filter(|(p, gt)| {
            let v = pair_iou(p.as_ref(), gt);
            match mode {
                ThresholdMode::Strict => v > threshold,
                ThresholdMode::Inclusive => v >= threshold,
            }
        })
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}

pub fn mean_iou(pairs: &[(Option<BBox>, BBox)]) -> Result<f64, MetricError> {
    check(pairs)?;
    Ok(pairs.iter().map(|(p, gt)| pair_iou(p.as_ref(), gt)).sum::<f64>() / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindReport {
    pub n: usize,
    pub acc_at_05: f64,
    pub acc_at_07: f64,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub acc_at_05: f64,
    pub acc_at_07: f64,
    pub miou: f64,
    pub per_expression_kind: BTreeMap<String, KindReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_std_series: Option<Vec<f64>>,
}

fn kind_report(pairs: &[(Option<BBox>, BBox)], mode: ThresholdMode) -> Result<KindReport, MetricError> {
    Ok(KindReport {
        n: pairs.len(),
        acc_at_05: accuracy_at(pairs, 0.5, mode)?,
        acc_at_07: accuracy_at(pairs, 0.7, mode)?,
        miou: mean_iou(pairs)?,
    })
}

pub fn evaluate_pairs(pairs: &[PredictionPair], mode: ThresholdMode) -> Result<EvalReport, MetricError> {
    let all: Vec<_> = pairs.iter().map(|p| (p.pred_box, p.gt_box)).collect();
    let overall = kind_report(&all, mode)?;
    let mut grouped: BTreeMap<String, Vec<(Option<BBox>, BBox)>> = BTreeMap::new();
    for p in pairs {
        if let Some(k) = &p.kind {
            grouped.entry(k.clone()).or_default().push((p.pred_box, p.gt_box));
        }
    }
    let per_expression_kind = grouped
        .into_iter()
        .map(|(k, v)| Ok((k, kind_report(&v, mode)?)))
        .collect::<Result<_, MetricError>>()?;
    Ok(EvalReport {
        n: overall.n,
        acc_at_05: overall.acc_at_05,
        acc_at_07: overall.acc_at_07,
        miou: overall.miou,
        per_expression_kind,
        reward_std_series: None,
    })
}

/// Greedy predictions of `params` on `scenes`, tagged with expression kinds.
pub fn predict_scenes(params: &PolicyParams, scenes: &[Scene]) -> Result<Vec<PredictionPair>, PolicyError> {
    scenes
        .iter()
        .map(|s| {
            let feat = policy::featurize(s, params.settings.max_objects);
            let r = policy::greedy(params, &feat.values)?;
            Ok(PredictionPair {
                id: s.id.to_string(),
                pred_box: r.prediction().copied(),
                gt_box: s.target_box(),
                kind: Some(s.expression.kind.name().to_string()),
            })
        })
        .collect()
}

/// Greedy Acc@0.5 of `params` on `scenes`.
pub fn policy_accuracy(params: &PolicyParams, scenes: &[Scene]) -> Result<f64, PolicyError> {
    let pairs: Vec<_> = predict_scenes(params, scenes)?
        .into_iter()
        .map(|p| (p.pred_box, p.gt_box))
        .collect();
    Ok(accuracy_at(&pairs, 0.5, ThresholdMode::Strict).unwrap_or(0.0))
}

/// Trailing moving average of the per-step reward std.
pub fn reward_std_curve(logs: &[StepLog], window: usize) -> Vec<f64> {
    let raw: Vec<f64> = logs.iter().map(|l| l.reward_std).collect();
    moving_average(&raw, window)
}

pub fn moving_average(raw: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(raw.len());
    let mut sum = 0.0;
    for i in 0..raw.len() {
        sum += raw[i];
        if i >= window {
            sum -= raw[i - window];
        }
        let n = (i + 1).min(window);
        out.push(if window == 1 { raw[i] } else { sum / n as f64 });
    }
    out
}

/// Load a prediction file: JSON Lines `{id, pred_box | null, gt_box}`.
pub fn load_predictions(path: &Path) -> Result<Vec<PredictionPair>, MetricError> {
    let file = File::open(path).map_err(|source| MetricError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| MetricError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| MetricError::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| schema(e.to_string()))?;
        if value.get("pred_box").is_none() {
            return Err(schema("missing field `pred_box` (use null for no prediction)".into()));
        }
        let mut pair: PredictionPair = serde_json::from_value(value).map_err(|e| schema(e.to_string()))?;
        if !pair.gt_box.is_valid() {
            return Err(schema(format!("degenerate gt_box {}", pair.gt_box)));
        }
        if pair.id.is_empty() {
            pair.id = (i + 1).to_string();
        }
        out.push(pair);
    }
    Ok(out)
}

/// Plain-text rendering of a report.
pub fn render_report(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "samples   {}", r.n);
    let _ = writeln!(s, "Acc@0.5   {:.4}", r.acc_at_05);
    let _ = writeln!(s, "Acc@0.7   {:.4}", r.acc_at_07);
    let _ = writeln!(s, "mIoU      {:.4}", r.miou);
    if !r.per_expression_kind.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<18} {:>6} {:>8} {:>8} {:>8}", "kind", "n", "Acc@0.5", "Acc@0.7", "mIoU");
        for (k, v) in &r.per_expression_kind {
            let _ = writeln!(
                s,
                "{:<18} {:>6} {:>8.4} {:>8.4} {:>8.4}",
                k, v.n, v.acc_at_05, v.acc_at_07, v.miou
            );
        }
    }
    s
}
