//! Confusion-matrix metrics with `Normal` as the positive class, and
//! mean ± sample standard deviation summaries across seeds.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labeling::Label;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("predictions ({0}) and gold ({1}) differ in length")]
    ShapeError(usize, usize),
    #[error("no examples to score")]
    EmptyInput,
    #[error("uncertain label cannot be scored")]
    InvalidLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    Accuracy,
    Sensitivity,
    Specificity,
    Precision,
    F1,
}

impl Metric {
    pub const ALL: [Metric; 5] =
        [Metric::Accuracy, Metric::Sensitivity, Metric::Specificity, Metric::Precision, Metric::F1];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Sensitivity => "sensitivity",
            Metric::Specificity => "specificity",
            Metric::Precision => "precision",
            Metric::F1 => "f1",
        }
    }
}

/// Confusion counts plus derived metrics; `None` marks a zero denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl EvalResult {
    pub fn from_counts(tp: u64, fp: u64, tn: u64, fn_: u64) -> Result<Self, MetricsError> {
        let total = tp + fp + tn + fn_;
        if total == 0 {
            return Err(MetricsError::EmptyInput);
        }
        let sensitivity = ratio(tp, tp + fn_);
        let precision = ratio(tp, tp + fp);
        let f1 = match (precision, sensitivity) {
            (Some(p), Some(s)) if p + s > 0.0 => Some(2.0 * p * s / (p + s)),
            _ => None,
        };
        Ok(Self {
            tp,
            fp,
            tn,
            fn_,
            accuracy: ratio(tp + tn, total),
            sensitivity,
            specificity: ratio(tn, tn + fp),
            precision,
            f1,
        })
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Accuracy => self.accuracy,
            Metric::Sensitivity => self.sensitivity,
            Metric::Specificity => self.specificity,
            Metric::Precision => self.precision,
            Metric::F1 => self.f1,
        }
    }

    /// Same table scored with `Abnormal` as the positive class.
    pub fn swapped(&self) -> Self {
        Self::from_counts(self.tn, self.fn_, self.tp, self.fp).expect("non-empty table")
    }
}

pub fn confusion(predictions: &[Label], gold: &[Label]) -> Result<EvalResult, MetricsError> {
    if predictions.len() != gold.len() {
        return Err(MetricsError::ShapeError(predictions.len(), gold.len()));
    }
    if predictions.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &g) in predictions.iter().zip(gold) {
        match (p, g) {
            (Label::Uncertain, _) | (_, Label::Uncertain) => return Err(MetricsError::InvalidLabel),
            (Label::Normal, Label::Normal) => tp += 1,
            (Label::Normal, Label::Abnormal) => fp += 1,
            (Label::Abnormal, Label::Abnormal) => tn += 1,
            (Label::Abnormal, Label::Normal) => fn_ += 1,
        }
    }
    EvalResult::from_counts(tp, fp, tn, fn_)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    /// Seeds for which the metric was defined.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub n_seeds: usize,
    pub accuracy: Option<MetricSummary>,
    pub sensitivity: Option<MetricSummary>,
    pub specificity: Option<MetricSummary>,
    pub precision: Option<MetricSummary>,
    pub f1: Option<MetricSummary>,
}

impl SeedSummary {
    pub fn get(&self, m: Metric) -> Option<MetricSummary> {
        match m {
            Metric::Accuracy => self.accuracy,
            Metric::Sensitivity => self.sensitivity,
            Metric::Specificity => self.specificity,
            Metric::Precision => self.precision,
            Metric::F1 => self.f1,
        }
    }
}

/// Mean and sample (n-1) standard deviation of `values`; std is 0 for n = 1.
pub fn mean_std(values: &[f64]) -> Option<MetricSummary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std =
        if n > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
    Some(MetricSummary { mean, std, n })
}

pub fn seed_summary(results: &[EvalResult]) -> Result<SeedSummary, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let summarize = |m: Metric| {
        let vals: Vec<f64> = results.iter().filter_map(|r| r.get(m)).collect();
        mean_std(&vals)
    };
    Ok(SeedSummary {
        n_seeds: results.len(),
        accuracy: summarize(Metric::Accuracy),
        sensitivity: summarize(Metric::Sensitivity),
        specificity: summarize(Metric::Specificity),
        precision: summarize(Metric::Precision),
        f1: summarize(Metric::F1),
    })
}

/// One scored run, identified the way result tables are laid out.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub model: String,
    pub experiment: String,
    pub distribution: String,
    pub eval_set: String,
    pub seed: u64,
    pub result: EvalResult,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// Writes per-seed rows followed by one summary row per metric for each
/// (model, experiment, distribution, eval_set) group, in first-seen order.
pub fn write_results_csv<W: Write>(mut w: W, rows: &[ResultRow]) -> std::io::Result<()> {
    writeln!(w, "model,experiment,distribution,eval_set,seed,metric,value,std,n,tp,fp,tn,fn")?;
    let mut groups: Vec<(&str, &str, &str, &str)> = Vec::new();
    for r in rows {
        let key = (r.model.as_str(), r.experiment.as_str(), r.distribution.as_str(), r.eval_set.as_str());
        if !groups.contains(&key) {
            groups.push(key);
        }
    }
    for key in groups {
        let members: Vec<&ResultRow> = rows
            .iter()
            .filter(|r| (r.model.as_str(), r.experiment.as_str(), r.distribution.as_str(), r.eval_set.as_str()) == key)
            .collect();
        for r in &members {
            let e = &r.result;
            for m in Metric::ALL {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},,1,{},{},{},{}",
                    key.0,
                    key.1,
                    key.2,
                    key.3,
                    r.seed,
                    m.name(),
                    fmt_opt(e.get(m)),
                    e.tp,
                    e.fp,
                    e.tn,
                    e.fn_
                )?;
            }
        }
        let results: Vec<EvalResult> = members.iter().map(|r| r.result).collect();
        let summary = seed_summary(&results).expect("group is non-empty");
        for m in Metric::ALL {
            let s = summary.get(m);
            writeln!(
                w,
                "{},{},{},{},summary,{},{},{},{},,,,",
                key.0,
                key.1,
                key.2,
                key.3,
                m.name(),
                fmt_opt(s.map(|s| s.mean)),
                fmt_opt(s.map(|s| s.std)),
                s.map_or(0, |s| s.n)
            )?;
        }
    }
    Ok(())
}
