//! Bag-level evaluation and cross-validation summaries.

use serde::{Deserialize, Serialize};

use crate::data::Bag;
use crate::models::{predict, ModelParams};
use crate::{Error, Result};

/// Decision threshold on the bag probability.
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub accuracy: f64,
    /// `None` when the evaluation set holds a single class.
    pub auc: Option<f64>,
    pub f1: f64,
    pub n_eval: usize,
}

/// Mann-Whitney AUC; tied pairs count one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Midranks over tie groups.
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

pub fn metrics_from_scores(scores: &[f64], labels: &[u8]) -> Result<RunMetrics> {
    if scores.is_empty() {
        return Err(Error::argument("no bags to evaluate"));
    }
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            op: "metrics",
            left: (1, scores.len()),
            right: (1, labels.len()),
        });
    }
    let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        let pred = s >= THRESHOLD;
        match (pred, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
        if pred == (l == 1) {
            correct += 1;
        }
    }
    let f1 = if tp == 0 {
        if fp == 0 && fn_ == 0 {
            log::warn!("no positive bags predicted or present; F1 set to 0");
        }
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    let auc = auc(scores, labels);
    if auc.is_none() {
        log::warn!("evaluation set has a single class; AUC omitted");
    }
    Ok(RunMetrics {
        accuracy: correct as f64 / scores.len() as f64,
        auc,
        f1,
        n_eval: scores.len(),
    })
}

/// Eval-mode bag probabilities.
pub fn predict_all(params: &ModelParams, bags: &[Bag]) -> Result<Vec<f64>> {
    bags.iter().map(|b| predict(&b.instances, params)).collect()
}

pub fn evaluate(params: &ModelParams, bags: &[Bag]) -> Result<RunMetrics> {
    let scores = predict_all(params, bags)?;
    let labels: Vec<u8> = bags.iter().map(|b| b.label).collect();
    metrics_from_scores(&scores, &labels)
}

/// Spread reported next to each mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdConvention {
    /// Sample standard deviation across folds.
    #[default]
    Sample,
    /// Sample standard deviation divided by sqrt(n).
    StandardError,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

/// Mean and spread; a single value has spread 0.
pub fn summarize(values: &[f64], convention: StdConvention) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut mean = values.iter().sum::<f64>() / n;
    // Second pass removes the rounding error of the first.
    mean += values.iter().map(|v| v - mean).sum::<f64>() / n;
    let mean = mean.clamp(min, max);
    let std = if values.len() < 2 || min == max {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        match convention {
            StdConvention::Sample => var.sqrt(),
            StdConvention::StandardError => (var / n).sqrt(),
        }
    };
    Some(Summary {
        mean,
        std,
        min,
        max,
        n: values.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub accuracy: Summary,
    /// Over the folds that have an AUC.
    pub auc: Option<Summary>,
    pub f1: Summary,
    pub std_convention: StdConvention,
}

pub fn aggregate(folds: &[RunMetrics], convention: StdConvention) -> Result<Aggregate> {
    if folds.len() < 2 {
        return Err(Error::argument(format!("need at least 2 folds, got {}", folds.len())));
    }
    let acc: Vec<f64> = folds.iter().map(|m| m.accuracy).collect();
    let auc: Vec<f64> = folds.iter().filter_map(|m| m.auc).collect();
    let f1: Vec<f64> = folds.iter().map(|m| m.f1).collect();
    Ok(Aggregate {
        accuracy: summarize(&acc, convention).expect("non-empty"),
        auc: summarize(&auc, convention),
        f1: summarize(&f1, convention).expect("non-empty"),
        std_convention: convention,
    })
}

/// One held-out evaluation inside a cross-validation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub repeat: usize,
    pub fold: usize,
    pub init_seed: u64,
    pub train_seed: u64,
    pub n_train: usize,
    pub metrics: RunMetrics,
}

/// What was run, for the report header and the CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub dataset: String,
    pub model: String,
    pub mechanism: String,
    pub k: Option<usize>,
    pub g: Option<usize>,
    pub seed: u64,
    pub repeats: usize,
    pub folds: usize,
    pub standardized: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CVReport {
    pub meta: ReportMeta,
    pub fold_results: Vec<FoldRecord>,
    pub summary: Aggregate,
}

pub const CSV_HEADER: &str = "dataset,model,mechanism,K,G,acc_mean,acc_std,auc_mean,auc_std,f1_mean,f1_std";

fn opt_usize(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl CVReport {
    pub fn new(meta: ReportMeta, fold_results: Vec<FoldRecord>, convention: StdConvention) -> Result<Self> {
        let metrics: Vec<RunMetrics> = fold_results.iter().map(|f| f.metrics).collect();
        let summary = aggregate(&metrics, convention)?;
        Ok(Self {
            meta,
            fold_results,
            summary,
        })
    }

    /// One row under [`CSV_HEADER`].
    pub fn csv_row(&self) -> String {
        let s = &self.summary;
        let (auc_mean, auc_std) = s
            .auc
            .map(|a| (format!("{:.6}", a.mean), format!("{:.6}", a.std)))
            .unwrap_or_default();
        format!(
            "{},{},{},{},{},{:.6},{:.6},{},{},{:.6},{:.6}",
            csv_field(&self.meta.dataset),
            csv_field(&self.meta.model),
            csv_field(&self.meta.mechanism),
            opt_usize(self.meta.k),
            opt_usize(self.meta.g),
            s.accuracy.mean,
            s.accuracy.std,
            auc_mean,
            auc_std,
            s.f1.mean,
            s.f1.std
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }
}
