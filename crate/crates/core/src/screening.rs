//! Low-variance screening: features whose dominant value covers at least
//! `prevalence_cutoff` of the emitted cells are excluded before ICC.

use std::collections::HashMap;

use serde::Serialize;

use crate::ingest::ReplicateMatrix;
use crate::model::MetricValue;
use crate::thresholds::ThresholdConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScreenOutcome {
    Kept,
    ScreenedLowVariance,
    ScreenedInsufficientN,
    NotCalculated,
}

impl ScreenOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            ScreenOutcome::Kept => "kept",
            ScreenOutcome::ScreenedLowVariance => "screened_low_variance",
            ScreenOutcome::ScreenedInsufficientN => "screened_insufficient_n",
            ScreenOutcome::NotCalculated => "not_calculated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScreenDecision {
    pub model_id: String,
    pub metric_id: String,
    /// `None` when there are no valid cells.
    pub prevalence: Option<f64>,
    pub n_complete_segments: usize,
    pub decision: ScreenOutcome,
}

#[derive(Hash, PartialEq, Eq)]
enum Category<'a> {
    Number(u64),
    Label(&'a str),
}

fn category(value: &MetricValue) -> Category<'_> {
    match value {
        // +0.0 and -0.0 are the same emitted number
        MetricValue::Continuous(x) => Category::Number(if *x == 0.0 { 0 } else { x.to_bits() }),
        MetricValue::Binary(l) | MetricValue::Categorical(l) => Category::Label(l),
    }
}

fn prevalence_of<'a>(values: impl Iterator<Item = &'a MetricValue>) -> Option<f64> {
    let mut counts: HashMap<Category<'a>, usize> = HashMap::new();
    let mut total = 0usize;
    for v in values {
        *counts.entry(category(v)).or_default() += 1;
        total += 1;
    }
    let top = counts.values().copied().max()?;
    Some(top as f64 / total as f64)
}

/// Share of valid cells equal to the most frequent value. Continuous metrics
/// use exact equality. `None` when the matrix has no valid cells.
pub fn dominant_category_prevalence(matrix: &ReplicateMatrix) -> Option<f64> {
    prevalence_of(matrix.valid_values())
}

/// Prevalence pooled over several models' matrices for the same metric.
pub fn pooled_prevalence(matrices: &[&ReplicateMatrix]) -> Option<f64> {
    prevalence_of(matrices.iter().flat_map(|m| m.valid_values()))
}

pub fn screen_metric(matrix: &ReplicateMatrix, cfg: &ThresholdConfig) -> ScreenDecision {
    let prevalence = dominant_category_prevalence(matrix);
    let n_complete_segments = matrix.n_complete();
    let decision = match prevalence {
        None => ScreenOutcome::NotCalculated,
        Some(_) if n_complete_segments < cfg.min_segments => ScreenOutcome::ScreenedInsufficientN,
        Some(p) if p >= cfg.prevalence_cutoff => ScreenOutcome::ScreenedLowVariance,
        Some(_) => ScreenOutcome::Kept,
    };
    ScreenDecision {
        model_id: matrix.model_id.clone(),
        metric_id: matrix.metric_id.clone(),
        prevalence,
        n_complete_segments,
        decision,
    }
}
