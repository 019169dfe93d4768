//! Cross-model class consistency: concordant model pairs per metric,
//! class-correspondence matrices and the RT-consistent metric set.
//!
//! Classes are compared on the interpretation scale, where perfect counts as
//! excellent. Under strict equality three classes can only yield 0, 1 or 3
//! concordant pairs.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::MetricClass;
use crate::reliability::{IccKind, ReliabilityResult};
use crate::thresholds::ReliabilityClass;

/// Printed alongside every consistency distribution built under strict equality.
pub const UNREACHABLE_TWO_OF_THREE: &str =
    "with three models and strict class equality, exactly 2 concordant pairs is unreachable: \
     two equal pairs force the third; any nonzero \"2 of 3\" count requires a looser rule";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConcordanceRule {
    #[default]
    Strict,
    /// Classes one step apart also count as concordant.
    AdjacentClass,
}

impl ConcordanceRule {
    pub fn from_flag(adjacent_class_tolerance: bool) -> Self {
        if adjacent_class_tolerance {
            ConcordanceRule::AdjacentClass
        } else {
            ConcordanceRule::Strict
        }
    }

    pub fn concordant(self, a: ReliabilityClass, b: ReliabilityClass) -> bool {
        let (ra, rb) = (a.interpretation_rank(), b.interpretation_rank());
        match self {
            ConcordanceRule::Strict => ra == rb,
            ConcordanceRule::AdjacentClass => ra.abs_diff(rb) <= 1,
        }
    }
}

/// Number of concordant unordered model pairs. Missing classes never concord.
pub fn concordant_pairs(classes: &[Option<ReliabilityClass>], rule: ConcordanceRule) -> usize {
    let mut n = 0;
    for (i, a) in classes.iter().enumerate() {
        for b in &classes[i + 1..] {
            if let (Some(a), Some(b)) = (a, b) {
                n += usize::from(rule.concordant(*a, *b));
            }
        }
    }
    n
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyRecord {
    pub metric_id: String,
    pub metric_class: MetricClass,
    /// One entry per model, in [`ConsistencyTable::models`] order.
    pub classes: Vec<Option<ReliabilityClass>>,
    pub concordant_pairs: usize,
    pub which: IccKind,
}

impl ConsistencyRecord {
    pub fn is_fully_calculated(&self) -> bool {
        self.classes.iter().all(Option::is_some)
    }

    pub fn is_excellent_everywhere(&self) -> bool {
        self.classes.iter().all(|c| c.is_some_and(ReliabilityClass::is_excellent_or_better))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyTable {
    pub which: IccKind,
    pub rule: ConcordanceRule,
    pub models: Vec<String>,
    /// Sorted by metric class, then metric id.
    pub records: Vec<ConsistencyRecord>,
}

impl ConsistencyTable {
    pub fn n_pairs(&self) -> usize {
        self.models.len() * (self.models.len() - 1) / 2
    }

    /// Metrics lacking a class in at least one model.
    pub fn incomparable(&self) -> impl Iterator<Item = &ConsistencyRecord> {
        self.records.iter().filter(|r| !r.is_fully_calculated())
    }

    pub fn model_index(&self, model_id: &str) -> Option<usize> {
        self.models.iter().position(|m| m == model_id)
    }
}

/// One record per metric in `universe` plus any metric that has results.
/// `universe` pairs each metric id with its class and fixes the metric set.
pub fn build_consistency_records(
    models: &[String],
    results: &[ReliabilityResult],
    universe: &[(String, MetricClass)],
    which: IccKind,
    rule: ConcordanceRule,
) -> Result<ConsistencyTable> {
    if models.len() < 2 {
        return Err(Error::Config(format!(
            "class consistency needs at least 2 models, got {}",
            models.len()
        )));
    }
    let model_pos: HashMap<&str, usize> =
        models.iter().enumerate().map(|(i, m)| (m.as_str(), i)).collect();
    let mut by_metric: HashMap<&str, (MetricClass, Vec<Option<ReliabilityClass>>)> = universe
        .iter()
        .map(|(id, class)| (id.as_str(), (*class, vec![None; models.len()])))
        .collect();
    for r in results {
        let Some(&pos) = model_pos.get(r.model_id.as_str()) else {
            return Err(Error::InvalidInput(format!("result for unknown model {}", r.model_id)));
        };
        let entry = by_metric
            .entry(r.metric_id.as_str())
            .or_insert_with(|| (r.metric_class, vec![None; models.len()]));
        if entry.1[pos].replace(r.class(which)).is_some() {
            return Err(Error::InvalidInput(format!(
                "duplicate result for model {} metric {}",
                r.model_id, r.metric_id
            )));
        }
    }
    let mut records: Vec<ConsistencyRecord> = by_metric
        .into_iter()
        .map(|(id, (metric_class, classes))| ConsistencyRecord {
            metric_id: id.to_string(),
            metric_class,
            concordant_pairs: concordant_pairs(&classes, rule),
            classes,
            which,
        })
        .collect();
    records.sort_by(|a, b| (a.metric_class, &a.metric_id).cmp(&(b.metric_class, &b.metric_id)));
    Ok(ConsistencyTable { which, rule, models: models.to_vec(), records })
}

/// Metrics excellent or perfect in every model, for any model count.
pub fn consistently_excellent(table: &ConsistencyTable) -> Vec<String> {
    table
        .records
        .iter()
        .filter(|r| r.is_excellent_everywhere())
        .map(|r| r.metric_id.clone())
        .collect()
}

/// The RT-consistent set that gates Study 3. Requires exactly three models.
pub fn rt_consistent_metrics(table: &ConsistencyTable) -> Result<Vec<String>> {
    if table.models.len() != 3 {
        return Err(Error::Config(format!(
            "RT-consistency is defined over exactly 3 models, got {}",
            table.models.len()
        )));
    }
    let set = consistently_excellent(table);
    for id in &set {
        let rec = table.records.iter().find(|r| &r.metric_id == id).expect("record exists");
        if rec.concordant_pairs != 3 {
            return Err(Error::Invariant(format!(
                "RT-consistent metric {id} has {} concordant pairs",
                rec.concordant_pairs
            )));
        }
    }
    Ok(set)
}

/// Row of a per-model distribution: that model's class (or not calculated)
/// against the number of concordant pairs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionRow {
    /// `None` is the not-calculated row.
    pub class: Option<ReliabilityClass>,
    /// Index = number of concordant pairs.
    pub counts: Vec<usize>,
}

impl DistributionRow {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyDistribution {
    pub model_id: String,
    pub which: IccKind,
    pub rule: ConcordanceRule,
    pub rows: Vec<DistributionRow>,
}

impl ConsistencyDistribution {
    pub fn column_totals(&self) -> Vec<usize> {
        let width = self.rows.first().map_or(0, |r| r.counts.len());
        (0..width).map(|j| self.rows.iter().map(|r| r.counts[j]).sum()).collect()
    }

    pub fn total(&self) -> usize {
        self.rows.iter().map(DistributionRow::total).sum()
    }

    /// True when a strict three-model table shows the impossible column.
    pub fn has_unreachable_counts(&self) -> bool {
        self.rule == ConcordanceRule::Strict && self.column_totals().get(2).is_some_and(|&n| n > 0)
    }
}

/// Distribution from the perspective of `model_id`: rows are that model's
/// interpretation classes (perfect folded into excellent) plus a
/// not-calculated row.
pub fn consistency_distribution(table: &ConsistencyTable, model_id: &str) -> Result<ConsistencyDistribution> {
    let pos = table
        .model_index(model_id)
        .ok_or_else(|| Error::InvalidInput(format!("unknown model {model_id}")))?;
    let width = table.n_pairs() + 1;
    let mut rows: Vec<DistributionRow> = ReliabilityClass::INTERPRETATION_DESCENDING
        .iter()
        .map(|&c| DistributionRow { class: Some(c), counts: vec![0; width] })
        .chain(std::iter::once(DistributionRow { class: None, counts: vec![0; width] }))
        .collect();
    for rec in &table.records {
        let row = match rec.classes[pos] {
            Some(c) => 3 - c.interpretation_rank() as usize,
            None => rows.len() - 1,
        };
        rows[row].counts[rec.concordant_pairs] += 1;
    }
    Ok(ConsistencyDistribution {
        model_id: model_id.to_string(),
        which: table.which,
        rule: table.rule,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CellMetric {
    pub metric_id: String,
    pub metric_class: MetricClass,
}

/// Class-by-class counts for one model pair. Indices follow
/// [`ReliabilityClass::DESCENDING`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrespondenceMatrix {
    pub model_a: String,
    pub model_b: String,
    pub which: IccKind,
    pub counts: [[usize; 5]; 5],
    pub cells: Vec<Vec<Vec<CellMetric>>>,
}

fn descending_index(c: ReliabilityClass) -> usize {
    ReliabilityClass::DESCENDING.iter().position(|&d| d == c).expect("class listed")
}

impl CorrespondenceMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn diagonal(&self) -> usize {
        (0..5).map(|i| self.counts[i][i]).sum()
    }

    pub fn count(&self, a: ReliabilityClass, b: ReliabilityClass) -> usize {
        self.counts[descending_index(a)][descending_index(b)]
    }

    /// Metrics concordant under `rule`; on the strict rule this is the
    /// diagonal plus the perfect/excellent cross cells.
    pub fn concordant_count(&self, rule: ConcordanceRule) -> usize {
        let mut n = 0;
        for (i, &a) in ReliabilityClass::DESCENDING.iter().enumerate() {
            for (j, &b) in ReliabilityClass::DESCENDING.iter().enumerate() {
                if rule.concordant(a, b) {
                    n += self.counts[i][j];
                }
            }
        }
        n
    }
}

/// Tabulates metrics calculated in both models.
pub fn correspondence_matrix(
    results_a: &[ReliabilityResult],
    results_b: &[ReliabilityResult],
    which: IccKind,
) -> Result<CorrespondenceMatrix> {
    let single_model = |rs: &[ReliabilityResult]| -> Result<String> {
        let id = rs.first().map(|r| r.model_id.clone()).unwrap_or_default();
        if rs.iter().any(|r| r.model_id != id) {
            return Err(Error::InvalidInput("mixed models in one side of a correspondence".into()));
        }
        Ok(id)
    };
    let model_a = single_model(results_a)?;
    let model_b = single_model(results_b)?;
    let b_by_metric: HashMap<&str, &ReliabilityResult> =
        results_b.iter().map(|r| (r.metric_id.as_str(), r)).collect();
    let mut counts = [[0usize; 5]; 5];
    let mut cells = vec![vec![Vec::new(); 5]; 5];
    let mut shared: Vec<(&ReliabilityResult, &ReliabilityResult)> = results_a
        .iter()
        .filter_map(|a| b_by_metric.get(a.metric_id.as_str()).map(|b| (a, *b)))
        .collect();
    shared.sort_by(|x, y| (x.0.metric_class, &x.0.metric_id).cmp(&(y.0.metric_class, &y.0.metric_id)));
    for (a, b) in shared {
        let (i, j) = (descending_index(a.class(which)), descending_index(b.class(which)));
        counts[i][j] += 1;
        cells[i][j].push(CellMetric { metric_id: a.metric_id.clone(), metric_class: a.metric_class });
    }
    Ok(CorrespondenceMatrix { model_a, model_b, which, counts, cells })
}
