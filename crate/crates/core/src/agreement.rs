//! Inter-model value agreement on the RT-consistent metrics.
//!
//! Every run of model A is compared with every run of model B over the
//! segments complete in both, giving a k x k grid of MAE (continuous) or
//! Cohen's kappa (binary, categorical). The grid is summarized by its median
//! and a trimmed mean; continuous medians are normalized by the value range.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::ReplicateMatrix;
use crate::model::{MetricValue, ValueKind};
use crate::reliability::IccKind;
use crate::thresholds::{
    classify_agreement_categorical, classify_agreement_continuous, AgreementClass, ThresholdConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StatKind {
    Mae,
    Kappa,
}

impl StatKind {
    pub fn for_kind(kind: ValueKind) -> Self {
        match kind {
            ValueKind::Continuous => StatKind::Mae,
            ValueKind::Binary | ValueKind::Categorical => StatKind::Kappa,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StatKind::Mae => "mae",
            StatKind::Kappa => "kappa",
        }
    }
}

/// Which values span the normalization range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RangePopulation {
    /// All valid values of both models, all runs.
    #[default]
    Pooled,
    ModelAOnly,
}

/// Mean absolute difference of two segment-paired sequences.
pub fn mae(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::InvalidInput("mae of empty sequences".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Cohen's kappa. `None` when the chance agreement is 1, which happens when
/// both labelings are the same constant.
pub fn cohens_kappa<T: Eq + Hash>(a: &[T], b: &[T]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::InvalidInput("kappa of empty labelings".into()));
    }
    let n = a.len() as u128;
    let mut margins: HashMap<&T, (u128, u128)> = HashMap::new();
    let mut agree = 0u128;
    for (x, y) in a.iter().zip(b) {
        margins.entry(x).or_default().0 += 1;
        margins.entry(y).or_default().1 += 1;
        agree += u128::from(x == y);
    }
    // p_o = agree/n, p_e = chance/n^2; kappa = (agree·n - chance) / (n^2 - chance)
    let chance: u128 = margins.values().map(|(ca, cb)| ca * cb).sum();
    let denom = n * n - chance;
    if denom == 0 {
        return Ok(None);
    }
    Ok(Some(((agree * n) as f64 - chance as f64) / denom as f64))
}

/// Statistic between every run of model A and every run of model B.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunPairGrid {
    pub model_a: String,
    pub model_b: String,
    pub metric_id: String,
    pub stat_kind: StatKind,
    pub runs_a: usize,
    pub runs_b: usize,
    /// Row-major over (run of A, run of B); `None` marks an undefined kappa.
    pub values: Vec<Option<f64>>,
    pub n_segments: usize,
}

impl RunPairGrid {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i * self.runs_b + j]
    }

    pub fn n_undefined(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }
}

type RowPair<'a> = (&'a [Option<MetricValue>], &'a [Option<MetricValue>]);

/// Segments complete in both matrices, in model A's segment order.
fn shared_complete_rows<'a>(a: &'a ReplicateMatrix, b: &'a ReplicateMatrix) -> Vec<RowPair<'a>> {
    let b_rows = b.complete_rows();
    (0..a.n_segments())
        .filter(|&s| a.is_complete(s))
        .filter_map(|s| b_rows.get(a.segment_ids[s].as_str()).map(|rb| (a.row(s), *rb)))
        .collect()
}

pub fn run_pair_grid(a: &ReplicateMatrix, b: &ReplicateMatrix, min_segments: usize) -> Result<RunPairGrid> {
    if a.metric_id != b.metric_id {
        return Err(Error::InvalidInput(format!(
            "run-pair grid across metrics {} and {}",
            a.metric_id, b.metric_id
        )));
    }
    if a.kind != b.kind {
        return Err(Error::Type(format!("metric {} has mismatched kinds", a.metric_id)));
    }
    let rows = shared_complete_rows(a, b);
    let required = min_segments.max(1);
    if rows.len() < required {
        return Err(Error::InsufficientData { required, found: rows.len() });
    }
    let stat_kind = StatKind::for_kind(a.kind);
    let column = |side: usize, run: usize| -> Vec<&MetricValue> {
        rows.iter()
            .map(|r| if side == 0 { r.0[run].as_ref() } else { r.1[run].as_ref() })
            .map(|v| v.expect("complete row"))
            .collect()
    };
    let mut values = Vec::with_capacity(a.k() * b.k());
    for i in 0..a.k() {
        let ca = column(0, i);
        for j in 0..b.k() {
            let cb = column(1, j);
            let entry = match stat_kind {
                StatKind::Mae => {
                    let xa: Vec<f64> = ca.iter().filter_map(|v| v.as_number()).collect();
                    let xb: Vec<f64> = cb.iter().filter_map(|v| v.as_number()).collect();
                    Some(mae(&xa, &xb)?)
                }
                StatKind::Kappa => {
                    let la: Vec<&str> = ca.iter().filter_map(|v| v.as_label()).collect();
                    let lb: Vec<&str> = cb.iter().filter_map(|v| v.as_label()).collect();
                    cohens_kappa(&la, &lb)?
                }
            };
            values.push(entry);
        }
    }
    Ok(RunPairGrid {
        model_a: a.model_id.clone(),
        model_b: b.model_id.clone(),
        metric_id: a.metric_id.clone(),
        stat_kind,
        runs_a: a.k(),
        runs_b: b.k(),
        values,
        n_segments: rows.len(),
    })
}

/// Median; an even count takes the mean of the two central values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 0 { (v[mid - 1] + v[mid]) / 2.0 } else { v[mid] })
}

/// Mean after dropping `trim` values from each tail. The trim is capped so
/// at least one value remains.
pub fn trimmed_mean(values: &[f64], trim: usize) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let t = trim.min((v.len() - 1) / 2);
    let kept = &v[t..v.len() - t];
    if kept[0] == kept[kept.len() - 1] {
        return Some(kept[0]);
    }
    Some(kept.iter().sum::<f64>() / kept.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridSummary {
    pub median: f64,
    pub trimmed_mean: f64,
    pub n_used: usize,
    pub n_undefined: usize,
}

/// Summary of the defined entries, or `None` (incomparable) when more than
/// half of the entries are undefined.
pub fn aggregate_grid(grid: &RunPairGrid, trim_count: usize) -> Option<GridSummary> {
    aggregate_entries(&grid.values, trim_count)
}

pub fn aggregate_entries(entries: &[Option<f64>], trim_count: usize) -> Option<GridSummary> {
    let defined: Vec<f64> = entries.iter().flatten().copied().collect();
    let n_undefined = entries.len() - defined.len();
    if defined.is_empty() || 2 * n_undefined > entries.len() {
        return None;
    }
    Some(GridSummary {
        median: median(&defined)?,
        trimmed_mean: trimmed_mean(&defined, trim_count)?,
        n_used: defined.len(),
        n_undefined,
    })
}

/// Median MAE over the range of `pooled`.
pub fn nmae_range(median_mae: f64, pooled: &[f64]) -> Result<f64> {
    let (lo, hi) = pooled
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if pooled.is_empty() {
        return Err(Error::InvalidInput("empty range population".into()));
    }
    let range = hi - lo;
    if range <= 0.0 {
        return Err(Error::DegenerateRange(range));
    }
    Ok(median_mae / range)
}

/// Labels of the three model pairs: A = (0,1), B = (0,2), C = (1,2).
pub const PAIR_LABELS: [&str; 3] = ["A", "B", "C"];

pub fn model_pairs(models: &[String]) -> Result<Vec<(&'static str, usize, usize)>> {
    if models.len() != 3 {
        return Err(Error::Config(format!(
            "inter-model agreement is defined over exactly 3 models, got {}",
            models.len()
        )));
    }
    Ok(vec![("A", 0, 1), ("B", 0, 2), ("C", 1, 2)])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementResult {
    pub track: IccKind,
    pub pair_label: String,
    pub model_a: String,
    pub model_b: String,
    pub metric_id: String,
    pub stat_kind: StatKind,
    pub median: Option<f64>,
    pub trimmed_mean: Option<f64>,
    pub range: Option<f64>,
    pub nmae: Option<f64>,
    pub n_entries: usize,
    pub n_undefined: usize,
    /// `None` when the pair is incomparable.
    pub agreement_class: Option<AgreementClass>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AgreementSettings {
    pub range_population: RangePopulation,
}

impl Default for AgreementSettings {
    fn default() -> Self {
        AgreementSettings { range_population: RangePopulation::Pooled }
    }
}

/// Agreement for one metric and one model pair.
pub fn assess_pair(
    a: &ReplicateMatrix,
    b: &ReplicateMatrix,
    track: IccKind,
    pair_label: &str,
    cfg: &ThresholdConfig,
    settings: &AgreementSettings,
) -> Result<AgreementResult> {
    let grid = run_pair_grid(a, b, cfg.min_segments)?;
    let summary = aggregate_grid(&grid, cfg.trim_count);
    let mut result = AgreementResult {
        track,
        pair_label: pair_label.to_string(),
        model_a: a.model_id.clone(),
        model_b: b.model_id.clone(),
        metric_id: a.metric_id.clone(),
        stat_kind: grid.stat_kind,
        median: summary.map(|s| s.median),
        trimmed_mean: summary.map(|s| s.trimmed_mean),
        range: None,
        nmae: None,
        n_entries: grid.values.len(),
        n_undefined: grid.n_undefined(),
        agreement_class: None,
    };
    let Some(summary) = summary else {
        return Ok(result);
    };
    match grid.stat_kind {
        StatKind::Mae => {
            let numbers = |m: &ReplicateMatrix| m.valid_values().filter_map(MetricValue::as_number).collect::<Vec<_>>();
            let mut pooled = numbers(a);
            if settings.range_population == RangePopulation::Pooled {
                pooled.extend(numbers(b));
            }
            let nmae = nmae_range(summary.median, &pooled)?;
            let (lo, hi) = pooled
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
            result.range = Some(hi - lo);
            result.nmae = Some(nmae);
            result.agreement_class = Some(classify_agreement_continuous(nmae, cfg)?);
        }
        StatKind::Kappa => {
            result.agreement_class = Some(classify_agreement_categorical(summary.median, cfg)?);
        }
    }
    Ok(result)
}

/// Row of the cross-pair rollup; `class: None` is the incomparable row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RollupRow {
    pub class: Option<AgreementClass>,
    pub per_pair: [usize; 3],
    pub a3p: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementRollup {
    pub track: IccKind,
    pub rows: Vec<RollupRow>,
    pub n_metrics: usize,
}

impl AgreementRollup {
    pub fn incomparable(&self) -> Option<&RollupRow> {
        self.rows.iter().find(|r| r.class.is_none())
    }

    pub fn row(&self, class: AgreementClass) -> &RollupRow {
        self.rows.iter().find(|r| r.class == Some(class)).expect("all classes present")
    }
}

/// Counts per class and pair, plus the number of metrics whose class is the
/// same across all three pairs. Results must belong to one track.
pub fn a3p_rollup(track: IccKind, results: &[AgreementResult]) -> Result<AgreementRollup> {
    let mut by_metric: HashMap<&str, [Option<Option<AgreementClass>>; 3]> = HashMap::new();
    for r in results.iter().filter(|r| r.track == track) {
        let pos = PAIR_LABELS
            .iter()
            .position(|&l| l == r.pair_label)
            .ok_or_else(|| Error::InvalidInput(format!("unknown pair label {}", r.pair_label)))?;
        let slot = &mut by_metric.entry(&r.metric_id).or_default()[pos];
        if slot.replace(r.agreement_class).is_some() {
            return Err(Error::InvalidInput(format!("duplicate pair {} for {}", r.pair_label, r.metric_id)));
        }
    }
    let mut rows: Vec<RollupRow> = AgreementClass::DESCENDING
        .iter()
        .map(|&c| Some(c))
        .chain(std::iter::once(None))
        .map(|class| RollupRow { class, per_pair: [0; 3], a3p: 0 })
        .collect();
    let row_of = |class: Option<AgreementClass>| match class {
        Some(c) => AgreementClass::DESCENDING.iter().position(|&d| d == c).expect("listed"),
        None => 4,
    };
    for (metric, pairs) in &by_metric {
        let mut classes = [None; 3];
        for (p, slot) in pairs.iter().enumerate() {
            let class = slot.ok_or_else(|| {
                Error::InvalidInput(format!("metric {metric} lacks pair {}", PAIR_LABELS[p]))
            })?;
            rows[row_of(class)].per_pair[p] += 1;
            classes[p] = class;
        }
        if let Some(c) = classes[0] {
            if classes.iter().all(|&x| x == Some(c)) {
                rows[row_of(Some(c))].a3p += 1;
            }
        }
    }
    Ok(AgreementRollup { track, rows, n_metrics: by_metric.len() })
}

/// The single-inference and aggregated eligibility sets, sorted.
pub fn study3_eligibility(rt_single: &[String], rt_average: &[String]) -> (Vec<String>, Vec<String>) {
    let sorted = |s: &[String]| {
        let mut v = s.to_vec();
        v.sort();
        v.dedup();
        v
    };
    (sorted(rt_single), sorted(rt_average))
}

/// Every result must belong to its track's eligibility set.
pub fn check_eligibility(results: &[AgreementResult], single: &[String], average: &[String]) -> Result<()> {
    let s: HashSet<&str> = single.iter().map(String::as_str).collect();
    let a: HashSet<&str> = average.iter().map(String::as_str).collect();
    for r in results {
        let set = if r.track == IccKind::Single { &s } else { &a };
        if !set.contains(r.metric_id.as_str()) {
            return Err(Error::Invariant(format!(
                "metric {} compared on the {} track without being eligible",
                r.metric_id,
                r.track.as_str()
            )));
        }
    }
    Ok(())
}
