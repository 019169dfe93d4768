//! Tabular outputs and their CSV, JSON and Markdown renderings.
//!
//! Numbers are kept at full precision inside a [`Table`] and rounded only
//! when rendered (round-half-even on the binary value).

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::agreement::{AgreementResult, AgreementRollup, PAIR_LABELS};
use crate::consistency::{ConsistencyDistribution, ConsistencyTable, CorrespondenceMatrix};
use crate::error::{Error, Result};
use crate::ingest::ExclusionReport;
use crate::model::{MetricClass, Registry};
use crate::reliability::{ClassSummaryTable, IccKind, ReliabilityResult};
use crate::screening::ScreenDecision;
use crate::thresholds::{AgreementClass, ReliabilityClass};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Text(String),
    Int(i64),
    Float(f64),
    Empty,
}

impl Cell {
    pub fn text(s: impl Into<String>) -> Self {
        Cell::Text(s.into())
    }

    pub fn count(n: usize) -> Self {
        Cell::Int(n as i64)
    }

    pub fn opt_float(x: Option<f64>) -> Self {
        x.map_or(Cell::Empty, Cell::Float)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    /// File stem.
    pub name: String,
    pub caption: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    pub notes: Vec<String>,
}

impl Table {
    pub fn new(name: impl Into<String>, caption: impl Into<String>, columns: Vec<String>) -> Self {
        Table { name: name.into(), caption: caption.into(), columns, rows: Vec::new(), notes: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len(), "row width in {}", self.name);
        self.rows.push(row);
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// First row whose first cell is the given text.
    pub fn row_by_label(&self, label: &str) -> Option<&[Cell]> {
        self.rows
            .iter()
            .find(|r| matches!(r.first(), Some(Cell::Text(t)) if t == label))
            .map(Vec::as_slice)
    }

    pub fn well_formed(&self) -> Result<()> {
        if let Some((i, _)) = self.rows.iter().enumerate().find(|(_, r)| r.len() != self.columns.len()) {
            return Err(Error::Invariant(format!("table {} row {i} has the wrong width", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
    Markdown,
}

impl OutputFormat {
    pub fn extension(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
            OutputFormat::Markdown => "md",
        }
    }
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            "markdown" | "md" => Ok(OutputFormat::Markdown),
            other => Err(Error::Config(format!("unsupported output format {other:?}"))),
        }
    }
}

/// Fixed-precision decimal; never renders a negative zero.
pub fn format_float(x: f64, precision: usize) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let s = format!("{x:.precision$}");
    match s.strip_prefix('-') {
        Some(rest) if rest.bytes().all(|b| b == b'0' || b == b'.') => rest.to_string(),
        _ => s,
    }
}

fn cell_text(cell: &Cell, precision: usize) -> String {
    match cell {
        Cell::Text(t) => t.clone(),
        Cell::Int(n) => n.to_string(),
        Cell::Float(x) => format_float(*x, precision),
        Cell::Empty => String::new(),
    }
}

fn cell_json(cell: &Cell, precision: usize) -> Value {
    match cell {
        Cell::Text(t) => Value::String(t.clone()),
        Cell::Int(n) => json!(n),
        Cell::Float(x) => format_float(*x, precision)
            .parse::<f64>()
            .ok()
            .and_then(serde_json::Number::from_f64)
            .map_or(Value::Null, Value::Number),
        Cell::Empty => Value::Null,
    }
}

fn markdown_escape(s: &str) -> String {
    s.replace('|', "\\|")
}

pub fn render_table(table: &Table, format: OutputFormat, precision: usize) -> Result<String> {
    table.well_formed()?;
    match format {
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let csv_err = |e: csv::Error| Error::Invariant(format!("csv rendering: {e}"));
            w.write_record(&table.columns).map_err(csv_err)?;
            for row in &table.rows {
                w.write_record(row.iter().map(|c| cell_text(c, precision))).map_err(csv_err)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Invariant(format!("csv rendering: {e}")))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        OutputFormat::Json => {
            let rows: Vec<Value> = table
                .rows
                .iter()
                .map(|r| Value::Array(r.iter().map(|c| cell_json(c, precision)).collect()))
                .collect();
            let doc = json!({
                "name": table.name,
                "caption": table.caption,
                "columns": table.columns,
                "rows": rows,
                "notes": table.notes,
            });
            Ok(serde_json::to_string_pretty(&doc).expect("json renders") + "\n")
        }
        OutputFormat::Markdown => {
            let mut out = String::new();
            if !table.caption.is_empty() {
                let _ = writeln!(out, "**{}**\n", table.caption);
            }
            let _ = writeln!(out, "| {} |", table.columns.iter().map(|c| markdown_escape(c)).collect::<Vec<_>>().join(" | "));
            let _ = writeln!(out, "|{}|", vec!["---"; table.columns.len()].join("|"));
            for row in &table.rows {
                let cells: Vec<String> = row.iter().map(|c| markdown_escape(&cell_text(c, precision))).collect();
                let _ = writeln!(out, "| {} |", cells.join(" | "));
            }
            for note in &table.notes {
                let _ = writeln!(out, "\n> {note}");
            }
            Ok(out)
        }
    }
}

/// Whole-percent share, rounded half-to-even.
pub fn whole_percent(count: usize, total: usize) -> String {
    if total == 0 {
        return String::new();
    }
    format!("{:.0}", count as f64 * 100.0 / total as f64)
}

fn class_text(c: Option<ReliabilityClass>) -> Cell {
    c.map_or_else(|| Cell::text("not_calculated"), |c| Cell::text(c.as_str()))
}

/// Per metric-class summary for one model and ICC kind.
pub fn study1_summary_table(summary: &ClassSummaryTable) -> Table {
    let model = summary.model_id.clone().unwrap_or_default();
    let caption = format!(
        "{model} reliability by metric class for {}: min, max, mean ICC and counts of excellence and good metrics. \
         Total number of calculated metrics N={} ({} were not calculated)",
        summary.which.label(),
        summary.n_calculated,
        summary.n_not_calculated
    );
    let columns = ["metric class (N)", "min", "max", "mean", "excellence n", "good n"];
    let mut t = Table::new(
        format!("study1_{}_{}", file_stem(&model), summary.which.as_str()),
        caption,
        columns.iter().map(|c| c.to_string()).collect(),
    );
    for row in &summary.rows {
        t.push(vec![
            Cell::text(format!("{} ({})", row.metric_class.as_str(), row.n)),
            Cell::opt_float(row.min),
            Cell::opt_float(row.max),
            Cell::opt_float(row.mean),
            Cell::count(row.excellence_n),
            Cell::count(row.good_n),
        ]);
    }
    t
}

/// Every computed ICC with its ANOVA components.
pub fn study1_results_table(results: &[ReliabilityResult]) -> Table {
    let columns = [
        "model_id", "metric_id", "metric_class", "n_segments", "k", "ms_between", "ms_within", "ms_residual",
        "ms_runs", "icc31", "icc3k", "class31", "class3k", "mode",
    ];
    let mut t = Table::new("study1_results", "ICC results per model and metric", columns.iter().map(|c| c.to_string()).collect());
    for r in results {
        let ms = &r.mean_squares;
        t.push(vec![
            Cell::text(&r.model_id),
            Cell::text(&r.metric_id),
            Cell::text(r.metric_class.as_str()),
            Cell::count(ms.n),
            Cell::count(ms.k),
            Cell::Float(ms.ms_b),
            Cell::Float(ms.ms_w),
            Cell::Float(ms.ms_e),
            Cell::Float(ms.ms_r),
            Cell::Float(r.icc31),
            Cell::Float(r.icc3k),
            Cell::text(r.class31.as_str()),
            Cell::text(r.class3k.as_str()),
            Cell::text(r.mode.as_str()),
        ]);
    }
    t
}

/// Class counts per model and ICC kind, with whole percentages of the
/// metric universe.
pub fn distribution_table(models: &[String], results: &[ReliabilityResult], universe: usize) -> Table {
    let mut columns = vec!["Reliability level".to_string()];
    for m in models {
        for kind in IccKind::BOTH {
            columns.push(format!("{m} {} n", kind.label()));
            columns.push(format!("{m} {} %", kind.label()));
        }
    }
    let mut t = Table::new(
        "study1_distribution",
        format!("Distribution of metric interpretation per model for ICC(3,1) and ICC(3,k); metric universe {universe}"),
        columns,
    );
    let count = |m: &str, kind: IccKind, class: Option<ReliabilityClass>| -> usize {
        let calculated = results.iter().filter(|r| r.model_id == m);
        match class {
            Some(c) => calculated.filter(|r| r.class(kind) == c).count(),
            None => universe - calculated.count(),
        }
    };
    let labels: Vec<(String, Option<ReliabilityClass>)> = ReliabilityClass::DESCENDING
        .iter()
        .map(|&c| (c.label().to_string(), Some(c)))
        .chain(std::iter::once(("Not calculated".to_string(), None)))
        .collect();
    for (label, class) in labels {
        let mut row = vec![Cell::text(label)];
        for m in models {
            for kind in IccKind::BOTH {
                let n = count(m, kind, class);
                row.push(Cell::count(n));
                row.push(Cell::text(whole_percent(n, universe)));
            }
        }
        t.push(row);
    }
    let mut total = vec![Cell::text("Total")];
    for _ in models {
        for _ in IccKind::BOTH {
            total.push(Cell::count(universe));
            total.push(Cell::text(whole_percent(universe, universe)));
        }
    }
    t.push(total);
    t
}

pub fn screening_table(decisions: &[ScreenDecision]) -> Table {
    let columns = ["model_id", "metric_id", "prevalence", "n_complete_segments", "decision"];
    let mut t = Table::new("screening", "Low-variance screening per model and metric", columns.iter().map(|c| c.to_string()).collect());
    for d in decisions {
        t.push(vec![
            Cell::text(&d.model_id),
            Cell::text(&d.metric_id),
            Cell::opt_float(d.prevalence),
            Cell::count(d.n_complete_segments),
            Cell::text(d.decision.as_str()),
        ]);
    }
    t
}

/// Prevalence pooled over all models, per metric.
pub fn screening_global_table(rows: &[(String, Option<f64>, bool)]) -> Table {
    let columns = ["metric_id", "pooled_prevalence", "at_or_above_cutoff"];
    let mut t = Table::new("screening_global", "Dominant-value prevalence pooled over models", columns.iter().map(|c| c.to_string()).collect());
    for (metric, p, flagged) in rows {
        t.push(vec![Cell::text(metric), Cell::opt_float(*p), Cell::text(flagged.to_string())]);
    }
    t
}

pub fn exclusions_table(report: &ExclusionReport) -> Table {
    let columns = ["model_id", "metric_id", "n_valid", "n_constraint_violation", "n_not_calculated"];
    let mut t = Table::new("exclusions", "Cell status counts after validation", columns.iter().map(|c| c.to_string()).collect());
    for r in &report.rows {
        t.push(vec![
            Cell::text(&r.model_id),
            Cell::text(&r.metric_id),
            Cell::count(r.n_valid),
            Cell::count(r.n_violation),
            Cell::count(r.n_not_calculated),
        ]);
    }
    t
}

/// One row per metric with each model's class and the concordant-pair count.
pub fn consistency_table(table: &ConsistencyTable, registry: Option<&Registry>) -> Table {
    let mut columns = vec!["metric_id".to_string(), "metric_class".to_string(), "pipeline".to_string()];
    columns.extend(table.models.iter().map(|m| format!("{m} class")));
    columns.push("concordant_pairs".into());
    columns.push("comparable".into());
    let mut t = Table::new(
        format!("consistency_{}", table.which.as_str()),
        format!("Reliability class per model and concordant model pairs for {}", table.which.label()),
        columns,
    );
    for r in &table.records {
        let pipeline = registry.and_then(|reg| reg.get(&r.metric_id)).map(|s| s.pipeline.clone()).unwrap_or_default();
        let mut row = vec![Cell::text(&r.metric_id), Cell::text(r.metric_class.as_str()), Cell::text(pipeline)];
        row.extend(r.classes.iter().map(|&c| class_text(c)));
        row.push(Cell::count(r.concordant_pairs));
        row.push(Cell::text(if r.is_fully_calculated() { "yes" } else { "incomparable" }));
        t.push(row);
    }
    t
}

/// Concordance distribution for one model, both ICC kinds side by side.
pub fn consistency_distribution_table(single: &ConsistencyDistribution, average: &ConsistencyDistribution) -> Table {
    let width = single.rows.first().map_or(1, |r| r.counts.len());
    let n_pairs = width - 1;
    let heading = |j: usize| if j == 0 { "0".to_string() } else { format!("{j}of{n_pairs}") };
    let mut columns = vec!["Metric interpretation".to_string()];
    for d in [single, average] {
        columns.extend((0..width).map(|j| format!("{} {}", d.which.label(), heading(j))));
        columns.push(format!("{} Total", d.which.label()));
    }
    let mut t = Table::new(
        format!("consistency_distribution_{}", file_stem(&single.model_id)),
        format!(
            "{}: consistency between models for ICC(3,1) and ICC(3,k), as the number of concordant model pairs",
            single.model_id
        ),
        columns,
    );
    for (i, row) in single.rows.iter().enumerate() {
        let label = row.class.map_or("Not calculated", |c| c.label());
        let mut cells = vec![Cell::text(label)];
        for d in [single, average] {
            cells.extend(d.rows[i].counts.iter().map(|&n| Cell::count(n)));
            cells.push(Cell::count(d.rows[i].total()));
        }
        t.push(cells);
    }
    let mut total = vec![Cell::text("Total")];
    for d in [single, average] {
        total.extend(d.column_totals().into_iter().map(Cell::count));
        total.push(Cell::count(d.total()));
    }
    t.push(total);
    if n_pairs == 3 && single.rule == crate::consistency::ConcordanceRule::Strict {
        t.notes.push(crate::consistency::UNREACHABLE_TWO_OF_THREE.to_string());
    }
    t
}

/// Class-by-class counts; rows are model A's class, columns model B's.
pub fn correspondence_table(m: &CorrespondenceMatrix) -> Table {
    let mut columns = vec![format!("{} \\ {}", m.model_a, m.model_b)];
    columns.extend(ReliabilityClass::DESCENDING.iter().map(|c| c.as_str().to_string()));
    columns.push("Total".into());
    let mut t = Table::new(
        format!("correspondence_{}_{}_{}", file_stem(&m.model_a), file_stem(&m.model_b), m.which.as_str()),
        format!("Matrix of metrics, {} comparison between {} and {}", m.which.label(), m.model_a, m.model_b),
        columns,
    );
    for (i, c) in ReliabilityClass::DESCENDING.iter().enumerate() {
        let mut row = vec![Cell::text(c.as_str())];
        row.extend(m.counts[i].iter().map(|&n| Cell::count(n)));
        row.push(Cell::count(m.counts[i].iter().sum()));
        t.push(row);
    }
    let mut total = vec![Cell::text("Total")];
    total.extend((0..5).map(|j| Cell::count((0..5).map(|i| m.counts[i][j]).sum())));
    total.push(Cell::count(m.total()));
    t.push(total);
    if m.is_empty() {
        t.notes.push("no metric is calculated in both models".into());
    }
    t
}

/// Per-cell metric lists for plotting.
pub fn correspondence_sidecar(m: &CorrespondenceMatrix, registry: Option<&Registry>) -> String {
    let mut cells = Vec::new();
    for (i, a) in ReliabilityClass::DESCENDING.iter().enumerate() {
        for (j, b) in ReliabilityClass::DESCENDING.iter().enumerate() {
            if m.cells[i][j].is_empty() {
                continue;
            }
            let metrics: Vec<Value> = m.cells[i][j]
                .iter()
                .map(|cm| {
                    let pipeline = registry.and_then(|r| r.get(&cm.metric_id)).map(|s| s.pipeline.clone());
                    json!({
                        "metric_id": cm.metric_id,
                        "metric_class": cm.metric_class.as_str(),
                        "pipeline": pipeline.unwrap_or_else(|| cm.metric_class.as_str().to_string()),
                    })
                })
                .collect();
            cells.push(json!({ "class_a": a.as_str(), "class_b": b.as_str(), "count": m.counts[i][j], "metrics": metrics }));
        }
    }
    let doc = json!({
        "model_a": m.model_a,
        "model_b": m.model_b,
        "which": m.which.as_str(),
        "classes": ReliabilityClass::DESCENDING.iter().map(|c| c.as_str()).collect::<Vec<_>>(),
        "counts": m.counts,
        "cells": cells,
    });
    serde_json::to_string_pretty(&doc).expect("json renders") + "\n"
}

pub const AGREEMENT_DETAIL_COLUMNS: [&str; 9] = [
    "model_pair", "metric_id", "stat_kind", "median", "trimmed_mean", "range", "nmae", "agreement_class",
    "n_undefined_entries",
];

/// One row per (pair, metric) over the union of both eligibility sets.
pub fn agreement_detail_table(results: &[AgreementResult]) -> Table {
    let mut t = Table::new(
        "agreement_detail",
        "Run-pair agreement per model pair and metric",
        AGREEMENT_DETAIL_COLUMNS.iter().map(|c| c.to_string()).collect(),
    );
    for r in results {
        t.push(vec![
            Cell::text(format!("{}:{}", r.model_a, r.model_b)),
            Cell::text(&r.metric_id),
            Cell::text(r.stat_kind.as_str()),
            Cell::opt_float(r.median),
            Cell::opt_float(r.trimmed_mean),
            Cell::opt_float(r.range),
            Cell::opt_float(r.nmae),
            Cell::text(r.agreement_class.map_or("incomparable", AgreementClass::as_str)),
            Cell::count(r.n_undefined),
        ]);
    }
    t
}

/// Agreement classes per pair and the all-pairs count, per track.
pub fn agreement_rollup_table(rollups: &[AgreementRollup], pair_caption: &str) -> Table {
    let mut columns = vec!["Interpretation of agreement".to_string()];
    for r in rollups {
        columns.extend(PAIR_LABELS.iter().map(|p| format!("{} {p}", r.track.label())));
        columns.push(format!("{} A-3P", r.track.label()));
    }
    let mut t = Table::new(
        "agreement_rollup",
        format!("Agreement levels between model pairs: {pair_caption}. A-3P is agreement across 3 pairs"),
        columns,
    );
    let with_incomparable = rollups.iter().any(|r| r.incomparable().is_some_and(|row| row.per_pair.iter().any(|&n| n > 0)));
    let mut classes: Vec<Option<AgreementClass>> = AgreementClass::DESCENDING.iter().map(|&c| Some(c)).collect();
    if with_incomparable {
        classes.push(None);
    }
    for class in classes {
        let mut row = vec![Cell::text(class.map_or("incomparable", AgreementClass::label))];
        for r in rollups {
            let src = r.rows.iter().find(|row| row.class == class).expect("row present");
            row.extend(src.per_pair.iter().map(|&n| Cell::count(n)));
            row.push(Cell::count(src.a3p));
        }
        t.push(row);
    }
    let mut total = vec![Cell::text("Total")];
    for r in rollups {
        for p in 0..3 {
            total.push(Cell::count(r.rows.iter().map(|row| row.per_pair[p]).sum()));
        }
        total.push(Cell::count(r.rows.iter().map(|row| row.a3p).sum()));
    }
    t.push(total);
    t
}

/// Lowercase ASCII-safe file stem.
pub fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Class rows in report order for a set of metric classes.
pub fn metric_class_rows() -> [MetricClass; 10] {
    MetricClass::ALL
}
