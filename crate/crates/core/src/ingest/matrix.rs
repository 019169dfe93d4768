use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::model::{CellStatus, MeasurementCell, MetricValue, ValueKind};

/// A dense row-major grid of numbers: one row per segment, one column per run.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericGrid {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
}

impl NumericGrid {
    pub fn new(n_rows: usize, n_cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_rows * n_cols {
            return Err(Error::InvalidInput(format!(
                "grid data has {} entries, expected {n_rows}x{n_cols}",
                data.len()
            )));
        }
        Ok(NumericGrid {
            n_rows,
            n_cols,
            data,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * n_cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != n_cols {
                return Err(Error::InvalidInput(format!(
                    "row {i} has {} columns, expected {n_cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        NumericGrid::new(rows.len(), n_cols, data)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.n_cols.max(1)).take(self.n_rows)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n_cols + col]
    }

    pub fn column(&self, col: usize) -> impl Iterator<Item = f64> + Clone + '_ {
        (0..self.n_rows).map(move |r| self.get(r, col))
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> NumericGrid {
        NumericGrid {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

/// Segments x runs grid of values for one (model, metric) slice.
///
/// Only cells with status `valid` carry a value; everything else is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateMatrix {
    pub model_id: String,
    pub metric_id: String,
    pub kind: ValueKind,
    pub segment_ids: Vec<String>,
    pub run_ids: Vec<String>,
    values: Vec<Option<MetricValue>>,
    binary_levels: Option<[String; 2]>,
}

impl ReplicateMatrix {
    /// Builds a matrix from per-segment rows of optional values.
    pub fn from_rows(
        model_id: impl Into<String>,
        metric_id: impl Into<String>,
        kind: ValueKind,
        segment_ids: Vec<String>,
        run_ids: Vec<String>,
        rows: Vec<Vec<Option<MetricValue>>>,
    ) -> Result<Self> {
        if rows.len() != segment_ids.len() {
            return Err(Error::InvalidInput(format!(
                "{} rows for {} segments",
                rows.len(),
                segment_ids.len()
            )));
        }
        let k = run_ids.len();
        let mut values = Vec::with_capacity(rows.len() * k);
        for row in rows {
            if row.len() != k {
                return Err(Error::InvalidInput(format!(
                    "row has {} runs, expected {k}",
                    row.len()
                )));
            }
            for value in row.iter().flatten() {
                if value.kind() != kind {
                    return Err(Error::Type(format!(
                        "{} value in a {} matrix",
                        value.kind().as_str(),
                        kind.as_str()
                    )));
                }
            }
            values.extend(row);
        }
        Ok(ReplicateMatrix {
            model_id: model_id.into(),
            metric_id: metric_id.into(),
            kind,
            segment_ids,
            run_ids,
            values,
            binary_levels: None,
        })
    }

    /// A fully observed continuous matrix, as produced by the simulators.
    pub fn from_numeric(
        model_id: impl Into<String>,
        metric_id: impl Into<String>,
        grid: &NumericGrid,
    ) -> Self {
        let segment_ids = (0..grid.n_rows()).map(|i| format!("s{i:04}")).collect();
        let run_ids = (0..grid.n_cols()).map(run_label).collect();
        ReplicateMatrix {
            model_id: model_id.into(),
            metric_id: metric_id.into(),
            kind: ValueKind::Continuous,
            segment_ids,
            run_ids,
            values: grid
                .values()
                .iter()
                .map(|&x| Some(MetricValue::Continuous(x)))
                .collect(),
            binary_levels: None,
        }
    }

    pub fn with_binary_levels(mut self, levels: Option<[String; 2]>) -> Self {
        self.binary_levels = levels;
        self
    }

    pub fn k(&self) -> usize {
        self.run_ids.len()
    }

    pub fn n_segments(&self) -> usize {
        self.segment_ids.len()
    }

    /// True when the metric has no cells at all for this model.
    pub fn is_empty(&self) -> bool {
        self.segment_ids.is_empty()
    }

    pub fn get(&self, segment: usize, run: usize) -> Option<&MetricValue> {
        self.values[segment * self.k() + run].as_ref()
    }

    pub fn row(&self, segment: usize) -> &[Option<MetricValue>] {
        let k = self.k();
        &self.values[segment * k..(segment + 1) * k]
    }

    pub fn is_complete(&self, segment: usize) -> bool {
        self.row(segment).iter().all(Option::is_some)
    }

    /// Per-segment completeness flags.
    pub fn completeness(&self) -> Vec<bool> {
        (0..self.n_segments()).map(|s| self.is_complete(s)).collect()
    }

    pub fn n_complete(&self) -> usize {
        (0..self.n_segments()).filter(|&s| self.is_complete(s)).count()
    }

    pub fn valid_values(&self) -> impl Iterator<Item = &MetricValue> {
        self.values.iter().flatten()
    }

    pub fn n_valid(&self) -> usize {
        self.valid_values().count()
    }

    /// Numeric encoding of a single value: continuous as-is, binary as 0/1.
    pub fn encode(&self, value: &MetricValue) -> Result<f64> {
        match value {
            MetricValue::Continuous(x) => Ok(*x),
            MetricValue::Binary(label) => {
                let levels = self.resolved_binary_levels()?;
                levels
                    .iter()
                    .position(|l| l == label)
                    .map(|i| i as f64)
                    .ok_or_else(|| {
                        Error::Type(format!(
                            "label {label:?} is not one of the binary levels {levels:?}"
                        ))
                    })
            }
            MetricValue::Categorical(_) => Err(Error::Type(format!(
                "metric {} is categorical and has no numeric view",
                self.metric_id
            ))),
        }
    }

    /// The 0/1 label order: registry-pinned when available, otherwise a
    /// conventional pair ("0"/"1", "false"/"true", "no"/"yes") or the sorted
    /// observed labels.
    pub fn resolved_binary_levels(&self) -> Result<[String; 2]> {
        if let Some(levels) = &self.binary_levels {
            return Ok(levels.clone());
        }
        let observed: BTreeSet<&str> = self.valid_values().filter_map(|v| v.as_label()).collect();
        for pair in [["0", "1"], ["false", "true"], ["no", "yes"]] {
            if observed.iter().all(|l| pair.contains(l)) {
                return Ok([pair[0].to_owned(), pair[1].to_owned()]);
            }
        }
        let labels: Vec<&str> = observed.into_iter().collect();
        match labels.as_slice() {
            [a, b] => Ok([(*a).to_owned(), (*b).to_owned()]),
            [a] => Ok([(*a).to_owned(), String::new()]),
            _ => Err(Error::Type(format!(
                "binary metric {} has {} distinct labels",
                self.metric_id,
                labels.len()
            ))),
        }
    }

    /// Complete segments only, encoded numerically.
    pub fn complete_numeric(&self) -> Result<(Vec<String>, NumericGrid)> {
        if self.kind == ValueKind::Categorical {
            return Err(Error::Type(format!(
                "metric {} is categorical and has no numeric view",
                self.metric_id
            )));
        }
        let k = self.k();
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for s in 0..self.n_segments() {
            if !self.is_complete(s) {
                continue;
            }
            ids.push(self.segment_ids[s].clone());
            for value in self.row(s).iter().flatten() {
                data.push(self.encode(value)?);
            }
        }
        let grid = NumericGrid::new(ids.len(), k, data)?;
        Ok((ids, grid))
    }

    /// Complete rows keyed by segment id.
    pub fn complete_rows(&self) -> HashMap<&str, &[Option<MetricValue>]> {
        (0..self.n_segments())
            .filter(|&s| self.is_complete(s))
            .map(|s| (self.segment_ids[s].as_str(), self.row(s)))
            .collect()
    }

    /// Back to long-format cells; only valid cells are emitted.
    pub fn flatten_valid(&self) -> Vec<MeasurementCell> {
        let mut cells = Vec::with_capacity(self.values.len());
        for (s, segment_id) in self.segment_ids.iter().enumerate() {
            for (r, run_id) in self.run_ids.iter().enumerate() {
                if let Some(value) = self.get(s, r) {
                    cells.push(MeasurementCell {
                        model_id: self.model_id.clone(),
                        run_id: run_id.clone(),
                        segment_id: segment_id.clone(),
                        metric_id: self.metric_id.clone(),
                        value: Some(value.clone()),
                        status: CellStatus::Valid,
                    });
                }
            }
        }
        cells
    }
}

/// Run labels A, B, C, ... then R26, R27, ...
pub fn run_label(i: usize) -> String {
    if i < 26 {
        char::from(b'A' + i as u8).to_string()
    } else {
        format!("R{i}")
    }
}
