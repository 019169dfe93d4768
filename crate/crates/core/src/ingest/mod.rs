//! Long-format ingestion: parse measurement tables, index them, and pivot
//! (model, metric) slices into replicate matrices.
//!
//! The on-disk contract is one row per cell with the columns
//! `model_id,run_id,segment_id,metric_id,value,status` (CSV), or one JSON
//! object per line with the same field names (JSONL).

mod matrix;
mod validate;
pub mod wide;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

pub use matrix::{run_label, NumericGrid, ReplicateMatrix};
pub use validate::{validate_against_registry, ExclusionReport, ExclusionRow};

use crate::error::{Error, Result};
use crate::model::{CellStatus, MeasurementCell, MetricValue, Registry, ValueKind};

pub const CSV_HEADER: [&str; 6] = ["model_id", "run_id", "segment_id", "metric_id", "value", "status"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    Csv,
    Jsonl,
}

impl InputFormat {
    /// Guesses the format from the file extension (`.jsonl`/`.ndjson` vs anything else).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => InputFormat::Jsonl,
            _ => InputFormat::Csv,
        }
    }
}

/// Explicit index order for models, runs and segments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IndexOrder {
    pub models: Vec<String>,
    pub runs: Vec<String>,
    pub segments: Vec<String>,
}

/// How the model/run/segment index lists are ordered.
#[derive(Debug, Clone, Default, PartialEq)]
pub enum OrderingMode {
    #[default]
    FirstAppearance,
    /// Lexicographic; independent of input row order.
    Sorted,
    Explicit(IndexOrder),
}

#[derive(Debug, Clone, Copy)]
struct Key {
    model: u32,
    run: u32,
    segment: u32,
    metric: u32,
}

#[derive(Debug, Clone)]
struct Record {
    key: Key,
    value: Option<MetricValue>,
    status: CellStatus,
}

/// An indexed, immutable collection of measurement cells.
#[derive(Debug, Clone)]
pub struct Dataset {
    models: Vec<String>,
    runs: Vec<String>,
    segments: Vec<String>,
    metrics: Vec<String>,
    kinds: Vec<ValueKind>,
    registry: Option<Registry>,
    records: Vec<Record>,
    slices: HashMap<(u32, u32), Vec<u32>>,
}

fn order_ids<'a>(
    seen: impl Iterator<Item = &'a str>,
    explicit: Option<&[String]>,
    sorted: bool,
    what: &str,
) -> Result<Vec<String>> {
    let mut firsts = Vec::new();
    let mut set = HashSet::new();
    for id in seen {
        if set.insert(id) {
            firsts.push(id.to_owned());
        }
    }
    if let Some(explicit) = explicit {
        let allowed: HashSet<&str> = explicit.iter().map(String::as_str).collect();
        if let Some(missing) = firsts.iter().find(|id| !allowed.contains(id.as_str())) {
            return Err(Error::Integrity(format!(
                "{what} {missing:?} is not listed in the index order"
            )));
        }
        return Ok(explicit.to_vec());
    }
    if sorted {
        firsts.sort();
    }
    Ok(firsts)
}

impl Dataset {
    /// Indexes cells. Fails on duplicate keys, unknown metrics (when a
    /// registry is given), kind mismatches, or a single replicate.
    pub fn from_cells(
        cells: Vec<MeasurementCell>,
        registry: Option<Registry>,
        ordering: &OrderingMode,
    ) -> Result<Self> {
        let (explicit, sorted) = match ordering {
            OrderingMode::FirstAppearance => (None, false),
            OrderingMode::Sorted => (None, true),
            OrderingMode::Explicit(order) => (Some(order), false),
        };
        let models = order_ids(
            cells.iter().map(|c| c.model_id.as_str()),
            explicit.map(|o| o.models.as_slice()),
            sorted,
            "model",
        )?;
        let runs = order_ids(
            cells.iter().map(|c| c.run_id.as_str()),
            explicit.map(|o| o.runs.as_slice()),
            sorted,
            "run",
        )?;
        let segments = order_ids(
            cells.iter().map(|c| c.segment_id.as_str()),
            explicit.map(|o| o.segments.as_slice()),
            sorted,
            "segment",
        )?;
        let metrics = match &registry {
            Some(reg) => {
                if let Some(cell) = cells.iter().find(|c| !reg.contains(&c.metric_id)) {
                    return Err(Error::Integrity(format!(
                        "metric {:?} is not in the registry",
                        cell.metric_id
                    )));
                }
                reg.iter().map(|s| s.metric_id.clone()).collect()
            }
            None => order_ids(cells.iter().map(|c| c.metric_id.as_str()), None, sorted, "metric")?,
        };
        if !cells.is_empty() && runs.len() < 2 {
            return Err(Error::Integrity(format!(
                "reliability needs at least 2 runs, found {}",
                runs.len()
            )));
        }

        let lookup = |ids: &[String]| -> HashMap<String, u32> {
            ids.iter().enumerate().map(|(i, id)| (id.clone(), i as u32)).collect()
        };
        let (model_ix, run_ix, segment_ix, metric_ix) =
            (lookup(&models), lookup(&runs), lookup(&segments), lookup(&metrics));

        let mut seen = HashSet::with_capacity(cells.len());
        let mut records = Vec::with_capacity(cells.len());
        let mut slices: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
        for cell in cells {
            let key = Key {
                model: model_ix[&cell.model_id],
                run: run_ix[&cell.run_id],
                segment: segment_ix[&cell.segment_id],
                metric: metric_ix[&cell.metric_id],
            };
            if !seen.insert((key.model, key.run, key.segment, key.metric)) {
                return Err(Error::Integrity(format!(
                    "duplicate cell (model={}, run={}, segment={}, metric={})",
                    cell.model_id, cell.run_id, cell.segment_id, cell.metric_id
                )));
            }
            if cell.status == CellStatus::Valid && cell.value.is_none() {
                return Err(Error::Integrity(format!(
                    "valid cell without a value (model={}, run={}, segment={}, metric={})",
                    cell.model_id, cell.run_id, cell.segment_id, cell.metric_id
                )));
            }
            slices
                .entry((key.model, key.metric))
                .or_default()
                .push(records.len() as u32);
            records.push(Record {
                key,
                value: cell.value,
                status: cell.status,
            });
        }

        let mut observed: Vec<Option<ValueKind>> = vec![None; metrics.len()];
        for r in &records {
            let Some(v) = &r.value else { continue };
            let slot = &mut observed[r.key.metric as usize];
            match *slot {
                None => *slot = Some(v.kind()),
                Some(k) if k != v.kind() => {
                    return Err(Error::Integrity(format!(
                        "metric {}: mixed value kinds {} and {}",
                        metrics[r.key.metric as usize],
                        k.as_str(),
                        v.kind().as_str()
                    )))
                }
                _ => {}
            }
        }
        let mut kinds = Vec::with_capacity(metrics.len());
        for (metric_id, observed) in metrics.iter().zip(observed) {
            let kind = match registry.as_ref().and_then(|r| r.get(metric_id)) {
                Some(spec) => {
                    if let Some(obs) = observed.filter(|&o| o != spec.kind) {
                        return Err(Error::Integrity(format!(
                            "metric {metric_id} is registered as {} but has {} values",
                            spec.kind.as_str(),
                            obs.as_str()
                        )));
                    }
                    spec.kind
                }
                None => observed.unwrap_or(ValueKind::Continuous),
            };
            kinds.push(kind);
        }

        Ok(Dataset {
            models,
            runs,
            segments,
            metrics,
            kinds,
            registry,
            records,
            slices,
        })
    }

    pub fn empty() -> Self {
        Dataset::from_cells(Vec::new(), None, &OrderingMode::default()).expect("empty dataset")
    }

    pub fn models(&self) -> &[String] {
        &self.models
    }

    pub fn runs(&self) -> &[String] {
        &self.runs
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    /// The metric universe: registry order when a registry is attached.
    pub fn metrics(&self) -> &[String] {
        &self.metrics
    }

    pub fn registry(&self) -> Option<&Registry> {
        self.registry.as_ref()
    }

    pub fn k(&self) -> usize {
        self.runs.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn metric_kind(&self, metric_id: &str) -> Option<ValueKind> {
        self.metric_index(metric_id).map(|m| self.kinds[m])
    }

    fn metric_index(&self, metric_id: &str) -> Option<usize> {
        self.metrics.iter().position(|m| m == metric_id)
    }

    fn model_index(&self, model_id: &str) -> Option<usize> {
        self.models.iter().position(|m| m == model_id)
    }

    fn to_cell(&self, r: &Record) -> MeasurementCell {
        MeasurementCell {
            model_id: self.models[r.key.model as usize].clone(),
            run_id: self.runs[r.key.run as usize].clone(),
            segment_id: self.segments[r.key.segment as usize].clone(),
            metric_id: self.metrics[r.key.metric as usize].clone(),
            value: r.value.clone(),
            status: r.status,
        }
    }

    pub fn cells(&self) -> impl Iterator<Item = MeasurementCell> + '_ {
        self.records.iter().map(|r| self.to_cell(r))
    }

    /// Status counts (valid, violation, not calculated) for one slice.
    pub fn status_counts(&self, model_id: &str, metric_id: &str) -> (usize, usize, usize) {
        let (Some(model), Some(metric)) = (self.model_index(model_id), self.metric_index(metric_id))
        else {
            return (0, 0, 0);
        };
        let mut counts = (0, 0, 0);
        for &i in self.slices.get(&(model as u32, metric as u32)).into_iter().flatten() {
            match self.records[i as usize].status {
                CellStatus::Valid => counts.0 += 1,
                CellStatus::ConstraintViolation => counts.1 += 1,
                CellStatus::NotCalculated => counts.2 += 1,
            }
        }
        counts
    }

    /// Number of `not_calculated` cells per model, in model order.
    pub fn not_calculated_counts(&self) -> Vec<(String, usize)> {
        let mut counts = vec![0usize; self.models.len()];
        for r in &self.records {
            if r.status == CellStatus::NotCalculated {
                counts[r.key.model as usize] += 1;
            }
        }
        self.models.iter().cloned().zip(counts).collect()
    }

    pub(crate) fn map_statuses(mut self, f: impl Fn(&MeasurementCell) -> CellStatus) -> Self {
        for i in 0..self.records.len() {
            let status = f(&self.to_cell(&self.records[i]));
            self.records[i].status = status;
        }
        self
    }

    /// Pivots one (model, metric) slice into a segments x runs grid ordered by
    /// (segment order, run order). A metric with no cells for the model gives
    /// an empty matrix rather than an error.
    pub fn pivot(&self, model_id: &str, metric_id: &str) -> Result<ReplicateMatrix> {
        let model = self
            .model_index(model_id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown model {model_id:?}")))?;
        let metric = self
            .metric_index(metric_id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown metric {metric_id:?}")))?;
        let kind = self.kinds[metric];
        let slice: &[u32] = self
            .slices
            .get(&(model as u32, metric as u32))
            .map_or(&[], Vec::as_slice);

        let present: BTreeSet<u32> = slice
            .iter()
            .map(|&i| self.records[i as usize].key.segment)
            .collect();
        let row_of: HashMap<u32, usize> = present.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let k = self.runs.len();
        let mut rows = vec![vec![None; k]; present.len()];
        for &i in slice {
            let r = &self.records[i as usize];
            if r.status == CellStatus::Valid {
                rows[row_of[&r.key.segment]][r.key.run as usize] = r.value.clone();
            }
        }
        let segment_ids = present
            .iter()
            .map(|&s| self.segments[s as usize].clone())
            .collect();
        let levels = self
            .registry
            .as_ref()
            .and_then(|reg| reg.get(metric_id))
            .and_then(|spec| spec.binary_levels());
        Ok(ReplicateMatrix::from_rows(
            model_id,
            metric_id,
            kind,
            segment_ids,
            self.runs.clone(),
            rows,
        )?
        .with_binary_levels(levels))
    }

    /// Writes the dataset in the long CSV contract.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_long_csv(self.cells(), writer)
    }
}

pub fn pivot_replicates(dataset: &Dataset, model_id: &str, metric_id: &str) -> Result<ReplicateMatrix> {
    dataset.pivot(model_id, metric_id)
}

pub fn write_long_csv<W: Write>(cells: impl IntoIterator<Item = MeasurementCell>, writer: W) -> Result<()> {
    let io = |e: csv::Error| Error::Integrity(format!("writing CSV: {e}"));
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER).map_err(io)?;
    for c in cells {
        let value = c.value.as_ref().map(MetricValue::to_text).unwrap_or_default();
        w.write_record([
            c.model_id.as_str(),
            &c.run_id,
            &c.segment_id,
            &c.metric_id,
            &value,
            c.status.as_str(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::Integrity(format!("writing CSV: {e}")))?;
    Ok(())
}

struct RawRow {
    line: u64,
    model_id: String,
    run_id: String,
    segment_id: String,
    metric_id: String,
    value: Option<String>,
    status: CellStatus,
}

fn parse_status(raw: &str, has_value: bool) -> Result<CellStatus> {
    if raw.trim().is_empty() {
        return Ok(if has_value {
            CellStatus::Valid
        } else {
            CellStatus::NotCalculated
        });
    }
    raw.parse()
}

fn read_csv_rows<R: Read>(reader: R, path: &Path) -> Result<Vec<RawRow>> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if header.iter().map(str::trim).ne(CSV_HEADER) {
        return Err(parse_err(
            1,
            format!("expected header {:?}, found {:?}", CSV_HEADER.join(","), header.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut rows = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                return Err(parse_err(line, e.to_string()));
            }
        }
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != CSV_HEADER.len() {
            return Err(parse_err(line, format!("expected 6 fields, found {}", record.len())));
        }
        let field = |i: usize| record[i].trim();
        for (i, name) in CSV_HEADER.iter().enumerate().take(4) {
            if field(i).is_empty() {
                return Err(parse_err(line, format!("empty {name}")));
            }
        }
        let value = Some(field(4)).filter(|v| !v.is_empty()).map(str::to_owned);
        let status = parse_status(field(5), value.is_some()).map_err(|e| parse_err(line, e.to_string()))?;
        rows.push(RawRow {
            line,
            model_id: field(0).to_owned(),
            run_id: field(1).to_owned(),
            segment_id: field(2).to_owned(),
            metric_id: field(3).to_owned(),
            value,
            status,
        });
    }
    Ok(rows)
}

fn read_jsonl_rows<R: Read>(reader: R, path: &Path) -> Result<Vec<RawRow>> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = i as u64 + 1;
        let line = line.map_err(|e| parse_err(lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let obj: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if let Some(extra) = obj.keys().find(|k| !CSV_HEADER.contains(&k.as_str())) {
            return Err(parse_err(lineno, format!("unknown field {extra:?}")));
        }
        let text = |name: &str| -> Result<String> {
            match obj.get(name) {
                Some(serde_json::Value::String(s)) if !s.trim().is_empty() => Ok(s.trim().to_owned()),
                Some(serde_json::Value::Number(n)) => Ok(n.to_string()),
                _ => Err(parse_err(lineno, format!("missing or empty {name}"))),
            }
        };
        let value = match obj.get("value") {
            None | Some(serde_json::Value::Null) => None,
            Some(serde_json::Value::String(s)) if s.trim().is_empty() => None,
            Some(serde_json::Value::String(s)) => Some(s.trim().to_owned()),
            Some(serde_json::Value::Number(n)) => Some(n.to_string()),
            Some(serde_json::Value::Bool(b)) => Some(b.to_string()),
            Some(other) => return Err(parse_err(lineno, format!("unsupported value {other}"))),
        };
        let status = match obj.get("status") {
            None | Some(serde_json::Value::Null) => parse_status("", value.is_some()),
            Some(serde_json::Value::String(s)) => parse_status(s, value.is_some()),
            Some(other) => Err(Error::InvalidInput(format!("status must be a string, got {other}"))),
        }
        .map_err(|e| parse_err(lineno, e.to_string()))?;
        rows.push(RawRow {
            line: lineno,
            model_id: text("model_id")?,
            run_id: text("run_id")?,
            segment_id: text("segment_id")?,
            metric_id: text("metric_id")?,
            value,
            status,
        });
    }
    Ok(rows)
}

fn infer_raw_kind<'a>(values: impl Iterator<Item = &'a str>) -> ValueKind {
    let mut labels = BTreeSet::new();
    let mut numeric = true;
    for v in values {
        numeric &= v.parse::<f64>().is_ok();
        labels.insert(v);
    }
    if numeric {
        ValueKind::Continuous
    } else if labels.len() <= 2 {
        ValueKind::Binary
    } else {
        ValueKind::Categorical
    }
}

/// Parses a long-format table from any reader. `path` is only used in error
/// messages.
pub fn read_long_table<R: Read>(
    reader: R,
    path: &Path,
    format: InputFormat,
    registry: Option<Registry>,
    ordering: &OrderingMode,
) -> Result<Dataset> {
    let rows = match format {
        InputFormat::Csv => read_csv_rows(reader, path)?,
        InputFormat::Jsonl => read_jsonl_rows(reader, path)?,
    };

    let mut first_line: HashMap<(&str, &str, &str, &str), u64> = HashMap::with_capacity(rows.len());
    for row in &rows {
        let key = (
            row.model_id.as_str(),
            row.run_id.as_str(),
            row.segment_id.as_str(),
            row.metric_id.as_str(),
        );
        if let Some(prev) = first_line.insert(key, row.line) {
            return Err(Error::Integrity(format!(
                "{}:{}: duplicate cell (model={}, run={}, segment={}, metric={}) first seen on line {prev}",
                path.display(),
                row.line,
                row.model_id,
                row.run_id,
                row.segment_id,
                row.metric_id
            )));
        }
        if let Some(reg) = &registry {
            if !reg.contains(&row.metric_id) {
                return Err(Error::Integrity(format!(
                    "{}:{}: metric {:?} is not in the registry",
                    path.display(),
                    row.line,
                    row.metric_id
                )));
            }
        }
    }
    drop(first_line);

    let mut kinds: HashMap<&str, ValueKind> = HashMap::new();
    match &registry {
        Some(reg) => {
            for spec in reg.iter() {
                kinds.insert(spec.metric_id.as_str(), spec.kind);
            }
        }
        None => {
            let mut by_metric: HashMap<&str, Vec<&str>> = HashMap::new();
            for row in &rows {
                let entry = by_metric.entry(row.metric_id.as_str()).or_default();
                if let Some(v) = row.value.as_deref() {
                    entry.push(v);
                }
            }
            for (metric, values) in by_metric {
                kinds.insert(metric, infer_raw_kind(values.into_iter()));
            }
        }
    }

    let mut cells = Vec::with_capacity(rows.len());
    for row in &rows {
        let kind = kinds[row.metric_id.as_str()];
        let value = match &row.value {
            Some(raw) => Some(MetricValue::parse(raw, kind).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: row.line,
                message: format!("metric {}: {e}", row.metric_id),
            })?),
            None => None,
        };
        if row.status == CellStatus::Valid && value.is_none() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: row.line,
                message: "status valid requires a value".into(),
            });
        }
        cells.push(MeasurementCell {
            model_id: row.model_id.clone(),
            run_id: row.run_id.clone(),
            segment_id: row.segment_id.clone(),
            metric_id: row.metric_id.clone(),
            value,
            status: row.status,
        });
    }
    drop(rows);
    Dataset::from_cells(cells, registry, ordering)
}

/// Loads a long-format file. See [`read_long_table`].
pub fn load_long_table(
    path: &Path,
    format: InputFormat,
    registry: Option<Registry>,
    ordering: &OrderingMode,
) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_long_table(file, path, format, registry, ordering)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MetricClass, MetricSpec};

    fn read(text: &str, registry: Option<Registry>) -> Result<Dataset> {
        read_long_table(
            text.as_bytes(),
            Path::new("test.csv"),
            InputFormat::Csv,
            registry,
            &OrderingMode::FirstAppearance,
        )
    }

    const MINIMAL: &str = "model_id,run_id,segment_id,metric_id,value,status
m1,A,s1,valence,0.5,valid
m1,B,s1,valence,0.6,valid
m1,A,s2,valence,-0.2,valid
m1,B,s2,valence,,not_calculated
";

    #[test]
    fn minimal_file_loads() {
        let ds = read(MINIMAL, None).unwrap();
        assert_eq!(ds.k(), 2);
        assert_eq!(ds.segments().len(), 2);
        assert_eq!(ds.models(), &["m1".to_string()]);
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.metric_kind("valence"), Some(ValueKind::Continuous));
        assert_eq!(ds.not_calculated_counts(), vec![("m1".to_string(), 1)]);
    }

    #[test]
    fn duplicate_key_is_integrity_error() {
        let text = format!("{MINIMAL}m1,A,s1,valence,0.7,valid\n");
        let err = read(&text, None).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "{err}");
        assert!(err.to_string().contains(":6:"), "{err}");
    }

    #[test]
    fn unknown_metric_with_registry_is_integrity_error() {
        let reg = Registry::new(vec![MetricSpec::new(
            "arousal",
            "AffectAnalysis",
            MetricClass::AffectAlignment,
            ValueKind::Continuous,
        )])
        .unwrap();
        assert!(matches!(read(MINIMAL, Some(reg)), Err(Error::Integrity(_))));
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let bad_header = "model,run_id,segment_id,metric_id,value,status\n";
        assert!(matches!(read(bad_header, None), Err(Error::Parse { line: 1, .. })));

        let short = "model_id,run_id,segment_id,metric_id,value,status\nm1,A,s1,valence,0.5,valid\nm1,B,s1\n";
        match read(short, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }

        let bad_status = "model_id,run_id,segment_id,metric_id,value,status\nm1,A,s1,valence,0.5,maybe\n";
        assert!(matches!(read(bad_status, None), Err(Error::Parse { line: 2, .. })));

        let reg = Registry::new(vec![MetricSpec::new(
            "valence",
            "AffectAnalysis",
            MetricClass::AffectAlignment,
            ValueKind::Continuous,
        )])
        .unwrap();
        let bad_number = "model_id,run_id,segment_id,metric_id,value,status\nm1,A,s1,valence,0.5,valid\nm1,B,s1,valence,high,valid\n";
        assert!(matches!(read(bad_number, Some(reg)), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn single_run_rejected() {
        let text = "model_id,run_id,segment_id,metric_id,value,status\nm1,A,s1,v,1,valid\nm1,A,s2,v,2,valid\n";
        assert!(matches!(read(text, None), Err(Error::Integrity(_))));
    }

    #[test]
    fn header_only_gives_empty_dataset() {
        let ds = read("model_id,run_id,segment_id,metric_id,value,status\n", None).unwrap();
        assert!(ds.is_empty());
        assert!(ds.models().is_empty());
    }

    #[test]
    fn jsonl_matches_csv() {
        let jsonl = r#"{"model_id":"m1","run_id":"A","segment_id":"s1","metric_id":"valence","value":0.5,"status":"valid"}
{"model_id":"m1","run_id":"B","segment_id":"s1","metric_id":"valence","value":0.6,"status":"valid"}
{"model_id":"m1","run_id":"A","segment_id":"s2","metric_id":"valence","value":-0.2,"status":"valid"}
{"model_id":"m1","run_id":"B","segment_id":"s2","metric_id":"valence","value":null,"status":"not_calculated"}
"#;
        let a = read_long_table(
            jsonl.as_bytes(),
            Path::new("t.jsonl"),
            InputFormat::Jsonl,
            None,
            &OrderingMode::FirstAppearance,
        )
        .unwrap();
        let b = read(MINIMAL, None).unwrap();
        assert_eq!(a.cells().collect::<Vec<_>>(), b.cells().collect::<Vec<_>>());

        let broken = "{\"model_id\":\"m1\"\n";
        assert!(matches!(
            read_long_table(broken.as_bytes(), Path::new("t.jsonl"), InputFormat::Jsonl, None, &OrderingMode::default()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn pivot_orders_and_flags_completeness() {
        let ds = read(MINIMAL, None).unwrap();
        let m = ds.pivot("m1", "valence").unwrap();
        assert_eq!(m.n_segments(), 2);
        assert_eq!(m.k(), 2);
        assert_eq!(m.completeness(), vec![true, false]);
        assert_eq!(m.get(0, 1), Some(&MetricValue::Continuous(0.6)));
        assert_eq!(m.get(1, 1), None);
        let (ids, grid) = m.complete_numeric().unwrap();
        assert_eq!(ids, vec!["s1".to_string()]);
        assert_eq!(grid.row(0), &[0.5, 0.6]);
    }

    #[test]
    fn pivot_all_valid_2x2() {
        let text = "model_id,run_id,segment_id,metric_id,value,status
m1,A,s1,v,1,valid
m1,B,s1,v,2,valid
m1,A,s2,v,3,valid
m1,B,s2,v,4,valid
";
        let m = read(text, None).unwrap().pivot("m1", "v").unwrap();
        assert_eq!(m.completeness(), vec![true, true]);
        assert_eq!(m.complete_numeric().unwrap().1.values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn pivot_absent_metric_is_empty_not_error() {
        let text = "model_id,run_id,segment_id,metric_id,value,status
m1,A,s1,v,1,valid
m1,B,s1,v,2,valid
m2,A,s1,w,1,valid
m2,B,s1,w,2,valid
";
        let ds = read(text, None).unwrap();
        let m = ds.pivot("m1", "w").unwrap();
        assert!(m.is_empty());
        assert!(ds.pivot("m9", "w").is_err());
    }

    #[test]
    fn sorted_ordering_ignores_row_order() {
        let lines: Vec<&str> = MINIMAL.lines().collect();
        let mut shuffled = [lines[0], lines[4], lines[2], lines[3], lines[1]].join("\n");
        shuffled.push('\n');
        let load = |t: &str| {
            read_long_table(t.as_bytes(), Path::new("x"), InputFormat::Csv, None, &OrderingMode::Sorted).unwrap()
        };
        assert_eq!(
            load(MINIMAL).pivot("m1", "valence").unwrap(),
            load(&shuffled).pivot("m1", "valence").unwrap()
        );
    }

    #[test]
    fn explicit_order_must_cover_ids() {
        let order = IndexOrder {
            models: vec!["m1".into()],
            runs: vec!["B".into(), "A".into()],
            segments: vec!["s2".into(), "s1".into()],
        };
        let ds = read_long_table(
            MINIMAL.as_bytes(),
            Path::new("x"),
            InputFormat::Csv,
            None,
            &OrderingMode::Explicit(order.clone()),
        )
        .unwrap();
        assert_eq!(ds.runs(), &["B".to_string(), "A".to_string()]);
        let m = ds.pivot("m1", "valence").unwrap();
        assert_eq!(m.segment_ids, vec!["s2".to_string(), "s1".to_string()]);

        let partial = IndexOrder {
            segments: vec!["s1".into()],
            ..order
        };
        assert!(read_long_table(
            MINIMAL.as_bytes(),
            Path::new("x"),
            InputFormat::Csv,
            None,
            &OrderingMode::Explicit(partial)
        )
        .is_err());
    }

    #[test]
    fn write_then_read_round_trips() {
        let ds = read(MINIMAL, None).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let again = read(std::str::from_utf8(&buf).unwrap(), None).unwrap();
        assert_eq!(ds.cells().collect::<Vec<_>>(), again.cells().collect::<Vec<_>>());
    }
}
