//! Conversion from wide tables (one column per run) to long cells.

use std::io::Read;

use crate::error::{Error, Result};
use crate::model::{CellStatus, MeasurementCell, MetricValue, ValueKind};

/// Reads a wide CSV with header `segment_id,<run>,<run>,...` for one
/// (model, metric) pair. Empty fields become `not_calculated` cells.
pub fn wide_to_long<R: Read>(
    reader: R,
    model_id: &str,
    metric_id: &str,
    kind: ValueKind,
) -> Result<Vec<MeasurementCell>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::InvalidInput(format!("wide table header: {e}")))?
        .clone();
    if header.get(0).map(str::trim) != Some("segment_id") || header.len() < 3 {
        return Err(Error::InvalidInput(
            "wide table needs a segment_id column followed by at least two run columns".into(),
        ));
    }
    let runs: Vec<String> = header.iter().skip(1).map(|h| h.trim().to_owned()).collect();
    let mut cells = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::InvalidInput(format!("wide table row {}: {e}", i + 2)))?;
        let segment_id = record.get(0).unwrap_or_default().trim();
        for (run_id, raw) in runs.iter().zip(record.iter().skip(1)) {
            let raw = raw.trim();
            let value = if raw.is_empty() {
                None
            } else {
                Some(MetricValue::parse(raw, kind)?)
            };
            cells.push(MeasurementCell {
                model_id: model_id.to_owned(),
                run_id: run_id.clone(),
                segment_id: segment_id.to_owned(),
                metric_id: metric_id.to_owned(),
                status: if value.is_some() {
                    CellStatus::Valid
                } else {
                    CellStatus::NotCalculated
                },
                value,
            });
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converts_rows_and_blanks() {
        let text = "segment_id,A,B\ns1,1.0,2.0\ns2,3.0,\n";
        let cells = wide_to_long(text.as_bytes(), "m", "v", ValueKind::Continuous).unwrap();
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[1].run_id, "B");
        assert_eq!(cells[3].status, CellStatus::NotCalculated);
        assert!(wide_to_long("seg,A\n".as_bytes(), "m", "v", ValueKind::Continuous).is_err());
    }
}
