use crate::error::{Error, Result};
use crate::model::CellStatus;

use super::Dataset;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExclusionRow {
    pub model_id: String,
    pub metric_id: String,
    pub n_valid: usize,
    pub n_violation: usize,
    pub n_not_calculated: usize,
}

/// Per (model, metric) cell status counts after registry validation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExclusionReport {
    pub rows: Vec<ExclusionRow>,
}

impl ExclusionReport {
    pub fn total_violations(&self) -> usize {
        self.rows.iter().map(|r| r.n_violation).sum()
    }

    pub fn for_slice(&self, model_id: &str, metric_id: &str) -> Option<&ExclusionRow> {
        self.rows
            .iter()
            .find(|r| r.model_id == model_id && r.metric_id == metric_id)
    }

    pub fn from_dataset(dataset: &Dataset) -> Self {
        let mut rows = Vec::with_capacity(dataset.models().len() * dataset.metrics().len());
        for model in dataset.models() {
            for metric in dataset.metrics() {
                let (n_valid, n_violation, n_not_calculated) = dataset.status_counts(model, metric);
                rows.push(ExclusionRow {
                    model_id: model.clone(),
                    metric_id: metric.clone(),
                    n_valid,
                    n_violation,
                    n_not_calculated,
                });
            }
        }
        ExclusionReport { rows }
    }
}

/// Re-marks every valid cell that breaks its registry constraints as
/// `constraint_violation`. Cells are never dropped.
pub fn validate_against_registry(dataset: Dataset) -> Result<(Dataset, ExclusionReport)> {
    let Some(registry) = dataset.registry().cloned() else {
        return Err(Error::Config("registry validation needs a registry".into()));
    };
    let validated = dataset.map_statuses(|cell| match (&cell.status, &cell.value) {
        (CellStatus::Valid, Some(value)) => {
            let ok = registry
                .get(&cell.metric_id)
                .is_some_and(|spec| spec.accepts(value));
            if ok {
                CellStatus::Valid
            } else {
                CellStatus::ConstraintViolation
            }
        }
        (status, _) => *status,
    });
    let report = ExclusionReport::from_dataset(&validated);
    Ok((validated, report))
}
