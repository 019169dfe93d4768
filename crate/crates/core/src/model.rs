//! Domain types shared by every stage: cell values, the metric registry and
//! the ten metric classes.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Continuous,
    Binary,
    Categorical,
}

impl ValueKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ValueKind::Continuous => "continuous",
            ValueKind::Binary => "binary",
            ValueKind::Categorical => "categorical",
        }
    }
}

/// A single emitted value. Binary and categorical values carry their label.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricValue {
    Continuous(f64),
    Binary(String),
    Categorical(String),
}

impl MetricValue {
    pub fn kind(&self) -> ValueKind {
        match self {
            MetricValue::Continuous(_) => ValueKind::Continuous,
            MetricValue::Binary(_) => ValueKind::Binary,
            MetricValue::Categorical(_) => ValueKind::Categorical,
        }
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            MetricValue::Continuous(x) => Some(*x),
            _ => None,
        }
    }

    pub fn as_label(&self) -> Option<&str> {
        match self {
            MetricValue::Binary(l) | MetricValue::Categorical(l) => Some(l),
            MetricValue::Continuous(_) => None,
        }
    }

    /// Parses a raw textual value according to the metric kind.
    pub fn parse(raw: &str, kind: ValueKind) -> Result<Self> {
        let raw = raw.trim();
        match kind {
            ValueKind::Continuous => raw
                .parse::<f64>()
                .map(MetricValue::Continuous)
                .map_err(|_| Error::InvalidInput(format!("not a decimal value: {raw:?}"))),
            ValueKind::Binary => Ok(MetricValue::Binary(raw.to_owned())),
            ValueKind::Categorical => Ok(MetricValue::Categorical(raw.to_owned())),
        }
    }

    /// Text form used when writing long tables. Continuous values use the
    /// shortest representation that round-trips.
    pub fn to_text(&self) -> String {
        match self {
            MetricValue::Continuous(x) => format!("{x:?}"),
            MetricValue::Binary(l) | MetricValue::Categorical(l) => l.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Valid,
    ConstraintViolation,
    NotCalculated,
}

impl CellStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CellStatus::Valid => "valid",
            CellStatus::ConstraintViolation => "constraint_violation",
            CellStatus::NotCalculated => "not_calculated",
        }
    }
}

impl FromStr for CellStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "valid" => Ok(CellStatus::Valid),
            "constraint_violation" => Ok(CellStatus::ConstraintViolation),
            "not_calculated" => Ok(CellStatus::NotCalculated),
            other => Err(Error::InvalidInput(format!("unknown status {other:?}"))),
        }
    }
}

/// One value from one model, one run, one segment and one metric.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementCell {
    pub model_id: String,
    pub run_id: String,
    pub segment_id: String,
    pub metric_id: String,
    pub value: Option<MetricValue>,
    pub status: CellStatus,
}

impl MeasurementCell {
    pub fn is_valid(&self) -> bool {
        self.status == CellStatus::Valid && self.value.is_some()
    }
}

/// Thematic metric classes, declared in report row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricClass {
    Adaptive,
    AffectAlignment,
    CognitiveStyle,
    Engagement,
    Intention,
    InteractionalEfficiency,
    Personalization,
    RelationalSynchrony,
    Safety,
    SemanticAppropriateness,
}

impl MetricClass {
    pub const ALL: [MetricClass; 10] = [
        MetricClass::Adaptive,
        MetricClass::AffectAlignment,
        MetricClass::CognitiveStyle,
        MetricClass::Engagement,
        MetricClass::Intention,
        MetricClass::InteractionalEfficiency,
        MetricClass::Personalization,
        MetricClass::RelationalSynchrony,
        MetricClass::Safety,
        MetricClass::SemanticAppropriateness,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricClass::Adaptive => "adaptive",
            MetricClass::AffectAlignment => "affect_alignment",
            MetricClass::CognitiveStyle => "cognitive_style",
            MetricClass::Engagement => "engagement",
            MetricClass::Intention => "intention",
            MetricClass::InteractionalEfficiency => "interactional_efficiency",
            MetricClass::Personalization => "personalization",
            MetricClass::RelationalSynchrony => "relational_synchrony",
            MetricClass::Safety => "safety",
            MetricClass::SemanticAppropriateness => "semantic_appropriateness",
        }
    }
}

impl fmt::Display for MetricClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Registry entry describing one metric and its validity constraints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSpec {
    pub metric_id: String,
    pub pipeline: String,
    pub metric_class: MetricClass,
    pub kind: ValueKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed_labels: Option<Vec<String>>,
}

impl MetricSpec {
    pub fn new(
        metric_id: impl Into<String>,
        pipeline: impl Into<String>,
        metric_class: MetricClass,
        kind: ValueKind,
    ) -> Self {
        MetricSpec {
            metric_id: metric_id.into(),
            pipeline: pipeline.into(),
            metric_class,
            kind,
            range_min: None,
            range_max: None,
            allowed_labels: None,
        }
    }

    pub fn with_range(mut self, min: f64, max: f64) -> Self {
        self.range_min = Some(min);
        self.range_max = Some(max);
        self
    }

    pub fn with_labels<I, S>(mut self, labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.allowed_labels = Some(labels.into_iter().map(Into::into).collect());
        self
    }

    fn check_invariants(&self) -> Result<()> {
        let id = &self.metric_id;
        if id.is_empty() {
            return Err(Error::Config("metric_id must not be empty".into()));
        }
        for bound in [self.range_min, self.range_max].into_iter().flatten() {
            if !bound.is_finite() {
                return Err(Error::Config(format!("{id}: range bounds must be finite")));
            }
        }
        if let (Some(lo), Some(hi)) = (self.range_min, self.range_max) {
            if lo >= hi {
                return Err(Error::Config(format!(
                    "{id}: range_min ({lo}) must be below range_max ({hi})"
                )));
            }
        }
        if let Some(labels) = &self.allowed_labels {
            let mut seen = std::collections::HashSet::new();
            if !labels.iter().all(|l| seen.insert(l)) {
                return Err(Error::Config(format!("{id}: duplicate allowed label")));
            }
            if self.kind == ValueKind::Binary && labels.len() != 2 {
                return Err(Error::Config(format!(
                    "{id}: binary metrics need exactly two labels, got {}",
                    labels.len()
                )));
            }
        }
        Ok(())
    }

    /// Whether a value satisfies this spec (inclusive bounds, label membership).
    pub fn accepts(&self, value: &MetricValue) -> bool {
        if value.kind() != self.kind {
            return false;
        }
        match value {
            MetricValue::Continuous(x) => {
                x.is_finite()
                    && self.range_min.map_or(true, |lo| *x >= lo)
                    && self.range_max.map_or(true, |hi| *x <= hi)
            }
            MetricValue::Binary(label) | MetricValue::Categorical(label) => self
                .allowed_labels
                .as_ref()
                .map_or(true, |labels| labels.iter().any(|l| l == label)),
        }
    }

    /// Label order used for the 0/1 encoding of a binary metric, when the
    /// registry pins one.
    pub fn binary_levels(&self) -> Option<[String; 2]> {
        match (&self.kind, &self.allowed_labels) {
            (ValueKind::Binary, Some(labels)) if labels.len() == 2 => {
                Some([labels[0].clone(), labels[1].clone()])
            }
            _ => None,
        }
    }
}

/// An ordered, id-indexed collection of metric specs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    specs: Vec<MetricSpec>,
    index: HashMap<String, usize>,
}

impl Registry {
    pub fn new(specs: Vec<MetricSpec>) -> Result<Self> {
        let mut index = HashMap::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            spec.check_invariants()?;
            if index.insert(spec.metric_id.clone(), i).is_some() {
                return Err(Error::Config(format!(
                    "duplicate metric_id {:?} in registry",
                    spec.metric_id
                )));
            }
        }
        Ok(Registry { specs, index })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let specs: Vec<MetricSpec> = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("registry JSON: {e}")))?;
        Registry::new(specs)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Registry::from_json_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.specs).expect("registry serializes")
    }

    pub fn get(&self, metric_id: &str) -> Option<&MetricSpec> {
        self.index.get(metric_id).map(|&i| &self.specs[i])
    }

    pub fn contains(&self, metric_id: &str) -> bool {
        self.index.contains_key(metric_id)
    }

    pub fn specs(&self) -> &[MetricSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &MetricSpec> {
        self.specs.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_json_round_trip_uses_contract_field_names() {
        let text = r#"[
            {"metric_id":"valence","pipeline":"AffectAnalysis","metric_class":"affect_alignment",
             "kind":"continuous","range_min":-1.0,"range_max":1.0},
            {"metric_id":"risk_flag","pipeline":"PredictabilityAndSafetyAnalysis","metric_class":"safety",
             "kind":"binary","allowed_labels":["0","1"]}
        ]"#;
        let reg = Registry::from_json_str(text).unwrap();
        assert_eq!(reg.len(), 2);
        let valence = reg.get("valence").unwrap();
        assert_eq!(valence.metric_class, MetricClass::AffectAlignment);
        assert_eq!(valence.range_min, Some(-1.0));
        let again = Registry::from_json_str(&reg.to_json_string()).unwrap();
        assert_eq!(again, reg);
    }

    #[test]
    fn registry_rejects_bad_specs() {
        let inverted = MetricSpec::new("x", "p", MetricClass::Safety, ValueKind::Continuous)
            .with_range(1.0, -1.0);
        assert!(matches!(Registry::new(vec![inverted]), Err(Error::Config(_))));

        let three_binary = MetricSpec::new("b", "p", MetricClass::Safety, ValueKind::Binary)
            .with_labels(["a", "b", "c"]);
        assert!(Registry::new(vec![three_binary]).is_err());

        let a = MetricSpec::new("dup", "p", MetricClass::Safety, ValueKind::Continuous);
        assert!(Registry::new(vec![a.clone(), a]).is_err());

        let unknown_class = r#"[{"metric_id":"x","pipeline":"p","metric_class":"mood","kind":"binary"}]"#;
        assert!(Registry::from_json_str(unknown_class).is_err());
    }

    #[test]
    fn accepts_checks_bounds_inclusively_and_labels() {
        let spec = MetricSpec::new("v", "p", MetricClass::AffectAlignment, ValueKind::Continuous)
            .with_range(-1.0, 1.0);
        assert!(spec.accepts(&MetricValue::Continuous(1.0)));
        assert!(spec.accepts(&MetricValue::Continuous(-1.0)));
        assert!(!spec.accepts(&MetricValue::Continuous(1.5)));
        assert!(!spec.accepts(&MetricValue::Continuous(f64::NAN)));

        let flag = MetricSpec::new("f", "p", MetricClass::Safety, ValueKind::Binary)
            .with_labels(["0", "1"]);
        assert!(flag.accepts(&MetricValue::Binary("1".into())));
        assert!(!flag.accepts(&MetricValue::Binary("yes".into())));
        assert_eq!(flag.binary_levels(), Some(["0".to_string(), "1".to_string()]));
    }

    #[test]
    fn ten_classes_in_table_order() {
        let names: Vec<_> = MetricClass::ALL.iter().map(|c| c.as_str()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        assert_eq!(names.len(), 10);
    }
}
