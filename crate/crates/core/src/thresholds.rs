//! Cutpoints for every interpretation scale and the classifiers that apply them.
//!
//! All cutpoints live in [`ThresholdConfig`] so a study can be re-run under
//! alternative scales. Classification always uses full-precision values.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reliability class of an ICC value, ordered from worst to best.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReliabilityClass {
    Poor,
    Moderate,
    Good,
    Excellent,
    Perfect,
}

impl ReliabilityClass {
    /// Best first, the order used for report rows.
    pub const DESCENDING: [ReliabilityClass; 5] = [
        ReliabilityClass::Perfect,
        ReliabilityClass::Excellent,
        ReliabilityClass::Good,
        ReliabilityClass::Moderate,
        ReliabilityClass::Poor,
    ];

    /// The four interpretation levels (perfect folded into excellent).
    pub const INTERPRETATION_DESCENDING: [ReliabilityClass; 4] = [
        ReliabilityClass::Excellent,
        ReliabilityClass::Good,
        ReliabilityClass::Moderate,
        ReliabilityClass::Poor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ReliabilityClass::Poor => "poor",
            ReliabilityClass::Moderate => "moderate",
            ReliabilityClass::Good => "good",
            ReliabilityClass::Excellent => "excellent",
            ReliabilityClass::Perfect => "perfect",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ReliabilityClass::Poor => "Poor reliability",
            ReliabilityClass::Moderate => "Moderate reliability",
            ReliabilityClass::Good => "Good reliability",
            ReliabilityClass::Excellent => "Excellent reliability",
            ReliabilityClass::Perfect => "Perfect reliability",
        }
    }

    /// Interpretation level: a perfect ICC reads as excellent (ICC in [0.9, 1]).
    pub fn interpretation(self) -> ReliabilityClass {
        match self {
            ReliabilityClass::Perfect => ReliabilityClass::Excellent,
            other => other,
        }
    }

    pub fn is_excellent_or_better(self) -> bool {
        self >= ReliabilityClass::Excellent
    }

    /// 0 = poor .. 3 = excellent on the interpretation scale.
    pub fn interpretation_rank(self) -> u8 {
        match self.interpretation() {
            ReliabilityClass::Poor => 0,
            ReliabilityClass::Moderate => 1,
            ReliabilityClass::Good => 2,
            _ => 3,
        }
    }
}

impl fmt::Display for ReliabilityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Inter-model agreement class, ordered from worst to best.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgreementClass {
    NonAcceptable,
    Low,
    Moderate,
    NearIdeal,
}

impl AgreementClass {
    pub const DESCENDING: [AgreementClass; 4] = [
        AgreementClass::NearIdeal,
        AgreementClass::Moderate,
        AgreementClass::Low,
        AgreementClass::NonAcceptable,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgreementClass::NonAcceptable => "non_acceptable",
            AgreementClass::Low => "low",
            AgreementClass::Moderate => "moderate",
            AgreementClass::NearIdeal => "near_ideal",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AgreementClass::NonAcceptable => "non-acceptable",
            AgreementClass::Low => "low",
            AgreementClass::Moderate => "moderate",
            AgreementClass::NearIdeal => "near-ideal",
        }
    }
}

impl fmt::Display for AgreementClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_moderate() -> f64 {
    0.5
}
fn default_good() -> f64 {
    0.75
}
fn default_excellent() -> f64 {
    0.9
}
fn default_perfect_epsilon() -> f64 {
    1e-9
}
fn default_prevalence_cutoff() -> f64 {
    0.99
}
fn default_nmae() -> [f64; 3] {
    [0.05, 0.10, 0.20]
}
fn default_kappa() -> [f64; 3] {
    [0.81, 0.61, 0.41]
}
fn default_trim_count() -> usize {
    2
}
fn default_min_segments() -> usize {
    5
}

/// Every threshold used by screening, classification and aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdConfig {
    /// Lower bound of the moderate class.
    #[serde(default = "default_moderate")]
    pub reliability_moderate: f64,
    #[serde(default = "default_good")]
    pub reliability_good: f64,
    #[serde(default = "default_excellent")]
    pub reliability_excellent: f64,
    /// ICC >= 1 - perfect_epsilon is perfect.
    #[serde(default = "default_perfect_epsilon")]
    pub perfect_epsilon: f64,
    #[serde(default = "default_prevalence_cutoff")]
    pub prevalence_cutoff: f64,
    /// Upper (inclusive) nMAE bounds of near-ideal, moderate and low.
    #[serde(default = "default_nmae")]
    pub nmae_cutpoints: [f64; 3],
    /// Lower (inclusive) kappa bounds of near-ideal, moderate and low.
    #[serde(default = "default_kappa")]
    pub kappa_cutpoints: [f64; 3],
    /// Entries dropped from each tail before the trimmed mean.
    #[serde(default = "default_trim_count")]
    pub trim_count: usize,
    #[serde(default = "default_min_segments")]
    pub min_segments: usize,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig {
            reliability_moderate: default_moderate(),
            reliability_good: default_good(),
            reliability_excellent: default_excellent(),
            perfect_epsilon: default_perfect_epsilon(),
            prevalence_cutoff: default_prevalence_cutoff(),
            nmae_cutpoints: default_nmae(),
            kappa_cutpoints: default_kappa(),
            trim_count: default_trim_count(),
            min_segments: default_min_segments(),
        }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.reliability_moderate,
            self.reliability_good,
            self.reliability_excellent,
            self.perfect_epsilon,
            self.prevalence_cutoff,
        ]
        .into_iter()
        .chain(self.nmae_cutpoints)
        .chain(self.kappa_cutpoints);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("thresholds must be finite".into()));
        }
        if !(self.reliability_moderate < self.reliability_good
            && self.reliability_good < self.reliability_excellent
            && self.reliability_excellent <= 1.0 - self.perfect_epsilon)
        {
            return Err(Error::Config(
                "reliability cutpoints must increase: moderate < good < excellent <= 1 - perfect_epsilon"
                    .into(),
            ));
        }
        if !(self.perfect_epsilon > 0.0 && self.perfect_epsilon < 0.1) {
            return Err(Error::Config("perfect_epsilon must lie in (0, 0.1)".into()));
        }
        if !(self.prevalence_cutoff > 0.0 && self.prevalence_cutoff <= 1.0) {
            return Err(Error::Config("prevalence_cutoff must lie in (0, 1]".into()));
        }
        let [n0, n1, n2] = self.nmae_cutpoints;
        if !(0.0 < n0 && n0 < n1 && n1 < n2) {
            return Err(Error::Config(
                "nmae cutpoints must be positive and strictly increasing".into(),
            ));
        }
        let [k0, k1, k2] = self.kappa_cutpoints;
        if !(k0 <= 1.0 && k0 > k1 && k1 > k2 && k2 >= -1.0) {
            return Err(Error::Config(
                "kappa cutpoints must be strictly decreasing within [-1, 1]".into(),
            ));
        }
        if self.min_segments < 2 {
            return Err(Error::Config("min_segments must be at least 2".into()));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: ThresholdConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("thresholds JSON: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ThresholdConfig::from_json_str(&text)
    }
}

pub fn classify_reliability(icc: f64, cfg: &ThresholdConfig) -> Result<ReliabilityClass> {
    if !icc.is_finite() {
        return Err(Error::InvalidInput(format!("ICC must be finite, got {icc}")));
    }
    Ok(if icc >= 1.0 - cfg.perfect_epsilon {
        ReliabilityClass::Perfect
    } else if icc >= cfg.reliability_excellent {
        ReliabilityClass::Excellent
    } else if icc >= cfg.reliability_good {
        ReliabilityClass::Good
    } else if icc >= cfg.reliability_moderate {
        ReliabilityClass::Moderate
    } else {
        ReliabilityClass::Poor
    })
}

pub fn classify_agreement_continuous(nmae: f64, cfg: &ThresholdConfig) -> Result<AgreementClass> {
    if !nmae.is_finite() || nmae < 0.0 {
        return Err(Error::InvalidInput(format!(
            "nMAE must be finite and non-negative, got {nmae}"
        )));
    }
    let [near, moderate, low] = cfg.nmae_cutpoints;
    Ok(if nmae <= near {
        AgreementClass::NearIdeal
    } else if nmae <= moderate {
        AgreementClass::Moderate
    } else if nmae <= low {
        AgreementClass::Low
    } else {
        AgreementClass::NonAcceptable
    })
}

pub fn classify_agreement_categorical(kappa: f64, cfg: &ThresholdConfig) -> Result<AgreementClass> {
    if !(-1.0..=1.0).contains(&kappa) {
        return Err(Error::InvalidInput(format!(
            "kappa must lie in [-1, 1], got {kappa}"
        )));
    }
    let [near, moderate, low] = cfg.kappa_cutpoints;
    Ok(if kappa >= near {
        AgreementClass::NearIdeal
    } else if kappa >= moderate {
        AgreementClass::Moderate
    } else if kappa >= low {
        AgreementClass::Low
    } else {
        AgreementClass::NonAcceptable
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn cfg() -> ThresholdConfig {
        ThresholdConfig::default()
    }

    #[test]
    fn reliability_examples() {
        let c = cfg();
        assert_eq!(classify_reliability(0.92, &c).unwrap(), ReliabilityClass::Excellent);
        assert_eq!(classify_reliability(0.75, &c).unwrap(), ReliabilityClass::Good);
        assert_eq!(classify_reliability(-0.25, &c).unwrap(), ReliabilityClass::Poor);
        assert_eq!(classify_reliability(1.0, &c).unwrap(), ReliabilityClass::Perfect);
    }

    #[test]
    fn reliability_boundaries() {
        let c = cfg();
        assert_eq!(classify_reliability(0.5, &c).unwrap(), ReliabilityClass::Moderate);
        assert_eq!(classify_reliability(0.4999999, &c).unwrap(), ReliabilityClass::Poor);
        assert_eq!(classify_reliability(0.9, &c).unwrap(), ReliabilityClass::Excellent);
        assert_eq!(classify_reliability(0.8999999, &c).unwrap(), ReliabilityClass::Good);
        assert_eq!(classify_reliability(1.0 - 1e-9, &c).unwrap(), ReliabilityClass::Perfect);
        assert_eq!(classify_reliability(1.0 - 1e-8, &c).unwrap(), ReliabilityClass::Excellent);
        assert!(matches!(
            classify_reliability(f64::NAN, &c),
            Err(Error::InvalidInput(_))
        ));
        assert!(classify_reliability(f64::INFINITY, &c).is_err());
    }

    #[test]
    fn continuous_agreement_examples() {
        let c = cfg();
        assert_eq!(classify_agreement_continuous(0.05, &c).unwrap(), AgreementClass::NearIdeal);
        assert_eq!(classify_agreement_continuous(0.0606, &c).unwrap(), AgreementClass::Moderate);
        assert_eq!(classify_agreement_continuous(0.10, &c).unwrap(), AgreementClass::Moderate);
        assert_eq!(classify_agreement_continuous(0.20, &c).unwrap(), AgreementClass::Low);
        assert_eq!(
            classify_agreement_continuous(0.25, &c).unwrap(),
            AgreementClass::NonAcceptable
        );
        assert!(classify_agreement_continuous(-0.01, &c).is_err());
        assert!(classify_agreement_continuous(f64::NAN, &c).is_err());
    }

    #[test]
    fn categorical_agreement_examples() {
        let c = cfg();
        assert_eq!(classify_agreement_categorical(1.0, &c).unwrap(), AgreementClass::NearIdeal);
        assert_eq!(
            classify_agreement_categorical(0.0, &c).unwrap(),
            AgreementClass::NonAcceptable
        );
        assert_eq!(classify_agreement_categorical(0.70, &c).unwrap(), AgreementClass::Moderate);
        assert_eq!(classify_agreement_categorical(0.81, &c).unwrap(), AgreementClass::NearIdeal);
        assert_eq!(classify_agreement_categorical(0.41, &c).unwrap(), AgreementClass::Low);
        assert!(classify_agreement_categorical(1.2, &c).is_err());
        assert!(classify_agreement_categorical(f64::NAN, &c).is_err());
    }

    #[test]
    fn config_json_defaults_and_validation() {
        let c = ThresholdConfig::from_json_str("{}").unwrap();
        assert_eq!(c, ThresholdConfig::default());
        let c = ThresholdConfig::from_json_str(r#"{"trim_count": 3, "min_segments": 10}"#).unwrap();
        assert_eq!(c.trim_count, 3);
        assert!(ThresholdConfig::from_json_str(r#"{"nmae_cutpoints": [0.1, 0.05, 0.2]}"#).is_err());
        assert!(ThresholdConfig::from_json_str(r#"{"reliability_good": 0.95}"#).is_err());
        assert!(ThresholdConfig::from_json_str(r#"{"unknown": 1}"#).is_err());
        assert!(ThresholdConfig::from_json_str(r#"{"min_segments": 1}"#).is_err());
    }

    #[test]
    fn interpretation_folds_perfect() {
        assert_eq!(ReliabilityClass::Perfect.interpretation(), ReliabilityClass::Excellent);
        assert_eq!(ReliabilityClass::Good.interpretation(), ReliabilityClass::Good);
        assert!(ReliabilityClass::Perfect.is_excellent_or_better());
        assert!(!ReliabilityClass::Good.is_excellent_or_better());
    }

    proptest! {
        #[test]
        fn reliability_is_monotone(a in -2.0f64..1.5, b in -2.0f64..1.5) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let c = cfg();
            prop_assert!(classify_reliability(lo, &c).unwrap() <= classify_reliability(hi, &c).unwrap());
        }

        #[test]
        fn agreement_classifiers_are_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let c = cfg();
            // Lower nMAE is better; higher kappa is better.
            prop_assert!(classify_agreement_continuous(lo, &c).unwrap() >= classify_agreement_continuous(hi, &c).unwrap());
            prop_assert!(classify_agreement_categorical(lo, &c).unwrap() <= classify_agreement_categorical(hi, &c).unwrap());
        }
    }
}
