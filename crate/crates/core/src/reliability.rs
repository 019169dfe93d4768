//! Test-retest reliability: two-way ANOVA mean squares over a segments x runs
//! grid and the consistency ICCs for a single run, ICC(3,1), and for the mean
//! of k runs, ICC(3,k).
//!
//! Two error terms are supported. [`IccMode::Within`] uses the pooled
//! within-segment mean square MS_W:
//!
//! ```text
//! ICC(3,1) = (MS_B - MS_W) / (MS_B + (k - 1) MS_W)
//! ICC(3,k) = (MS_B - MS_W) / MS_B
//! ```
//!
//! [`IccMode::Residual`] substitutes the two-way residual MS_E, which removes
//! the run main effect first (runs as a fixed effect). In both modes ICC(3,k)
//! is the Spearman-Brown step-up of ICC(3,1).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{NumericGrid, ReplicateMatrix};
use crate::model::MetricClass;
use crate::thresholds::{classify_reliability, ReliabilityClass, ThresholdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IccMode {
    #[default]
    Within,
    Residual,
}

impl IccMode {
    pub fn as_str(self) -> &'static str {
        match self {
            IccMode::Within => "within",
            IccMode::Residual => "residual",
        }
    }
}

/// Which ICC a table or comparison is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IccKind {
    #[serde(rename = "icc31")]
    Single,
    #[serde(rename = "icc3k")]
    Average,
}

impl IccKind {
    pub const BOTH: [IccKind; 2] = [IccKind::Single, IccKind::Average];

    pub fn as_str(self) -> &'static str {
        match self {
            IccKind::Single => "icc31",
            IccKind::Average => "icc3k",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            IccKind::Single => "ICC(3,1)",
            IccKind::Average => "ICC(3,k)",
        }
    }
}

impl fmt::Display for IccKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// ANOVA decomposition of a complete segments x runs grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanSquares {
    /// Between segments.
    pub ms_b: f64,
    /// Pooled within segments (runs + residual).
    pub ms_w: f64,
    /// Two-way residual after removing the run effect.
    pub ms_e: f64,
    /// Between runs.
    pub ms_r: f64,
    pub n: usize,
    pub k: usize,
    pub ss_between: f64,
    pub ss_within: f64,
    pub ss_runs: f64,
    pub ss_residual: f64,
    pub ss_total: f64,
}

impl MeanSquares {
    /// Error mean square for the chosen mode.
    pub fn error_term(&self, mode: IccMode) -> f64 {
        match mode {
            IccMode::Within => self.ms_w,
            IccMode::Residual => self.ms_e,
        }
    }

    /// Checks SS_total = SS_B + SS_R + SS_E and SS_W = SS_R + SS_E.
    pub fn check_decomposition(&self, rel_tol: f64) -> Result<()> {
        let close = |a: f64, b: f64| (a - b).abs() <= rel_tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
        let parts = self.ss_between + self.ss_runs + self.ss_residual;
        if !close(self.ss_total, parts) {
            return Err(Error::Invariant(format!(
                "SS decomposition: total {} vs parts {}",
                self.ss_total, parts
            )));
        }
        if !close(self.ss_within, self.ss_runs + self.ss_residual) {
            return Err(Error::Invariant(format!(
                "within SS {} vs runs + residual {}",
                self.ss_within,
                self.ss_runs + self.ss_residual
            )));
        }
        Ok(())
    }
}

/// Mean that is exact when every value is identical.
fn stable_mean(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let mut it = xs.clone();
    let Some(first) = it.next() else {
        return f64::NAN;
    };
    if it.all(|x| x == first) {
        return first;
    }
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

/// Mean squares of a complete grid with at least two rows and two columns.
pub fn mean_squares_of(grid: &NumericGrid) -> Result<MeanSquares> {
    let (n, k) = (grid.n_rows(), grid.n_cols());
    if n < 2 {
        return Err(Error::InsufficientData { required: 2, found: n });
    }
    if k < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 runs, got {k}")));
    }
    if let Some(bad) = grid.values().iter().find(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite value {bad} in grid")));
    }

    let row_means: Vec<f64> = grid.rows().map(|r| stable_mean(r.iter().copied())).collect();
    let col_means: Vec<f64> = (0..k).map(|j| stable_mean(grid.column(j))).collect();
    let grand = stable_mean(col_means.iter().copied());

    let ss_between = k as f64 * row_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_runs = n as f64 * col_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let (mut ss_within, mut ss_residual, mut ss_total) = (0.0, 0.0, 0.0);
    for (row, &rm) in grid.rows().zip(&row_means) {
        for (&x, &cm) in row.iter().zip(&col_means) {
            ss_within += (x - rm).powi(2);
            ss_residual += (x - rm - cm + grand).powi(2);
            ss_total += (x - grand).powi(2);
        }
    }

    let (nf, kf) = (n as f64, k as f64);
    Ok(MeanSquares {
        ms_b: ss_between / (nf - 1.0),
        ms_w: ss_within / (nf * (kf - 1.0)),
        ms_e: ss_residual / ((nf - 1.0) * (kf - 1.0)),
        ms_r: ss_runs / (kf - 1.0),
        n,
        k,
        ss_between,
        ss_within,
        ss_runs,
        ss_residual,
        ss_total,
    })
}

/// Mean squares over the complete segments of a replicate matrix.
pub fn mean_squares(matrix: &ReplicateMatrix, min_segments: usize) -> Result<MeanSquares> {
    let (_, grid) = matrix.complete_numeric()?;
    if grid.n_rows() < min_segments.max(2) {
        return Err(Error::InsufficientData {
            required: min_segments.max(2),
            found: grid.n_rows(),
        });
    }
    mean_squares_of(&grid)
}

/// ICC(3,1). May be negative; never truncated.
pub fn icc31(ms: &MeanSquares, mode: IccMode) -> Result<f64> {
    let err = ms.error_term(mode);
    let denom = ms.ms_b + (ms.k as f64 - 1.0) * err;
    if denom <= 0.0 {
        return Err(Error::DegenerateVariance(format!(
            "MS_B + (k-1)·MS_{} is zero",
            if mode == IccMode::Within { "W" } else { "E" }
        )));
    }
    Ok((ms.ms_b - err) / denom)
}

/// ICC(3,k), the reliability of the mean of k runs.
pub fn icc3k(ms: &MeanSquares, mode: IccMode) -> Result<f64> {
    if ms.ms_b <= 0.0 {
        return Err(Error::DegenerateVariance("MS_B is zero".into()));
    }
    Ok((ms.ms_b - ms.error_term(mode)) / ms.ms_b)
}

/// k·r / (1 + (k-1)·r)
pub fn spearman_brown(r: f64, k: usize) -> f64 {
    let k = k as f64;
    k * r / (1.0 + (k - 1.0) * r)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReliabilityResult {
    pub model_id: String,
    pub metric_id: String,
    pub metric_class: MetricClass,
    pub mean_squares: MeanSquares,
    pub icc31: f64,
    pub icc3k: f64,
    pub mode: IccMode,
    pub class31: ReliabilityClass,
    pub class3k: ReliabilityClass,
}

impl ReliabilityResult {
    pub fn icc(&self, which: IccKind) -> f64 {
        match which {
            IccKind::Single => self.icc31,
            IccKind::Average => self.icc3k,
        }
    }

    pub fn class(&self, which: IccKind) -> ReliabilityClass {
        match which {
            IccKind::Single => self.class31,
            IccKind::Average => self.class3k,
        }
    }

    /// |ICC(3,k) - SB(ICC(3,1))| scaled by max(1, |ICC(3,k)|), or `None`
    /// where the step-up is undefined.
    pub fn spearman_brown_gap(&self) -> Option<f64> {
        spearman_brown_gap(self.icc31, self.icc3k, self.mean_squares.k)
    }
}

/// Relative deviation of `average` from the step-up of `single`. Near
/// ICC(3,1) = -1/(k-1) the step-up diverges, hence the scaling.
pub fn spearman_brown_gap(single: f64, average: f64, k: usize) -> Option<f64> {
    (single > -1.0 / (k as f64 - 1.0))
        .then(|| (average - spearman_brown(single, k)).abs() / average.abs().max(1.0))
}

pub const SPEARMAN_BROWN_TOL: f64 = 1e-9;

/// Full Study 1 computation for one (model, metric) matrix.
pub fn assess(
    matrix: &ReplicateMatrix,
    metric_class: MetricClass,
    mode: IccMode,
    cfg: &ThresholdConfig,
) -> Result<ReliabilityResult> {
    let ms = mean_squares(matrix, cfg.min_segments)?;
    ms.check_decomposition(1e-9)?;
    let single = icc31(&ms, mode)?;
    let average = icc3k(&ms, mode)?;
    let result = ReliabilityResult {
        model_id: matrix.model_id.clone(),
        metric_id: matrix.metric_id.clone(),
        metric_class,
        mean_squares: ms,
        icc31: single,
        icc3k: average,
        mode,
        class31: classify_reliability(single, cfg)?,
        class3k: classify_reliability(average, cfg)?,
    };
    if let Some(gap) = result.spearman_brown_gap() {
        if gap > SPEARMAN_BROWN_TOL {
            return Err(Error::Invariant(format!(
                "ICC(3,k) deviates from the Spearman-Brown step-up by {gap:e}"
            )));
        }
    }
    Ok(result)
}

/// One metric-class row of a Study 1 summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassSummaryRow {
    pub metric_class: MetricClass,
    pub n: usize,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub mean: Option<f64>,
    /// Excellent or perfect.
    pub excellence_n: usize,
    pub good_n: usize,
}

/// Per-class ICC summary for one model; always ten rows in class order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassSummaryTable {
    pub model_id: Option<String>,
    pub which: IccKind,
    pub rows: Vec<ClassSummaryRow>,
    pub n_calculated: usize,
    pub n_not_calculated: usize,
}

/// Summarizes one model's results by metric class. `n_not_calculated` is the
/// caption-level count of metrics that produced no ICC.
pub fn study1_summary(
    results: &[ReliabilityResult],
    which: IccKind,
    n_not_calculated: usize,
) -> Result<ClassSummaryTable> {
    let model_id = results.first().map(|r| r.model_id.clone());
    if let Some(model) = &model_id {
        if results.iter().any(|r| &r.model_id != model) {
            return Err(Error::InvalidInput(
                "a Study 1 summary covers a single model".into(),
            ));
        }
    }
    let rows = MetricClass::ALL
        .iter()
        .map(|&class| {
            let iccs: Vec<(f64, ReliabilityClass)> = results
                .iter()
                .filter(|r| r.metric_class == class)
                .map(|r| (r.icc(which), r.class(which)))
                .collect();
            let n = iccs.len();
            let (min, max, mean) = if n == 0 {
                (None, None, None)
            } else {
                let min = iccs.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
                let max = iccs.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
                let mean = iccs.iter().map(|p| p.0).sum::<f64>() / n as f64;
                (Some(min), Some(max), Some(mean))
            };
            ClassSummaryRow {
                metric_class: class,
                n,
                min,
                max,
                mean,
                excellence_n: iccs.iter().filter(|p| p.1.is_excellent_or_better()).count(),
                good_n: iccs.iter().filter(|p| p.1 == ReliabilityClass::Good).count(),
            }
        })
        .collect();
    Ok(ClassSummaryTable {
        model_id,
        which,
        rows,
        n_calculated: results.len(),
        n_not_calculated,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn grid(rows: &[Vec<f64>]) -> NumericGrid {
        NumericGrid::from_rows(rows).unwrap()
    }

    fn hand_grid() -> NumericGrid {
        grid(&[vec![1.0, 2.0], vec![3.0, 3.0], vec![5.0, 6.0]])
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn hand_worked_mean_squares() {
        // row means 1.5, 3, 5.5; grand 10/3; column means 3, 11/3.
        // SS_B = 2·(49/36 + 1/9 + 169/36) = 49/3, SS_W = 1, SS_R = 2/3, SS_E = 1/3.
        let ms = mean_squares_of(&hand_grid()).unwrap();
        assert!(close(ms.ms_b, 49.0 / 6.0, 1e-12));
        assert!(close(ms.ms_w, 1.0 / 3.0, 1e-12));
        assert!(close(ms.ms_e, 1.0 / 6.0, 1e-12));
        assert!(close(ms.ms_r, 2.0 / 3.0, 1e-12));
        assert!(close(ms.ms_b, 8.1667, 5e-5));
        assert!(close(ms.ms_w, 0.3333, 5e-5));
        assert!(close(ms.ms_e, 0.1667, 5e-5));
        ms.check_decomposition(1e-12).unwrap();
    }

    #[test]
    fn hand_worked_iccs() {
        let ms = mean_squares_of(&hand_grid()).unwrap();
        // (49/6 - 1/3) / (49/6 + 1/3) = 47/51
        assert!(close(icc31(&ms, IccMode::Within).unwrap(), 47.0 / 51.0, 1e-12));
        assert!(close(icc31(&ms, IccMode::Within).unwrap(), 0.9216, 5e-5));
        // (49/6 - 1/6) / (49/6 + 1/6) = 48/50
        assert!(close(icc31(&ms, IccMode::Residual).unwrap(), 0.96, 1e-12));
        // 47/49 and 48/49
        assert!(close(icc3k(&ms, IccMode::Within).unwrap(), 47.0 / 49.0, 1e-12));
        assert!(close(icc3k(&ms, IccMode::Within).unwrap(), 0.9592, 5e-5));
        assert!(close(icc3k(&ms, IccMode::Residual).unwrap(), 0.9796, 5e-5));
    }

    #[test]
    fn identical_columns_have_zero_within() {
        let ms = mean_squares_of(&grid(&[vec![1.0, 1.0], vec![2.0, 2.0]])).unwrap();
        assert_eq!(ms.ms_w, 0.0);
        assert_eq!(ms.ms_e, 0.0);
        assert_eq!(icc31(&ms, IccMode::Within).unwrap(), 1.0);
        assert_eq!(icc3k(&ms, IccMode::Within).unwrap(), 1.0);
    }

    #[test]
    fn constant_grid_is_degenerate() {
        let ms = mean_squares_of(&grid(&[vec![0.1; 3], vec![0.1; 3], vec![0.1; 3]])).unwrap();
        assert_eq!((ms.ms_b, ms.ms_w, ms.ms_e, ms.ms_r), (0.0, 0.0, 0.0, 0.0));
        assert!(matches!(icc31(&ms, IccMode::Within), Err(Error::DegenerateVariance(_))));
        assert!(matches!(icc3k(&ms, IccMode::Residual), Err(Error::DegenerateVariance(_))));
    }

    #[test]
    fn too_few_segments() {
        let m = ReplicateMatrix::from_numeric("m", "x", &hand_grid());
        assert!(matches!(
            mean_squares(&m, 5),
            Err(Error::InsufficientData { required: 5, found: 3 })
        ));
        assert!(mean_squares(&m, 3).is_ok());
    }

    #[test]
    fn negative_icc_is_reported_raw() {
        // rows share a mean, runs disagree: MS_B = 0 < MS_W
        let ms = mean_squares_of(&grid(&[vec![0.0, 2.0], vec![2.0, 0.0], vec![1.0, 1.0]])).unwrap();
        assert_eq!(ms.ms_b, 0.0);
        assert_eq!(icc31(&ms, IccMode::Within).unwrap(), -1.0);
    }

    #[test]
    fn study1_summary_arithmetic() {
        let cfg = ThresholdConfig::default();
        let make = |id: &str, icc: f64| ReliabilityResult {
            model_id: "m".into(),
            metric_id: id.into(),
            metric_class: MetricClass::Engagement,
            mean_squares: mean_squares_of(&hand_grid()).unwrap(),
            icc31: icc,
            icc3k: spearman_brown(icc, 2),
            mode: IccMode::Within,
            class31: classify_reliability(icc, &cfg).unwrap(),
            class3k: classify_reliability(spearman_brown(icc, 2), &cfg).unwrap(),
        };
        let results = vec![make("a", 0.92), make("b", 0.80), make("c", 0.40)];
        let table = study1_summary(&results, IccKind::Single, 4).unwrap();
        assert_eq!(table.rows.len(), 10);
        let row = table.rows.iter().find(|r| r.metric_class == MetricClass::Engagement).unwrap();
        assert_eq!(row.n, 3);
        assert_eq!(row.min, Some(0.40));
        assert_eq!(row.max, Some(0.92));
        assert!(close(row.mean.unwrap(), 0.7067, 5e-5));
        assert_eq!((row.excellence_n, row.good_n), (1, 1));
        assert_eq!(table.n_not_calculated, 4);
        let empty = table.rows.iter().find(|r| r.metric_class == MetricClass::Safety).unwrap();
        assert_eq!((empty.n, empty.mean), (0, None));

        let all_excellent = vec![make("a", 0.95), make("b", 0.97)];
        let t = study1_summary(&all_excellent, IccKind::Single, 0).unwrap();
        let row = t.rows.iter().find(|r| r.metric_class == MetricClass::Engagement).unwrap();
        assert_eq!((row.excellence_n, row.good_n), (2, 0));

        assert!(study1_summary(&[], IccKind::Average, 0).unwrap().rows.iter().all(|r| r.n == 0));
        let mut other = make("z", 0.5);
        other.model_id = "m2".into();
        assert!(study1_summary(&[make("a", 0.9), other], IccKind::Single, 0).is_err());
    }

    fn small_grid() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2usize..=8, 2usize..=4).prop_flat_map(|(n, k)| {
            prop::collection::vec(prop::collection::vec(-50.0f64..50.0, k), n)
        })
    }

    proptest! {
        #[test]
        fn spearman_brown_identity(rows in small_grid()) {
            let ms = mean_squares_of(&grid(&rows)).unwrap();
            for mode in [IccMode::Within, IccMode::Residual] {
                let (Ok(r1), Ok(rk)) = (icc31(&ms, mode), icc3k(&ms, mode)) else { continue };
                if let Some(gap) = spearman_brown_gap(r1, rk, ms.k) {
                    prop_assert!(gap <= SPEARMAN_BROWN_TOL, "gap {gap}");
                }
                prop_assert!(r1 <= 1.0 + 1e-12 && rk <= 1.0 + 1e-12);
                if r1 >= 0.0 {
                    prop_assert!(r1 <= rk + 1e-12);
                }
            }
        }

        #[test]
        fn decomposition_holds(rows in small_grid()) {
            let ms = mean_squares_of(&grid(&rows)).unwrap();
            prop_assert!(ms.check_decomposition(1e-9).is_ok());
            prop_assert!(ms.ms_b >= 0.0 && ms.ms_w >= 0.0 && ms.ms_e >= 0.0 && ms.ms_r >= 0.0);
        }

        #[test]
        fn location_scale_invariance(rows in small_grid(), a in prop_oneof![-20.0f64..-0.5, 0.5f64..20.0], b in -100.0f64..100.0) {
            let g = grid(&rows);
            let ms = mean_squares_of(&g).unwrap();
            let ms2 = mean_squares_of(&g.map(|x| a * x + b)).unwrap();
            for mode in [IccMode::Within, IccMode::Residual] {
                if ms.ms_b < 1e-6 { continue; }
                let (x, y) = (icc31(&ms, mode).unwrap(), icc31(&ms2, mode).unwrap());
                prop_assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
                let (x, y) = (icc3k(&ms, mode).unwrap(), icc3k(&ms2, mode).unwrap());
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0), "{x} vs {y}");
            }
        }

        #[test]
        fn permutation_invariance(rows in small_grid(), seed in any::<u64>()) {
            let n = rows.len();
            let k = rows[0].len();
            let row_perm: Vec<usize> = (0..n).map(|i| (i + seed as usize) % n).collect();
            let col_perm: Vec<usize> = (0..k).rev().collect();
            let permuted: Vec<Vec<f64>> = row_perm.iter().map(|&i| col_perm.iter().map(|&j| rows[i][j]).collect()).collect();
            let a = mean_squares_of(&grid(&rows)).unwrap();
            let b = mean_squares_of(&grid(&permuted)).unwrap();
            let tol = |x: f64, y: f64| (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0);
            prop_assert!(tol(a.ms_b, b.ms_b) && tol(a.ms_w, b.ms_w) && tol(a.ms_e, b.ms_e) && tol(a.ms_r, b.ms_r));
        }
    }
}
