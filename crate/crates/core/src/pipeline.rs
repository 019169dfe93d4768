//! End-to-end orchestration: ingest, validate, screen, the three studies, and
//! rendering into a deterministic set of documents.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::agreement::{
    a3p_rollup, assess_pair, check_eligibility, model_pairs, study3_eligibility, AgreementResult, AgreementRollup,
    AgreementSettings, RangePopulation, StatKind,
};
use crate::consistency::{
    build_consistency_records, consistency_distribution, consistently_excellent, correspondence_matrix,
    rt_consistent_metrics, ConcordanceRule, ConsistencyDistribution, ConsistencyTable, CorrespondenceMatrix,
};
use crate::error::{Error, Result};
use crate::ingest::{load_long_table, validate_against_registry, Dataset, ExclusionReport, InputFormat, OrderingMode};
use crate::model::{MetricClass, Registry};
use crate::reliability::{assess, study1_summary, ClassSummaryTable, IccKind, IccMode, ReliabilityResult};
use crate::report::{self, render_table, Cell, OutputFormat, Table};
use crate::screening::{pooled_prevalence, screen_metric, ScreenDecision, ScreenOutcome};
use crate::thresholds::ThresholdConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Validate,
    Screen,
    Study1,
    Study2,
    Study3,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Validate, Stage::Screen, Stage::Study1, Stage::Study2, Stage::Study3];

    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::Validate => None,
            Stage::Screen => Some(Stage::Validate),
            Stage::Study1 => Some(Stage::Screen),
            Stage::Study2 => Some(Stage::Study1),
            Stage::Study3 => Some(Stage::Study2),
        }
    }

    /// This stage and everything it depends on.
    pub fn through(self) -> BTreeSet<Stage> {
        Stage::ALL.into_iter().filter(|&s| s <= self).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingChoice {
    #[default]
    FirstAppearance,
    Sorted,
}

impl OrderingChoice {
    fn mode(self) -> OrderingMode {
        match self {
            OrderingChoice::FirstAppearance => OrderingMode::FirstAppearance,
            OrderingChoice::Sorted => OrderingMode::Sorted,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub data: Option<PathBuf>,
    /// Guessed from the data path when unset.
    pub input_format: Option<InputFormat>,
    pub registry: Option<PathBuf>,
    pub thresholds: ThresholdConfig,
    pub icc_mode: IccMode,
    pub stages: BTreeSet<Stage>,
    pub out_dir: Option<PathBuf>,
    pub formats: Vec<OutputFormat>,
    /// Recorded in the manifest; the analysis itself draws no random numbers.
    pub seed: u64,
    pub adjacent_class_tolerance: bool,
    pub range_population: RangePopulation,
    pub ordering: OrderingChoice,
    /// Worker threads; `None` uses the rayon default.
    pub jobs: Option<usize>,
    pub precision: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data: None,
            input_format: None,
            registry: None,
            thresholds: ThresholdConfig::default(),
            icc_mode: IccMode::Within,
            stages: Stage::Study3.through(),
            out_dir: None,
            formats: vec![OutputFormat::Csv],
            seed: 0,
            adjacent_class_tolerance: false,
            range_population: RangePopulation::Pooled,
            ordering: OrderingChoice::FirstAppearance,
            jobs: None,
            precision: 4,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.thresholds.validate()?;
        for stage in &self.stages {
            if let Some(pre) = stage.prerequisite() {
                if !self.stages.contains(&pre) {
                    return Err(Error::Config(format!(
                        "stage {} requires stage {}",
                        stage_name(*stage),
                        stage_name(pre)
                    )));
                }
            }
        }
        if self.formats.is_empty() {
            return Err(Error::Config("at least one output format is required".into()));
        }
        if self.jobs == Some(0) {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if self.precision > 15 {
            return Err(Error::Config("precision must be at most 15 digits".into()));
        }
        Ok(())
    }

    fn rule(&self) -> ConcordanceRule {
        ConcordanceRule::from_flag(self.adjacent_class_tolerance)
    }

    fn fingerprint(&self) -> ConfigFingerprint<'_> {
        ConfigFingerprint {
            thresholds: &self.thresholds,
            icc_mode: self.icc_mode,
            stages: self.stages.iter().copied().collect(),
            formats: self.formats.clone(),
            seed: self.seed,
            adjacent_class_tolerance: self.adjacent_class_tolerance,
            range_population: self.range_population,
            ordering: self.ordering,
            precision: self.precision,
        }
    }
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Validate => "validate",
        Stage::Screen => "screen",
        Stage::Study1 => "study1",
        Stage::Study2 => "study2",
        Stage::Study3 => "study3",
    }
}

/// Everything that can change an output byte; paths and worker count are
/// deliberately absent.
#[derive(Debug, Serialize)]
pub struct ConfigFingerprint<'a> {
    pub thresholds: &'a ThresholdConfig,
    pub icc_mode: IccMode,
    pub stages: Vec<Stage>,
    pub formats: Vec<OutputFormat>,
    pub seed: u64,
    pub adjacent_class_tolerance: bool,
    pub range_population: RangePopulation,
    pub ordering: OrderingChoice,
    pub precision: usize,
}

/// A (model, metric) slice that passed screening but has no ICC.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UndefinedIcc {
    pub model_id: String,
    pub metric_id: String,
    pub reason: String,
}

/// Per-model accounting of the metric universe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Reconciliation {
    pub model_id: String,
    pub universe: usize,
    pub not_calculated: usize,
    pub calculated: usize,
    pub screened_low_variance: usize,
    pub screened_insufficient_n: usize,
    pub analyzed: usize,
    pub icc_undefined: usize,
}

impl Reconciliation {
    pub fn screened(&self) -> usize {
        self.screened_low_variance + self.screened_insufficient_n
    }

    pub fn check(&self) -> Result<()> {
        let ok = self.calculated + self.not_calculated == self.universe
            && self.screened() + self.analyzed + self.icc_undefined == self.calculated;
        if ok {
            Ok(())
        } else {
            Err(Error::Invariant(format!("totals do not reconcile for model {}: {self:?}", self.model_id)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub status: String,
    pub error: Option<String>,
    pub config_sha256: String,
    pub input_sha256: String,
    pub registry_sha256: Option<String>,
    pub config: serde_json::Value,
    pub models: Vec<String>,
    pub n_runs: usize,
    pub n_segments: usize,
    pub metric_universe: usize,
    pub reconciliation: Vec<Reconciliation>,
    pub rt_consistent_icc31: Option<usize>,
    pub rt_consistent_icc3k: Option<usize>,
    pub notices: Vec<String>,
    pub outputs: Vec<OutputEntry>,
}

/// A rendered output file.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub file: String,
    pub content: String,
}

#[derive(Debug, Clone, Default)]
pub struct ReportBundle {
    pub models: Vec<String>,
    pub n_runs: usize,
    pub n_segments: usize,
    pub universe: Vec<(String, MetricClass)>,
    pub notices: Vec<String>,
    pub exclusions: Option<ExclusionReport>,
    pub screening: Vec<ScreenDecision>,
    pub global_screening: Vec<(String, Option<f64>, bool)>,
    pub study1: Vec<ReliabilityResult>,
    pub icc_undefined: Vec<UndefinedIcc>,
    pub summaries: Vec<ClassSummaryTable>,
    pub reconciliation: Vec<Reconciliation>,
    pub consistency: Vec<ConsistencyTable>,
    pub distributions: Vec<(ConsistencyDistribution, ConsistencyDistribution)>,
    pub correspondences: Vec<CorrespondenceMatrix>,
    pub rt_single: Option<Vec<String>>,
    pub rt_average: Option<Vec<String>>,
    /// Both tracks; a metric eligible on both appears twice.
    pub agreement: Vec<AgreementResult>,
    pub rollups: Vec<AgreementRollup>,
    registry: Option<Registry>,
    stages: BTreeSet<Stage>,
    input_sha256: String,
}

impl ReportBundle {
    pub fn result(&self, model_id: &str, metric_id: &str) -> Option<&ReliabilityResult> {
        self.study1.iter().find(|r| r.model_id == model_id && r.metric_id == metric_id)
    }

    pub fn decision(&self, model_id: &str, metric_id: &str) -> Option<&ScreenDecision> {
        self.screening.iter().find(|d| d.model_id == model_id && d.metric_id == metric_id)
    }

    pub fn agreement_for(&self, track: IccKind) -> impl Iterator<Item = &AgreementResult> {
        self.agreement.iter().filter(move |r| r.track == track)
    }

    pub fn rollup(&self, track: IccKind) -> Option<&AgreementRollup> {
        self.rollups.iter().find(|r| r.track == track)
    }

    fn class_of(&self, metric_id: &str) -> MetricClass {
        self.universe
            .iter()
            .find(|(m, _)| m == metric_id)
            .map_or(MetricClass::Adaptive, |(_, c)| *c)
    }

    /// All tables in output order.
    pub fn tables(&self) -> Vec<Table> {
        let mut tables = Vec::new();
        if let Some(ex) = &self.exclusions {
            tables.push(report::exclusions_table(ex));
        }
        if self.stages.contains(&Stage::Screen) {
            tables.push(report::screening_table(&self.screening));
            tables.push(report::screening_global_table(&self.global_screening));
        }
        if self.stages.contains(&Stage::Study1) {
            tables.push(report::study1_results_table(&self.study1));
            tables.push(self.not_calculated_table());
            tables.extend(self.summaries.iter().map(report::study1_summary_table));
            tables.push(report::distribution_table(&self.models, &self.study1, self.universe.len()));
        }
        if self.stages.contains(&Stage::Study2) {
            for t in &self.consistency {
                tables.push(report::consistency_table(t, self.registry.as_ref()));
            }
            for (single, average) in &self.distributions {
                tables.push(report::consistency_distribution_table(single, average));
            }
            tables.extend(self.correspondences.iter().map(report::correspondence_table));
        }
        if self.stages.contains(&Stage::Study3) {
            tables.push(self.agreement_detail());
            let caption = match model_pairs(&self.models) {
                Ok(pairs) => pairs
                    .iter()
                    .map(|(l, a, b)| format!("{l} = {} vs {}", self.models[*a], self.models[*b]))
                    .collect::<Vec<_>>()
                    .join(", "),
                Err(_) => String::new(),
            };
            tables.push(report::agreement_rollup_table(&self.rollups, &caption));
        }
        for t in &mut tables {
            if t.rows.is_empty() && self.models.is_empty() {
                t.notes.push("no data".into());
            }
        }
        tables
    }

    fn not_calculated_table(&self) -> Table {
        let columns = ["model_id", "metric_id", "metric_class", "reason"];
        let mut t = Table::new(
            "study1_not_calculated",
            "Metrics without an ICC per model",
            columns.iter().map(|c| c.to_string()).collect(),
        );
        let undefined: HashMap<(&str, &str), &str> = self
            .icc_undefined
            .iter()
            .map(|u| ((u.model_id.as_str(), u.metric_id.as_str()), u.reason.as_str()))
            .collect();
        for d in &self.screening {
            let reason = match d.decision {
                ScreenOutcome::Kept => match undefined.get(&(d.model_id.as_str(), d.metric_id.as_str())) {
                    Some(r) => *r,
                    None => continue,
                },
                other => other.as_str(),
            };
            t.push(vec![
                Cell::text(&d.model_id),
                Cell::text(&d.metric_id),
                Cell::text(self.class_of(&d.metric_id).as_str()),
                Cell::text(reason),
            ]);
        }
        t
    }

    /// Each (pair, metric) once, over the union of both tracks.
    fn agreement_detail(&self) -> Table {
        let mut seen = BTreeSet::new();
        let mut rows: Vec<&AgreementResult> =
            self.agreement.iter().filter(|r| seen.insert((r.pair_label.clone(), r.metric_id.clone()))).collect();
        rows.sort_by(|a, b| {
            (&a.pair_label, self.class_of(&a.metric_id), &a.metric_id).cmp(&(
                &b.pair_label,
                self.class_of(&b.metric_id),
                &b.metric_id,
            ))
        });
        let owned: Vec<AgreementResult> = rows.into_iter().cloned().collect();
        report::agreement_detail_table(&owned)
    }

    /// Renders every output, ending with `tables.json` and `manifest.json`.
    pub fn documents(&self, config: &PipelineConfig, failure: Option<&Error>) -> Result<Vec<Document>> {
        let tables = self.tables();
        let mut docs = Vec::new();
        for table in &tables {
            for &format in &config.formats {
                docs.push(Document {
                    file: format!("{}.{}", table.name, format.extension()),
                    content: render_table(table, format, config.precision)?,
                });
            }
        }
        for m in &self.correspondences {
            docs.push(Document {
                file: format!(
                    "correspondence_{}_{}_{}_cells.json",
                    report::file_stem(&m.model_a),
                    report::file_stem(&m.model_b),
                    m.which.as_str()
                ),
                content: report::correspondence_sidecar(m, self.registry.as_ref()),
            });
        }
        docs.push(Document {
            file: "tables.json".into(),
            content: serde_json::to_string_pretty(&tables).expect("tables serialize") + "\n",
        });
        let manifest = self.manifest(config, &docs, failure);
        docs.push(Document {
            file: "manifest.json".into(),
            content: serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
        });
        Ok(docs)
    }

    pub fn manifest(&self, config: &PipelineConfig, docs: &[Document], failure: Option<&Error>) -> RunManifest {
        let fingerprint = serde_json::to_value(config.fingerprint()).expect("config serializes");
        RunManifest {
            tool: "retest".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            status: if failure.is_some() { "failed".into() } else { "complete".into() },
            error: failure.map(ToString::to_string),
            config_sha256: sha256_hex(fingerprint.to_string().as_bytes()),
            input_sha256: self.input_sha256.clone(),
            registry_sha256: self.registry.as_ref().map(|r| sha256_hex(r.to_json_string().as_bytes())),
            config: fingerprint,
            models: self.models.clone(),
            n_runs: self.n_runs,
            n_segments: self.n_segments,
            metric_universe: self.universe.len(),
            reconciliation: self.reconciliation.clone(),
            rt_consistent_icc31: self.rt_single.as_ref().map(Vec::len),
            rt_consistent_icc3k: self.rt_average.as_ref().map(Vec::len),
            notices: self.notices.clone(),
            outputs: docs
                .iter()
                .map(|d| OutputEntry { file: d.file.clone(), sha256: sha256_hex(d.content.as_bytes()) })
                .collect(),
        }
    }
}

#[derive(Debug)]
pub struct PipelineFailure {
    pub error: Error,
    pub partial: Option<Box<ReportBundle>>,
}

impl std::fmt::Display for PipelineFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for PipelineFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<Error> for PipelineFailure {
    fn from(error: Error) -> Self {
        PipelineFailure { error, partial: None }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct HashWriter(Sha256);

impl Write for HashWriter {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

/// Content hash of the cells, independent of input row order.
fn dataset_hash(dataset: &Dataset) -> Result<String> {
    let mut cells: Vec<_> = dataset.cells().collect();
    cells.sort_by(|a, b| {
        (&a.model_id, &a.run_id, &a.segment_id, &a.metric_id).cmp(&(&b.model_id, &b.run_id, &b.segment_id, &b.metric_id))
    });
    let mut w = HashWriter(Sha256::new());
    crate::ingest::write_long_csv(cells, &mut w)?;
    Ok(hex::encode(w.0.finalize()))
}

/// Loads the configured inputs.
pub fn load_dataset(config: &PipelineConfig) -> Result<Dataset> {
    let registry = config.registry.as_deref().map(Registry::from_json_file).transpose()?;
    let Some(data) = &config.data else {
        return Err(Error::Config("no data file given".into()));
    };
    let format = config.input_format.unwrap_or_else(|| InputFormat::from_path(data));
    load_long_table(data, format, registry, &config.ordering.mode())
}

/// Loads, analyzes and, when an output directory is configured, writes the
/// bundle. On failure, whatever was produced goes to `out_dir/quarantine`.
pub fn run_pipeline(config: &PipelineConfig) -> std::result::Result<ReportBundle, PipelineFailure> {
    config.validate()?;
    let dataset = load_dataset(config).map_err(|e| e.in_module("ingest", None, None))?;
    let outcome = analyze(dataset, config);
    let Some(dir) = &config.out_dir else {
        return outcome;
    };
    match outcome {
        Ok(bundle) => {
            write_documents(dir, &bundle.documents(config, None)?)?;
            Ok(bundle)
        }
        Err(failure) => {
            let quarantine = dir.join("quarantine");
            let partial = failure.partial.as_deref().cloned().unwrap_or_default();
            let mut docs = partial.documents(config, Some(&failure.error)).unwrap_or_default();
            docs.push(Document { file: "error.txt".into(), content: format!("{}\n", failure.error) });
            write_documents(&quarantine, &docs)?;
            Err(failure)
        }
    }
}

/// Writes documents in order through a single writer.
pub fn write_documents(dir: &Path, docs: &[Document]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for doc in docs {
        let path = dir.join(&doc.file);
        std::fs::write(&path, doc.content.as_bytes()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Re-renders a saved `tables.json` in other formats.
pub fn rerender(tables_json: &str, formats: &[OutputFormat], precision: usize) -> Result<Vec<Document>> {
    let tables: Vec<Table> =
        serde_json::from_str(tables_json).map_err(|e| Error::InvalidInput(format!("tables.json: {e}")))?;
    let mut docs = Vec::new();
    for table in &tables {
        for &format in formats {
            docs.push(Document {
                file: format!("{}.{}", table.name, format.extension()),
                content: render_table(table, format, precision)?,
            });
        }
    }
    Ok(docs)
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Runs the configured stages over an in-memory dataset.
pub fn analyze(dataset: Dataset, config: &PipelineConfig) -> std::result::Result<ReportBundle, PipelineFailure> {
    config.validate()?;
    let workers = pool(config.jobs)?;
    let mut bundle = ReportBundle { stages: config.stages.clone(), ..Default::default() };
    let outcome = workers.install(|| run_stages(dataset, config, &mut bundle));
    match outcome {
        Ok(()) => Ok(bundle),
        Err(error) => Err(PipelineFailure { error, partial: Some(Box::new(bundle)) }),
    }
}

struct MetricOutcome {
    decisions: Vec<ScreenDecision>,
    pooled: Option<f64>,
    results: Vec<ReliabilityResult>,
    undefined: Vec<UndefinedIcc>,
}

fn run_stages(dataset: Dataset, config: &PipelineConfig, bundle: &mut ReportBundle) -> Result<()> {
    let cfg = &config.thresholds;
    bundle.input_sha256 = dataset_hash(&dataset)?;
    let (dataset, exclusions) = if dataset.registry().is_some() {
        validate_against_registry(dataset).map_err(|e| e.in_module("validate", None, None))?
    } else {
        let report = ExclusionReport::from_dataset(&dataset);
        (dataset, report)
    };
    bundle.registry = dataset.registry().cloned();
    bundle.models = dataset.models().to_vec();
    bundle.n_runs = dataset.runs().len();
    bundle.n_segments = dataset.segments().len();
    bundle.exclusions = Some(exclusions);
    bundle.universe = match dataset.registry() {
        Some(reg) => reg.iter().map(|s| (s.metric_id.clone(), s.metric_class)).collect(),
        None => dataset.metrics().iter().map(|m| (m.clone(), MetricClass::Adaptive)).collect(),
    };
    if dataset.is_empty() {
        bundle.notices.push("no data: the input contains no measurement cells".into());
    }
    if !config.stages.contains(&Stage::Screen) {
        return Ok(());
    }
    let run_icc = config.stages.contains(&Stage::Study1);
    if run_icc && dataset.registry().is_none() && !dataset.is_empty() {
        return Err(Error::Config("Study 1 needs a metric registry for metric classes".into()));
    }

    let models = bundle.models.clone();
    let outcomes: Vec<MetricOutcome> = bundle
        .universe
        .par_iter()
        .map(|(metric, class)| -> Result<MetricOutcome> {
            let mut out = MetricOutcome { decisions: Vec::new(), pooled: None, results: Vec::new(), undefined: Vec::new() };
            let mut matrices = Vec::with_capacity(models.len());
            for model in &models {
                let matrix = dataset.pivot(model, metric).map_err(|e| e.in_module("screening", Some(model), Some(metric)))?;
                let decision = screen_metric(&matrix, cfg);
                if run_icc && decision.decision == ScreenOutcome::Kept {
                    match assess(&matrix, *class, config.icc_mode, cfg) {
                        Ok(r) => out.results.push(r),
                        Err(e) => match undefined_reason(&e) {
                            Some(reason) => out.undefined.push(UndefinedIcc {
                                model_id: model.clone(),
                                metric_id: metric.clone(),
                                reason: reason.into(),
                            }),
                            None => return Err(e.in_module("study1", Some(model), Some(metric))),
                        },
                    }
                }
                out.decisions.push(decision);
                matrices.push(matrix);
            }
            out.pooled = pooled_prevalence(&matrices.iter().collect::<Vec<_>>());
            Ok(out)
        })
        .collect::<Result<_>>()?;

    for ((metric, _), out) in bundle.universe.iter().zip(&outcomes) {
        let flagged = out.pooled.is_some_and(|p| p >= cfg.prevalence_cutoff);
        bundle.global_screening.push((metric.clone(), out.pooled, flagged));
    }
    // model-major order for the screening report
    for (mi, _) in models.iter().enumerate() {
        bundle.screening.extend(outcomes.iter().map(|o| o.decisions[mi].clone()));
    }
    if !run_icc {
        return Ok(());
    }
    for model in &models {
        for o in &outcomes {
            bundle.study1.extend(o.results.iter().filter(|r| &r.model_id == model).cloned());
            bundle.icc_undefined.extend(o.undefined.iter().filter(|u| &u.model_id == model).cloned());
        }
    }
    bundle.study1.sort_by(|a, b| {
        let ma = models.iter().position(|m| m == &a.model_id);
        let mb = models.iter().position(|m| m == &b.model_id);
        (ma, a.metric_class, &a.metric_id).cmp(&(mb, b.metric_class, &b.metric_id))
    });
    for r in &bundle.study1 {
        if bundle.decision(&r.model_id, &r.metric_id).map(|d| d.decision) != Some(ScreenOutcome::Kept) {
            return Err(Error::Invariant(format!(
                "screened slice {}/{} reached the ICC engine",
                r.model_id, r.metric_id
            )));
        }
    }
    reconcile(bundle)?;
    for model in &models {
        let results: Vec<ReliabilityResult> = bundle.study1.iter().filter(|r| &r.model_id == model).cloned().collect();
        let not_calculated = bundle.universe.len() - results.len();
        for which in IccKind::BOTH {
            let mut summary = study1_summary(&results, which, not_calculated)?;
            summary.model_id = Some(model.clone());
            bundle.summaries.push(summary);
        }
    }

    if !config.stages.contains(&Stage::Study2) {
        return Ok(());
    }
    if models.is_empty() {
        bundle.notices.push("Study 2 skipped: no models".into());
        return Ok(());
    }
    study2(config, bundle).map_err(|e| e.in_module("consistency", None, None))?;

    if !config.stages.contains(&Stage::Study3) {
        return Ok(());
    }
    study3(&dataset, config, bundle)
}

fn undefined_reason(e: &Error) -> Option<&'static str> {
    match e.root() {
        Error::Type(_) => Some("icc_undefined_non_numeric"),
        Error::DegenerateVariance(_) => Some("icc_undefined_degenerate_variance"),
        Error::InsufficientData { .. } => Some("icc_undefined_insufficient_data"),
        _ => None,
    }
}

fn reconcile(bundle: &mut ReportBundle) -> Result<()> {
    let universe = bundle.universe.len();
    for model in &bundle.models {
        let of_model = || bundle.screening.iter().filter(|d| &d.model_id == model);
        let count = |o: ScreenOutcome| of_model().filter(|d| d.decision == o).count();
        let not_calculated = count(ScreenOutcome::NotCalculated);
        let row = Reconciliation {
            model_id: model.clone(),
            universe,
            not_calculated,
            calculated: universe - not_calculated,
            screened_low_variance: count(ScreenOutcome::ScreenedLowVariance),
            screened_insufficient_n: count(ScreenOutcome::ScreenedInsufficientN),
            analyzed: bundle.study1.iter().filter(|r| &r.model_id == model).count(),
            icc_undefined: bundle.icc_undefined.iter().filter(|u| &u.model_id == model).count(),
        };
        row.check()?;
        bundle.reconciliation.push(row);
    }
    Ok(())
}

fn study2(config: &PipelineConfig, bundle: &mut ReportBundle) -> Result<()> {
    let models = bundle.models.clone();
    let rule = config.rule();
    for which in IccKind::BOTH {
        let table = build_consistency_records(&models, &bundle.study1, &bundle.universe, which, rule)?;
        let rt = if models.len() == 3 { rt_consistent_metrics(&table)? } else { consistently_excellent(&table) };
        match which {
            IccKind::Single => bundle.rt_single = Some(rt),
            IccKind::Average => bundle.rt_average = Some(rt),
        }
        bundle.consistency.push(table);
    }
    for model in &models {
        let single = consistency_distribution(&bundle.consistency[0], model)?;
        let average = consistency_distribution(&bundle.consistency[1], model)?;
        bundle.distributions.push((single, average));
    }
    for (i, a) in models.iter().enumerate() {
        for b in &models[i + 1..] {
            let ra: Vec<ReliabilityResult> = bundle.study1.iter().filter(|r| &r.model_id == a).cloned().collect();
            let rb: Vec<ReliabilityResult> = bundle.study1.iter().filter(|r| &r.model_id == b).cloned().collect();
            for which in IccKind::BOTH {
                let mut m = correspondence_matrix(&ra, &rb, which)?;
                m.model_a = a.clone();
                m.model_b = b.clone();
                bundle.correspondences.push(m);
            }
        }
    }
    Ok(())
}

fn study3(dataset: &Dataset, config: &PipelineConfig, bundle: &mut ReportBundle) -> Result<()> {
    let cfg = &config.thresholds;
    let pairs = model_pairs(&bundle.models).map_err(|e| e.in_module("agreement", None, None))?;
    let (single, average) = study3_eligibility(
        bundle.rt_single.as_deref().unwrap_or_default(),
        bundle.rt_average.as_deref().unwrap_or_default(),
    );
    for (track, set) in [(IccKind::Single, &single), (IccKind::Average, &average)] {
        if set.is_empty() {
            bundle.notices.push(format!("Study 3 {}: no eligible metrics, track skipped", track.as_str()));
        }
    }
    let union: Vec<String> = single.iter().chain(&average).cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let settings = AgreementSettings { range_population: config.range_population };
    let models = &bundle.models;

    let computed: Vec<(Vec<AgreementResult>, Vec<String>)> = union
        .par_iter()
        .map(|metric| -> Result<(Vec<AgreementResult>, Vec<String>)> {
            let mut results = Vec::with_capacity(3);
            let mut notices = Vec::new();
            for &(label, ia, ib) in &pairs {
                let ctx = |e: Error| e.in_module("agreement", Some(&models[ia]), Some(metric));
                let a = dataset.pivot(&models[ia], metric).map_err(ctx)?;
                let b = dataset.pivot(&models[ib], metric).map_err(ctx)?;
                match assess_pair(&a, &b, IccKind::Single, label, cfg, &settings) {
                    Ok(r) => {
                        if r.agreement_class.is_none() {
                            notices.push(format!("Study 3 pair {label} metric {metric}: incomparable, too many undefined entries"));
                        }
                        results.push(r);
                    }
                    Err(e @ (Error::InsufficientData { .. } | Error::DegenerateRange(_))) => {
                        notices.push(format!("Study 3 pair {label} metric {metric}: incomparable, {e}"));
                        results.push(AgreementResult {
                            track: IccKind::Single,
                            pair_label: label.to_string(),
                            model_a: models[ia].clone(),
                            model_b: models[ib].clone(),
                            metric_id: metric.clone(),
                            stat_kind: StatKind::for_kind(a.kind),
                            median: None,
                            trimmed_mean: None,
                            range: None,
                            nmae: None,
                            n_entries: 0,
                            n_undefined: 0,
                            agreement_class: None,
                        });
                    }
                    Err(e) => return Err(ctx(e)),
                }
            }
            Ok((results, notices))
        })
        .collect::<Result<_>>()?;

    let by_metric: HashMap<&str, &Vec<AgreementResult>> =
        union.iter().map(String::as_str).zip(computed.iter().map(|(r, _)| r)).collect();
    for (track, set) in [(IccKind::Single, &single), (IccKind::Average, &average)] {
        let mut track_results = Vec::new();
        for metric in set.iter() {
            for r in by_metric[metric.as_str()] {
                track_results.push(AgreementResult { track, ..r.clone() });
            }
        }
        check_eligibility(&track_results, &single, &average)?;
        bundle.rollups.push(a3p_rollup(track, &track_results)?);
        bundle.agreement.extend(track_results);
    }
    bundle.notices.extend(computed.into_iter().flat_map(|(_, n)| n));
    Ok(())
}
