mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use retest_core::ingest::{read_long_table, InputFormat, OrderingMode};
use retest_core::pipeline::{analyze, run_pipeline, OrderingChoice, PipelineConfig, Stage};
use retest_core::report::OutputFormat;
use retest_core::simulate::{compose_manifest, gen_study_fixture, full_scale_manifest, standard_manifest, Template};
use retest_core::{Dataset, ErrorCategory, IccKind, ThresholdConfig};

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.path().is_file())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
        .collect()
}

#[test]
fn full_scale_fixture_completes_and_reconciles() {
    let fixture = gen_study_fixture(&full_scale_manifest(11), &ThresholdConfig::default()).unwrap();
    let dataset = fixture.dataset().unwrap();
    assert_eq!(dataset.segments().len(), 552);
    assert_eq!(dataset.metrics().len(), 213);

    let start = Instant::now();
    let bundle = analyze(dataset, &PipelineConfig::default()).unwrap();
    let docs = bundle.documents(&PipelineConfig::default(), None).unwrap();
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    assert!(!docs.is_empty());

    let mismatches = common::truth_mismatches(&fixture, &bundle);
    assert!(mismatches.is_empty(), "{mismatches:#?}");
    assert_eq!(bundle.rt_single.as_ref().unwrap().len(), 31);
    assert_eq!(bundle.rt_average.as_ref().unwrap().len(), 89);
    for r in &bundle.reconciliation {
        assert_eq!(r.universe, 213);
        assert_eq!(r.calculated + r.not_calculated, 213);
        assert_eq!(r.screened() + r.analyzed + r.icc_undefined, r.calculated);
    }
    for track in IccKind::BOTH {
        let rollup = bundle.rollup(track).unwrap();
        let eligible = match track {
            IccKind::Single => 31,
            IccKind::Average => 89,
        };
        for p in 0..3 {
            assert_eq!(rollup.rows.iter().map(|r| r.per_pair[p]).sum::<usize>(), eligible);
        }
    }
}

#[test]
fn distribution_and_consistency_totals_match_the_universe() {
    let fixture = gen_study_fixture(&standard_manifest(3), &ThresholdConfig::default()).unwrap();
    let bundle = analyze(fixture.dataset().unwrap(), &PipelineConfig::default()).unwrap();
    let universe = bundle.universe.len() as i64;
    for table in bundle.tables() {
        if table.name == "study1_distribution" || table.name.starts_with("consistency_distribution_") {
            let total = table.row_by_label("Total").unwrap();
            let mut checked = 0;
            for (col, cell) in table.columns.iter().zip(total) {
                if col.ends_with(" n") || col.ends_with(" Total") {
                    assert_eq!(*cell, retest_core::report::Cell::Int(universe), "{} {col}", table.name);
                    checked += 1;
                }
            }
            assert!(checked > 0, "{}", table.name);
        }
    }
}

#[test]
fn failure_writes_partial_outputs_to_quarantine() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = compose_manifest(5, 60, 4, &[(Template::ExcellentAgree, 3), (Template::Poor, 2)]);
    let mut fixture = gen_study_fixture(&manifest, &ThresholdConfig::default()).unwrap();
    fixture.cells.retain(|c| c.model_id != "gamma");
    let paths = fixture.write_to(&tmp.path().join("fx")).unwrap();
    let out = tmp.path().join("out");
    let config = PipelineConfig {
        data: Some(paths.data),
        registry: Some(paths.registry),
        out_dir: Some(out.clone()),
        ..Default::default()
    };
    let failure = run_pipeline(&config).unwrap_err();
    assert_eq!(failure.error.category(), ErrorCategory::Config);
    assert!(failure.error.to_string().contains("agreement"), "{}", failure.error);
    let quarantined = files(&out.join("quarantine"));
    assert!(quarantined.contains_key("error.txt"));
    assert!(quarantined.contains_key("consistency_icc31.csv"));
    let manifest: serde_json::Value = serde_json::from_slice(&quarantined["manifest.json"]).unwrap();
    assert_eq!(manifest["status"], "failed");
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn empty_input_succeeds_with_notice() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("empty.csv");
    std::fs::write(&data, "model_id,run_id,segment_id,metric_id,value,status\n").unwrap();
    let out = tmp.path().join("out");
    let config = PipelineConfig { data: Some(data), out_dir: Some(out.clone()), ..Default::default() };
    let bundle = run_pipeline(&config).unwrap();
    assert!(bundle.notices.iter().any(|n| n.contains("no data")));
    let written = files(&out);
    for name in ["manifest.json", "agreement_detail.csv", "agreement_rollup.csv", "study1_results.csv"] {
        assert!(written.contains_key(name), "{name} missing");
    }
}

#[test]
fn sorted_ordering_is_independent_of_row_order() {
    let fixture = gen_study_fixture(
        &compose_manifest(9, 40, 4, &[(Template::ExcellentSpread, 2), (Template::BinaryAgree, 2), (Template::Moderate, 2)]),
        &ThresholdConfig::default(),
    )
    .unwrap();
    let mut text = Vec::new();
    retest_core::ingest::write_long_csv(fixture.cells.clone(), &mut text).unwrap();
    let text = String::from_utf8(text).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let header = lines.remove(0);
    lines.reverse();
    let reversed = format!("{header}\n{}\n", lines.join("\n"));

    let load = |t: &str| -> Dataset {
        read_long_table(t.as_bytes(), Path::new("x.csv"), InputFormat::Csv, Some(fixture.registry.clone()), &OrderingMode::Sorted)
            .unwrap()
    };
    let config = PipelineConfig {
        ordering: OrderingChoice::Sorted,
        formats: vec![OutputFormat::Csv, OutputFormat::Json],
        ..Default::default()
    };
    let a = analyze(load(&text), &config).unwrap().documents(&config, None).unwrap();
    let b = analyze(load(&reversed), &config).unwrap().documents(&config, None).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.file, y.file);
        assert!(x.content == y.content, "{} differs", x.file);
    }
}

#[test]
fn adjacent_class_tolerance_drops_the_unreachable_notice() {
    let fixture = gen_study_fixture(&standard_manifest(4), &ThresholdConfig::default()).unwrap();
    let config = PipelineConfig { adjacent_class_tolerance: true, stages: Stage::Study2.through(), ..Default::default() };
    let bundle = analyze(fixture.dataset().unwrap(), &config).unwrap();
    let tables = bundle.tables();
    let dist = tables.iter().find(|t| t.name.starts_with("consistency_distribution_")).unwrap();
    assert!(dist.notes.is_empty());
    let strict = analyze(fixture.dataset().unwrap(), &PipelineConfig { stages: Stage::Study2.through(), ..Default::default() }).unwrap();
    let loose_pairs: usize = bundle.consistency[0].records.iter().map(|r| r.concordant_pairs).sum();
    let strict_pairs: usize = strict.consistency[0].records.iter().map(|r| r.concordant_pairs).sum();
    assert!(loose_pairs >= strict_pairs);
}

#[test]
fn residual_mode_is_recorded_and_changes_icc() {
    let fixture = gen_study_fixture(&compose_manifest(2, 60, 4, &[(Template::Moderate, 3)]), &ThresholdConfig::default()).unwrap();
    let within = analyze(fixture.dataset().unwrap(), &PipelineConfig { stages: Stage::Study1.through(), ..Default::default() }).unwrap();
    let config = PipelineConfig { icc_mode: retest_core::IccMode::Residual, stages: Stage::Study1.through(), ..Default::default() };
    let residual = analyze(fixture.dataset().unwrap(), &config).unwrap();
    assert_eq!(within.study1.len(), residual.study1.len());
    assert!(within.study1.iter().zip(&residual.study1).any(|(w, r)| w.icc31 != r.icc31));
    let docs = residual.documents(&config, None).unwrap();
    let manifest = docs.iter().find(|d| d.file == "manifest.json").unwrap();
    assert!(manifest.content.contains("\"icc_mode\": \"residual\""));
}
