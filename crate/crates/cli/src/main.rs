use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use retest_core::agreement::RangePopulation;
use retest_core::pipeline::{self, OrderingChoice, PipelineConfig, PipelineFailure, ReportBundle, Stage};
use retest_core::report::OutputFormat;
use retest_core::simulate::{gen_study_fixture, full_scale_manifest, standard_manifest, FixtureManifest};
use retest_core::{Error, IccMode, ThresholdConfig};

/// Test-retest reliability, cross-model consistency and agreement analysis.
#[derive(Debug, Parser)]
#[command(name = "retest", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ingest and validate against the registry.
    Validate(AnalysisArgs),
    /// Low-variance screening.
    Screen(AnalysisArgs),
    /// Per-model ICC(3,1) and ICC(3,k).
    Study1(AnalysisArgs),
    /// Cross-model consistency of reliability classes.
    Study2(AnalysisArgs),
    /// Cross-model agreement on the consistently reliable metrics.
    Study3(AnalysisArgs),
    /// Every stage.
    All(AnalysisArgs),
    /// Generate a synthetic dataset with known ground truth.
    Simulate(SimulateArgs),
    /// Re-render a saved tables.json in other formats.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum IccModeArg {
    Within,
    Residual,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OrderArg {
    FirstAppearance,
    Sorted,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RangeArg {
    Pooled,
    ModelA,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Standard,
    FullScale,
}

#[derive(Debug, Args)]
struct AnalysisArgs {
    /// Long-format measurements (.csv, or .jsonl/.ndjson).
    #[arg(long)]
    data: PathBuf,
    /// Metric registry (JSON array of metric specs).
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Threshold overrides (JSON object).
    #[arg(long)]
    thresholds: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = IccModeArg::Within)]
    icc_mode: IccModeArg,
    #[arg(long)]
    trim_count: Option<usize>,
    #[arg(long)]
    min_segments: Option<usize>,
    /// Without it, results are summarized on stdout only.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Comma-separated: csv, json, markdown.
    #[arg(long, value_delimiter = ',', default_value = "csv")]
    format: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Count classes one step apart as concordant.
    #[arg(long)]
    adjacent_class_tolerance: bool,
    /// Normalization range for nMAE.
    #[arg(long, value_enum, default_value_t = RangeArg::Pooled)]
    range_population: RangeArg,
    #[arg(long, value_enum, default_value_t = OrderArg::FirstAppearance)]
    order: OrderArg,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Decimal places in rendered tables.
    #[arg(long, default_value_t = 4)]
    precision: usize,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Preset::Standard)]
    preset: Preset,
    /// Fixture manifest; overrides --preset and --seed.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    thresholds: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// A tables.json file or the directory holding one.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "markdown")]
    format: Vec<String>,
    #[arg(long, default_value_t = 4)]
    precision: usize,
}

fn load_thresholds(path: Option<&Path>) -> Result<ThresholdConfig, Error> {
    match path {
        Some(p) => ThresholdConfig::from_json_file(p),
        None => Ok(ThresholdConfig::default()),
    }
}

fn parse_formats(raw: &[String]) -> Result<Vec<OutputFormat>, Error> {
    let mut formats = Vec::new();
    for f in raw {
        let f: OutputFormat = f.trim().parse()?;
        if !formats.contains(&f) {
            formats.push(f);
        }
    }
    Ok(formats)
}

fn pipeline_config(args: AnalysisArgs, through: Stage) -> Result<PipelineConfig, Error> {
    let mut thresholds = load_thresholds(args.thresholds.as_deref())?;
    if let Some(t) = args.trim_count {
        thresholds.trim_count = t;
    }
    if let Some(m) = args.min_segments {
        thresholds.min_segments = m;
    }
    let config = PipelineConfig {
        data: Some(args.data),
        input_format: None,
        registry: args.registry,
        thresholds,
        icc_mode: match args.icc_mode {
            IccModeArg::Within => IccMode::Within,
            IccModeArg::Residual => IccMode::Residual,
        },
        stages: through.through(),
        out_dir: args.out_dir,
        formats: parse_formats(&args.format)?,
        seed: args.seed,
        adjacent_class_tolerance: args.adjacent_class_tolerance,
        range_population: match args.range_population {
            RangeArg::Pooled => RangePopulation::Pooled,
            RangeArg::ModelA => RangePopulation::ModelAOnly,
        },
        ordering: match args.order {
            OrderArg::FirstAppearance => OrderingChoice::FirstAppearance,
            OrderArg::Sorted => OrderingChoice::Sorted,
        },
        jobs: args.jobs,
        precision: args.precision,
    };
    config.validate()?;
    Ok(config)
}

fn summarize(bundle: &ReportBundle, out_dir: Option<&Path>) {
    println!(
        "models: {} | runs: {} | segments: {} | metric universe: {}",
        bundle.models.len(),
        bundle.n_runs,
        bundle.n_segments,
        bundle.universe.len()
    );
    for r in &bundle.reconciliation {
        println!(
            "  {}: analyzed {}, screened {}, icc undefined {}, not calculated {}",
            r.model_id,
            r.analyzed,
            r.screened(),
            r.icc_undefined,
            r.not_calculated
        );
    }
    if let (Some(s), Some(a)) = (&bundle.rt_single, &bundle.rt_average) {
        println!("consistently excellent: {} (icc31), {} (icc3k)", s.len(), a.len());
    }
    if !bundle.agreement.is_empty() {
        println!("agreement results: {}", bundle.agreement.len());
    }
    for n in &bundle.notices {
        println!("notice: {n}");
    }
    if let Some(dir) = out_dir {
        println!("outputs written to {}", dir.display());
    }
}

fn run_analysis(args: AnalysisArgs, through: Stage) -> Result<()> {
    let config = pipeline_config(args, through)?;
    match pipeline::run_pipeline(&config) {
        Ok(bundle) => {
            summarize(&bundle, config.out_dir.as_deref());
            Ok(())
        }
        Err(PipelineFailure { error, partial }) => {
            if partial.is_some() {
                if let Some(dir) = &config.out_dir {
                    eprintln!("partial outputs written to {}", dir.join("quarantine").display());
                }
            }
            Err(error.into())
        }
    }
}

fn run_simulate(args: SimulateArgs) -> Result<()> {
    let cfg = load_thresholds(args.thresholds.as_deref())?;
    let manifest = match &args.manifest {
        Some(path) => FixtureManifest::from_json_file(path)?,
        None => match args.preset {
            Preset::Standard => standard_manifest(args.seed),
            Preset::FullScale => full_scale_manifest(args.seed),
        },
    };
    let fixture = gen_study_fixture(&manifest, &cfg)?;
    let paths = fixture.write_to(&args.out_dir)?;
    println!("data: {}", paths.data.display());
    println!("registry: {}", paths.registry.display());
    println!("truth: {}", paths.truth.display());
    println!("manifest: {}", paths.manifest.display());
    Ok(())
}

fn run_report(args: ReportArgs) -> Result<()> {
    let formats = parse_formats(&args.format)?;
    let path = if args.data.is_dir() { args.data.join("tables.json") } else { args.data.clone() };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let docs = pipeline::rerender(&text, &formats, args.precision)?;
    pipeline::write_documents(&args.out_dir, &docs)?;
    println!("{} documents written to {}", docs.len(), args.out_dir.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<Error>())
        .map_or(4, |e| e.category().exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(3) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::Validate(a) => run_analysis(a, Stage::Validate),
        Command::Screen(a) => run_analysis(a, Stage::Screen),
        Command::Study1(a) => run_analysis(a, Stage::Study1),
        Command::Study2(a) => run_analysis(a, Stage::Study2),
        Command::Study3(a) | Command::All(a) => run_analysis(a, Stage::Study3),
        Command::Simulate(a) => run_simulate(a),
        Command::Report(a) => run_report(a).context("report"),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
