//! The `mmbias` command line: `audit`, `plan` and `survey`.

pub mod config;

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use mmbias_core::backend::{
    load_synthetic_backend, HttpBackend, MaskedLm, ProbabilityCache, Prober,
};
use mmbias_core::corpus::{aggregate_survey, load_image_manifest, load_survey, StereotypeLabel};
use mmbias_core::plan::build_probe_plan;
use mmbias_core::report::{
    emit_plot_data, emit_predictions_csv, emit_report, PlotFigure, ReportFormat,
};
use mmbias_core::{run_audit, AuditInputs, AuditRun, BiasSource, Catalog, ImageManifest};

use config::{
    parse_sources, AuditConfig, BackendChoice, ConfigError, ConfigLayer, BACKEND_URL_ENV,
};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FATAL: u8 = 1;
pub const EXIT_PARTIAL: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "mmbias",
    version,
    about = "Gender-association bias audits for masked (vision-)language models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Probe the backend, score every entity and write reports.
    Audit(AuditArgs),
    /// Print the probes an audit would send, without contacting a backend.
    Plan(AuditArgs),
    /// Aggregate a stereotype survey into majority labels.
    Survey(SurveyArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct AuditArgs {
    /// `key = value` config file; flags override its settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model server base URL (defaults to $MMBIAS_BACKEND_URL).
    #[arg(long)]
    pub backend_url: Option<String>,
    /// Score against a synthetic probability table instead of a server.
    #[arg(long)]
    pub synthetic_table: Option<PathBuf>,
    /// Comma-separated bias sources: pretraining, language, visual.
    #[arg(long, value_parser = parse_source_list)]
    pub sources: Option<SourceList>,
    /// Image manifest (`entity, m|f, image_id, path`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Template and entity list.
    #[arg(long)]
    pub entities: Option<PathBuf>,
    /// Stereotype survey; its majority labels replace catalog labels.
    #[arg(long)]
    pub survey: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Maximum in-flight backend requests.
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Probability cache file (default: <out>/cache.jsonl).
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Do not read or write the probability cache.
    #[arg(long, conflicts_with = "cache")]
    pub no_cache: bool,
}

/// A parsed `--sources` value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceList(pub Vec<BiasSource>);

fn parse_source_list(value: &str) -> Result<SourceList, String> {
    parse_sources(value).map(SourceList)
}

#[derive(Debug, Clone, Args)]
pub struct SurveyArgs {
    /// Survey responses (`annotator_id, entity, label`).
    pub survey: PathBuf,
    /// Where to write the label table; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Expected number of annotators; checked against the file.
    #[arg(long)]
    pub annotators: Option<usize>,
}

impl AuditArgs {
    fn layer(&self) -> ConfigLayer {
        ConfigLayer {
            backend_url: self.backend_url.clone(),
            synthetic_table: self.synthetic_table.clone(),
            entities: self.entities.clone(),
            manifest: self.manifest.clone(),
            survey: self.survey.clone(),
            sources: self.sources.clone().map(|s| s.0),
            out: self.out.clone(),
            parallelism: self.parallelism,
            cache: self.cache.clone(),
            no_cache: self.no_cache,
            ..ConfigLayer::default()
        }
    }

    /// Merges flags over the config file, then falls back to the
    /// environment for the backend URL.
    pub fn resolve(&self) -> Result<AuditConfig, CliError> {
        let file = match &self.config {
            Some(path) => ConfigLayer::load(path)?,
            None => ConfigLayer::default(),
        };
        let env_url = std::env::var(BACKEND_URL_ENV).ok();
        Ok(AuditConfig::resolve(self.layer().over(file), env_url)?)
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{}: {message}", path.display())]
    Input { path: PathBuf, message: String },
    #[error(
        "no backend configured: pass --backend-url or --synthetic-table, or set {BACKEND_URL_ENV}"
    )]
    NoBackend,
    #[error(transparent)]
    Backend(#[from] mmbias_core::backend::BackendError),
    #[error(transparent)]
    Audit(#[from] mmbias_core::AuditError),
    #[error(transparent)]
    Plan(#[from] mmbias_core::plan::PlanError),
    #[error(transparent)]
    Report(#[from] mmbias_core::report::ReportError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn input_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Input {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Catalog, manifest and survey labels named by a config.
pub struct AuditData {
    pub catalog: Catalog,
    pub manifest: Option<ImageManifest>,
    pub labels: Vec<StereotypeLabel>,
}

impl AuditData {
    pub fn load(config: &AuditConfig) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(&config.entities)
            .map_err(|e| input_err(&config.entities, e))?;
        let catalog = Catalog::parse(&text, config.agents.clone())
            .map_err(|e| input_err(&config.entities, e))?;
        let manifest = config
            .manifest
            .as_ref()
            .map(|p| load_image_manifest(p).map_err(|e| input_err(p, e)))
            .transpose()?;
        let labels = match &config.survey {
            Some(p) => survey_labels(p, None)?,
            None => Vec::new(),
        };
        Ok(Self {
            catalog,
            manifest,
            labels,
        })
    }
}

fn survey_labels(path: &Path, annotators: Option<usize>) -> Result<Vec<StereotypeLabel>, CliError> {
    let responses = load_survey(path).map_err(|e| input_err(path, e))?;
    let found: BTreeSet<&str> = responses.iter().map(|r| r.annotator_id.as_str()).collect();
    aggregate_survey(&responses, annotators.unwrap_or(found.len())).map_err(|e| input_err(path, e))
}

/// Probe counts for a config, computed without touching a backend.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanSummary {
    pub per_source: Vec<(BiasSource, usize)>,
    pub total: usize,
    pub skipped: Vec<String>,
}

impl fmt::Display for PlanSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (source, n) in &self.per_source {
            writeln!(f, "{source}\t{n}")?;
        }
        writeln!(f, "total\t{}", self.total)
    }
}

pub fn cmd_plan(config: &AuditConfig) -> Result<PlanSummary, CliError> {
    let data = AuditData::load(config)?;
    let plan = build_probe_plan(&data.catalog, data.manifest.as_ref(), &config.sources)?;
    Ok(PlanSummary {
        per_source: plan.per_source.iter().map(|(s, n)| (*s, *n)).collect(),
        total: plan.len(),
        skipped: plan
            .skipped
            .iter()
            .map(|s| format!("{} ({}): {}", s.entity, s.source, s.reason))
            .collect(),
    })
}

pub fn open_backend(choice: &BackendChoice) -> Result<Box<dyn MaskedLm>, CliError> {
    Ok(match choice {
        BackendChoice::Http(url) => Box::new(HttpBackend::new(url)?),
        BackendChoice::Synthetic(path) => {
            Box::new(load_synthetic_backend(path).map_err(|e| input_err(path, e))?)
        }
    })
}

#[derive(Debug)]
pub struct AuditOutcome {
    pub run: AuditRun,
    pub files: Vec<PathBuf>,
}

impl AuditOutcome {
    pub fn exit_code(&self) -> u8 {
        if self.run.is_partial() {
            EXIT_PARTIAL
        } else {
            EXIT_OK
        }
    }
}

/// Runs an audit and writes `report.json`, `report.csv`, `predictions.csv`
/// (when visual scores were requested) and plot tables under `plots/`.
pub fn cmd_audit(config: &AuditConfig) -> Result<AuditOutcome, CliError> {
    let backend = config.backend.as_ref().ok_or(CliError::NoBackend)?;
    let data = AuditData::load(config)?;
    std::fs::create_dir_all(&config.out).map_err(|source| CliError::Io {
        path: config.out.clone(),
        source,
    })?;

    let mut prober =
        Prober::from_boxed(open_backend(backend)?).with_parallelism(config.parallelism);
    if let Some(path) = &config.cache {
        let cache = ProbabilityCache::open(path).map_err(|e| input_err(path, e))?;
        prober = prober.with_cache(cache);
    }
    let run = run_audit(
        AuditInputs {
            catalog: &data.catalog,
            manifest: data.manifest.as_ref(),
            sources: &config.sources,
            labels: &data.labels,
        },
        &prober,
    )?;

    let mut files = Vec::new();
    let mut emit = |name: &str, bytes: &[u8]| -> Result<(), CliError> {
        let path = config.out.join(name);
        write_file(&path, bytes)?;
        files.push(path);
        Ok(())
    };
    emit(
        "report.json",
        &emit_report(&run.report, ReportFormat::Json)?,
    )?;
    emit("report.csv", &emit_report(&run.report, ReportFormat::Csv)?)?;
    if config.sources.contains(&BiasSource::Visual) {
        emit("predictions.csv", &emit_predictions_csv(&run.report)?)?;
    }

    let mut figures: Vec<PlotFigure> = run
        .report
        .metadata
        .sources
        .iter()
        .map(|s| PlotFigure::PerGenderScores(*s))
        .collect();
    figures.extend([PlotFigure::BiasByEntity, PlotFigure::VlMinusLDelta]);
    let plots = config.out.join("plots");
    for figure in figures {
        // Figures without data (every entity skipped, or no imageless
        // probes requested) are left out.
        let Ok(table) = emit_plot_data(&run.report, figure) else {
            continue;
        };
        std::fs::create_dir_all(&plots).map_err(|source| CliError::Io {
            path: plots.clone(),
            source,
        })?;
        let path = plots.join(format!("{}.tsv", figure.file_stem()));
        write_file(&path, table.as_bytes())?;
        files.push(path);
    }
    Ok(AuditOutcome { run, files })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurveyOutcome {
    pub labels: Vec<StereotypeLabel>,
    pub table: String,
}

/// Aggregates `args.survey` and renders the retained labels as
/// `entity<TAB>label<TAB>agreement`.
pub fn cmd_survey(args: &SurveyArgs) -> Result<SurveyOutcome, CliError> {
    let labels = survey_labels(&args.survey, args.annotators)?;
    let mut table = String::from("entity\tlabel\tagreement\n");
    for l in &labels {
        table.push_str(&format!(
            "{}\t{}\t{:.6}\n",
            l.entity,
            l.label.as_str(),
            l.agreement
        ));
    }
    if let Some(out) = &args.out {
        write_file(out, table.as_bytes())?;
    }
    Ok(SurveyOutcome { labels, table })
}
