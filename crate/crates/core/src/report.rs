//! Audit reports and their machine-readable serializations.
//!
//! JSON output has sorted keys and floats rounded to six decimals; CSV and
//! the plot-data TSV files print floats with exactly six decimals.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::domain::{AgentGender, BiasSource, Gender, Stereotype};
use crate::scoring::Direction;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report has no {0} scores")]
    MissingScore(String),
    #[error("report JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("report CSV: {0}")]
    Csv(String),
}

fn round6(x: f64) -> f64 {
    let r = (x * 1e6).round() / 1e6;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn ser_f64<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(round6(*x))
}

fn ser_map<S: Serializer>(m: &BTreeMap<String, f64>, s: S) -> Result<S::Ok, S::Error> {
    s.collect_map(m.iter().map(|(k, v)| (k, round6(*v))))
}

fn fixed6(x: f64) -> String {
    format!("{:.6}", round6(x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub backend_id: String,
    /// Keyed by `text_only`, `vision_language`, `vision_language/no_image`.
    pub model_ids: BTreeMap<String, String>,
    pub no_image_mechanism: String,
    /// Probability floor applied before every logarithm (not rounded).
    pub clamp_floor: f64,
    /// Latest retrieval time among the records behind the report.
    pub collected_at: Option<DateTime<Utc>>,
    pub sources: Vec<BiasSource>,
    pub agents: BTreeMap<AgentGender, String>,
}

/// Per-gender association scores and the bias score for one
/// (entity, source) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub entity: String,
    pub source: BiasSource,
    #[serde(serialize_with = "ser_f64")]
    pub s_male: f64,
    #[serde(serialize_with = "ser_f64")]
    pub s_female: f64,
    #[serde(serialize_with = "ser_f64")]
    pub bias: f64,
    pub direction: Direction,
    pub stereotype: Option<Stereotype>,
}

impl ScoreRow {
    pub fn score(&self, gender: Gender) -> f64 {
        match gender {
            Gender::Male => self.s_male,
            Gender::Female => self.s_female,
        }
    }
}

/// Imageless gendered-caption bias under both models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageBiasRow {
    pub entity: String,
    #[serde(serialize_with = "ser_f64")]
    pub b_vision_language: f64,
    #[serde(serialize_with = "ser_f64")]
    pub b_text_only: f64,
    #[serde(serialize_with = "ser_f64")]
    pub delta: f64,
    pub stereotype: Option<Stereotype>,
}

/// Top candidate for one neutral-caption image probe, compared with the
/// entity the image actually depicts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePrediction {
    pub image_id: String,
    pub agent_gender: Gender,
    pub caption: String,
    pub depicted: String,
    pub predicted: String,
    #[serde(serialize_with = "ser_map")]
    pub probabilities: BTreeMap<String, f64>,
    pub aligned: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SkipEntry {
    pub entity: String,
    pub source: BiasSource,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub metadata: ReportMetadata,
    pub rows: Vec<ScoreRow>,
    pub language_bias: Vec<LanguageBiasRow>,
    pub image_predictions: Vec<ImagePrediction>,
    pub skipped: Vec<SkipEntry>,
    /// Share of labelled entities whose bias sign matches the label, per
    /// source (`language_direct` for the imageless language bias).
    #[serde(serialize_with = "ser_map")]
    pub alignment: BTreeMap<String, f64>,
}

impl AuditReport {
    /// Sorts rows by (source, entity) and skips likewise.
    pub fn normalize(&mut self) {
        self.rows
            .sort_by(|a, b| (a.source, &a.entity).cmp(&(b.source, &b.entity)));
        self.skipped.sort();
        self.language_bias.sort_by(|a, b| a.entity.cmp(&b.entity));
    }

    pub fn row(&self, entity: &str, source: BiasSource) -> Option<&ScoreRow> {
        self.rows
            .iter()
            .find(|r| r.entity == entity && r.source == source)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, ReportError> {
        Ok(serde_json::from_slice(bytes)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

pub const CSV_HEADER: [&str; 7] = [
    "source",
    "entity",
    "s_male",
    "s_female",
    "bias",
    "direction",
    "stereotype",
];

pub fn emit_report(report: &AuditReport, format: ReportFormat) -> Result<Vec<u8>, ReportError> {
    let mut report = report.clone();
    report.normalize();
    match format {
        ReportFormat::Json => {
            // Going through Value sorts every object's keys.
            let value = serde_json::to_value(&report)?;
            let mut out = serde_json::to_vec_pretty(&value)?;
            out.push(b'\n');
            Ok(out)
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let csv_err = |e: csv::Error| ReportError::Csv(e.to_string());
            w.write_record(CSV_HEADER).map_err(csv_err)?;
            for r in &report.rows {
                w.write_record([
                    r.source.as_str(),
                    &r.entity,
                    &fixed6(r.s_male),
                    &fixed6(r.s_female),
                    &fixed6(r.bias),
                    r.direction.as_str(),
                    r.stereotype.map(Stereotype::as_str).unwrap_or(""),
                ])
                .map_err(csv_err)?;
            }
            w.into_inner().map_err(|e| ReportError::Csv(e.to_string()))
        }
    }
}

/// Writes image predictions as CSV.
pub fn emit_predictions_csv(report: &AuditReport) -> Result<Vec<u8>, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| ReportError::Csv(e.to_string());
    w.write_record([
        "image_id",
        "agent_gender",
        "depicted",
        "predicted",
        "p_depicted",
        "p_predicted",
        "aligned",
    ])
    .map_err(csv_err)?;
    for p in &report.image_predictions {
        let prob = |c: &str| {
            p.probabilities
                .get(c)
                .copied()
                .map(fixed6)
                .unwrap_or_default()
        };
        w.write_record([
            p.image_id.as_str(),
            p.agent_gender.as_str(),
            &p.depicted,
            &p.predicted,
            &prob(&p.depicted),
            &prob(&p.predicted),
            if p.aligned { "true" } else { "false" },
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| ReportError::Csv(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotFigure {
    /// S(E, m) and S(E, f) for one source, one row per (entity, gender).
    PerGenderScores(BiasSource),
    /// Vision-language imageless language bias per entity, with labels.
    BiasByEntity,
    /// Vision-language minus text-only imageless language bias.
    VlMinusLDelta,
}

impl PlotFigure {
    pub fn file_stem(self) -> String {
        match self {
            PlotFigure::PerGenderScores(s) => format!("per_gender_scores_{s}"),
            PlotFigure::BiasByEntity => "bias_by_entity".into(),
            PlotFigure::VlMinusLDelta => "vl_minus_l_delta".into(),
        }
    }
}

fn label(s: Option<Stereotype>) -> &'static str {
    s.map(Stereotype::as_str).unwrap_or("none")
}

/// Tab-separated plot data for `figure`.
pub fn emit_plot_data(report: &AuditReport, figure: PlotFigure) -> Result<String, ReportError> {
    let mut report = report.clone();
    report.normalize();
    let mut out = String::new();
    match figure {
        PlotFigure::PerGenderScores(source) => {
            let rows: Vec<_> = report.rows.iter().filter(|r| r.source == source).collect();
            if rows.is_empty() {
                return Err(ReportError::MissingScore(source.to_string()));
            }
            out.push_str("entity\tgender\tscore\tstereotype\n");
            for r in rows {
                for g in Gender::BOTH {
                    let _ = writeln!(
                        out,
                        "{}\t{g}\t{}\t{}",
                        r.entity,
                        fixed6(r.score(g)),
                        label(r.stereotype)
                    );
                }
            }
        }
        PlotFigure::BiasByEntity => {
            if report.language_bias.is_empty() {
                return Err(ReportError::MissingScore("imageless language bias".into()));
            }
            out.push_str("entity\tbias\tdirection\tstereotype\n");
            for r in &report.language_bias {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}",
                    r.entity,
                    fixed6(r.b_vision_language),
                    Direction::of(r.b_vision_language),
                    label(r.stereotype)
                );
            }
        }
        PlotFigure::VlMinusLDelta => {
            if report.language_bias.is_empty() {
                return Err(ReportError::MissingScore("imageless language bias".into()));
            }
            out.push_str("entity\tb_vision_language\tb_text_only\tdelta\tstereotype\n");
            for r in &report.language_bias {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}",
                    r.entity,
                    fixed6(r.b_vision_language),
                    fixed6(r.b_text_only),
                    fixed6(r.delta),
                    label(r.stereotype)
                );
            }
        }
    }
    Ok(out)
}
