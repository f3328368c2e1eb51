//! End-to-end audit: plan, collect probabilities, score, assemble a report.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use thiserror::Error;

use crate::backend::{BackendError, ModelTag, ProbeQuery, Prober, PROBABILITY_FLOOR};
use crate::corpus::{alignment_rate, StereotypeLabel};
use crate::domain::{
    AgentGender, BiasSource, Catalog, Entity, Gender, ImageManifest, ImageRef, Stereotype,
};
use crate::plan::{build_probe_plan, PlanError, ProbePlan};
use crate::report::{
    AuditReport, ImagePrediction, LanguageBiasRow, ReportMetadata, ScoreRow, SkipEntry,
};
use crate::scoring::{bias_score, AssociationScore, BiasScore, RecordIndex, ScoreError, Scorer};

#[derive(Debug, Error)]
pub enum AuditError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Backend(BackendError),
}

#[derive(Debug, Clone, Copy)]
pub struct AuditInputs<'a> {
    pub catalog: &'a Catalog,
    pub manifest: Option<&'a ImageManifest>,
    pub sources: &'a [BiasSource],
    /// Survey-derived labels; they take precedence over catalog labels.
    pub labels: &'a [StereotypeLabel],
}

#[derive(Debug)]
pub struct AuditRun {
    pub report: AuditReport,
    pub plan: ProbePlan,
    /// Wire requests issued by this run (cache hits excluded).
    pub wire_requests: usize,
}

impl AuditRun {
    pub fn is_partial(&self) -> bool {
        !self.report.skipped.is_empty()
    }
}

/// Runs the plan through `prober`, retrying probes that hit a vocabulary
/// miss without the missed candidates, then scores every (entity, source)
/// pair. Pairs that cannot be scored become skip entries.
pub fn run_audit(inputs: AuditInputs<'_>, prober: &Prober) -> Result<AuditRun, AuditError> {
    let AuditInputs {
        catalog,
        manifest,
        sources,
        labels,
    } = inputs;
    let start_requests = prober.wire_requests();
    let plan = build_probe_plan(catalog, manifest, sources)?;
    let mut sources = sources.to_vec();
    sources.sort();
    sources.dedup();

    let mut batch = prober.query_batch(&plan.queries).results;

    let mut missed: BTreeSet<String> = BTreeSet::new();
    for result in &batch {
        match result {
            Err(BackendError::Unreachable(msg)) => {
                return Err(AuditError::Backend(BackendError::Unreachable(msg.clone())))
            }
            Err(e) => missed.extend(e.missed_candidates().into_iter().flatten().cloned()),
            Ok(_) => {}
        }
    }
    if !missed.is_empty() {
        let retry: Vec<(usize, ProbeQuery)> = batch
            .iter()
            .enumerate()
            .filter(|(_, r)| matches!(r, Err(e) if e.missed_candidates().is_some()))
            .filter_map(|(i, _)| {
                let mut q = plan.queries[i].clone();
                q.candidates.retain(|c| !missed.contains(c));
                (!q.candidates.is_empty()).then_some((i, q))
            })
            .collect();
        let probes: Vec<_> = retry.iter().map(|(_, q)| q.clone()).collect();
        let again = prober.query_batch(&probes).results;
        for ((i, _), result) in retry.into_iter().zip(again) {
            batch[i] = result;
        }
    }
    let failures: HashMap<_, _> = batch
        .iter()
        .enumerate()
        .filter_map(|(i, r)| {
            r.as_ref()
                .err()
                .map(|e| (plan.queries[i].key(), e.to_string()))
        })
        .collect();
    let index = RecordIndex::new(batch.iter().filter_map(|r| r.as_ref().ok()));
    let scorer = Scorer::new(catalog, &index);

    let label_of = |entity: &Entity| -> Option<Stereotype> {
        labels
            .iter()
            .find(|l| l.entity == entity.name())
            .map(|l| l.label)
            .or(entity.stereotype)
    };

    let mut rows = Vec::new();
    let mut skipped: Vec<SkipEntry> = plan
        .skipped
        .iter()
        .map(|s| SkipEntry {
            entity: s.entity.clone(),
            source: s.source,
            reason: s.reason.clone(),
        })
        .collect();
    let plan_skipped: BTreeSet<(String, BiasSource)> = plan
        .skipped
        .iter()
        .map(|s| (s.entity.clone(), s.source))
        .collect();
    let explain = |err: ScoreError| -> String {
        if let ScoreError::MissingTerm { caption, image, .. } = &err {
            for model in [ModelTag::VisionLanguage, ModelTag::TextOnly] {
                let key = crate::backend::ProbeKey {
                    model,
                    caption: caption.clone(),
                    image: image.clone(),
                };
                if let Some(reason) = failures.get(&key) {
                    return format!("{err}: {reason}");
                }
            }
        }
        err.to_string()
    };

    for entity in catalog.entities() {
        for &source in &sources {
            if plan_skipped.contains(&(entity.name().to_owned(), source)) {
                continue;
            }
            if missed.contains(entity.name()) {
                skipped.push(SkipEntry {
                    entity: entity.name().to_owned(),
                    source,
                    reason: format!("vocabulary miss: `{}` is not a single token", entity.name()),
                });
                continue;
            }
            let images = manifest.and_then(|m| m.images(entity.name()));
            let per_gender = |g: Gender| -> Result<AssociationScore, ScoreError> {
                match source {
                    BiasSource::Pretraining => scorer.pretraining_shift(entity, g),
                    BiasSource::Language => {
                        let all: Vec<ImageRef> = images
                            .map(|i| i.all().cloned().collect())
                            .unwrap_or_default();
                        scorer.language_association(entity, g, &all)
                    }
                    BiasSource::Visual => {
                        let subset = images.map(|i| i.of_gender(g)).unwrap_or_default();
                        scorer.visual_association(entity, g, subset)
                    }
                }
            };
            let scored = per_gender(Gender::Male).and_then(|m| {
                let f = per_gender(Gender::Female)?;
                let b = bias_score(&f, &m)?;
                Ok((m, f, b))
            });
            match scored {
                Ok((m, f, b)) => rows.push(ScoreRow {
                    entity: entity.name().to_owned(),
                    source,
                    s_male: m.value,
                    s_female: f.value,
                    bias: b.value,
                    direction: b.direction,
                    stereotype: label_of(entity),
                }),
                Err(e) => skipped.push(SkipEntry {
                    entity: entity.name().to_owned(),
                    source,
                    reason: explain(e),
                }),
            }
        }
    }

    let mut language_bias = Vec::new();
    if sources.contains(&BiasSource::Pretraining) {
        for entity in catalog.entities() {
            if missed.contains(entity.name()) {
                continue;
            }
            let vl = scorer.language_bias_direct(entity, ModelTag::VisionLanguage);
            let l = scorer.language_bias_direct(entity, ModelTag::TextOnly);
            if let (Ok(vl), Ok(l)) = (vl, l) {
                language_bias.push(LanguageBiasRow {
                    entity: entity.name().to_owned(),
                    b_vision_language: vl.value,
                    b_text_only: l.value,
                    delta: vl.value - l.value,
                    stereotype: label_of(entity),
                });
            }
        }
    }

    let mut image_predictions = Vec::new();
    if sources.contains(&BiasSource::Visual) {
        for q in &plan.queries {
            let Some(image) = &q.image else { continue };
            if q.agent != AgentGender::Neutral || q.candidates.len() < 2 {
                continue;
            }
            let Some(record) = index.get(q.model, &q.caption, Some(&image.id)) else {
                continue;
            };
            if record.probabilities.len() < 2 {
                continue;
            }
            let Some((predicted, _)) = record.argmax() else {
                continue;
            };
            image_predictions.push(ImagePrediction {
                image_id: image.id.clone(),
                agent_gender: image.agent_gender,
                caption: q.caption.clone(),
                depicted: image.entity.clone(),
                predicted: predicted.to_owned(),
                probabilities: record.probabilities.clone(),
                aligned: predicted == image.entity,
            });
        }
    }

    let mut alignment = BTreeMap::new();
    let all_labels: Vec<StereotypeLabel> = catalog
        .entities()
        .iter()
        .filter_map(|e| {
            label_of(e).map(|label| StereotypeLabel {
                entity: e.name().to_owned(),
                label,
                agreement: 1.0,
            })
        })
        .collect();
    let mut align = |key: String, scores: Vec<BiasScore>| {
        let present: BTreeSet<&str> = scores.iter().map(|b| b.entity.as_str()).collect();
        let subset: Vec<_> = all_labels
            .iter()
            .filter(|l| present.contains(l.entity.as_str()))
            .cloned()
            .collect();
        if let Ok(rate) = alignment_rate(&scores, &subset) {
            alignment.insert(key, rate);
        }
    };
    for &source in &sources {
        align(
            source.to_string(),
            rows.iter()
                .filter(|r| r.source == source)
                .map(|r| BiasScore::new(r.entity.clone(), source, r.bias))
                .collect(),
        );
    }
    align(
        "language_direct".into(),
        language_bias
            .iter()
            .map(|r| BiasScore::new(r.entity.clone(), BiasSource::Language, r.b_vision_language))
            .collect(),
    );

    let collected_at = index.records().map(|r| r.retrieved_at).max();
    let agents = [AgentGender::Male, AgentGender::Female, AgentGender::Neutral]
        .into_iter()
        .map(|g| (g, catalog.agents.surface(g).to_owned()))
        .collect();
    let mut report = AuditReport {
        metadata: ReportMetadata {
            backend_id: prober.backend_id().to_owned(),
            model_ids: prober.model_ids(),
            no_image_mechanism: prober.no_image_mechanism(),
            clamp_floor: PROBABILITY_FLOOR,
            collected_at,
            sources,
            agents,
        },
        rows,
        language_bias,
        image_predictions,
        skipped,
        alignment,
    };
    report.normalize();
    Ok(AuditRun {
        report,
        plan,
        wire_requests: prober.wire_requests() - start_requests,
    })
}
