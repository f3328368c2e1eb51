//! Association and bias scores.
//!
//! Every score is a natural-log ratio of extracted probabilities, clamped
//! at [`PROBABILITY_FLOOR`](crate::backend::PROBABILITY_FLOOR) first. Two
//! aggregation orders are in play: the language score averages per-image
//! log-ratios over the full image set, while the visual score averages the
//! probabilities over the gender-matched images and takes one log-ratio.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{clamp_probability, ModelTag, ProbabilityRecord, ProbeKey};
use crate::domain::{AgentGender, BiasSource, Catalog, DomainError, Entity, Gender, ImageRef};

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("missing {term} for `{entity}` (caption {caption:?}, image {})", .image.as_deref().unwrap_or("none"))]
    MissingTerm {
        term: String,
        entity: String,
        caption: String,
        image: Option<String>,
    },
    #[error("empty image set for `{entity}` ({gender})")]
    EmptySet { entity: String, gender: Gender },
    #[error("image `{image}` shows a {actual} agent, expected {expected}")]
    ImageGender {
        image: String,
        expected: Gender,
        actual: Gender,
    },
    #[error("cannot combine {0} and {1} scores")]
    SourceMismatch(BiasSource, BiasSource),
    #[error("cannot combine scores for `{0}` and `{1}`")]
    EntityMismatch(String, String),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

impl ScoreError {
    pub fn term(&self) -> Option<&str> {
        match self {
            ScoreError::MissingTerm { term, .. } => Some(term),
            _ => None,
        }
    }
}

/// `ln(p_num / p_den)` after clamping both inputs to the probability floor.
///
/// Evaluated as a difference of logs, which makes swapping the arguments
/// negate the result exactly.
pub fn association_score(p_num: f64, p_den: f64) -> f64 {
    clamp_probability(p_num).ln() - clamp_probability(p_den).ln()
}

/// One probability that entered a score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub model: ModelTag,
    pub caption: String,
    pub image: Option<String>,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationScore {
    pub entity: String,
    pub gender: Gender,
    pub source: BiasSource,
    pub value: f64,
    pub terms: Vec<Term>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Female,
    Male,
    None,
}

impl Direction {
    pub fn of(value: f64) -> Self {
        if value > 0.0 {
            Direction::Female
        } else if value < 0.0 {
            Direction::Male
        } else {
            Direction::None
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Female => "female",
            Direction::Male => "male",
            Direction::None => "none",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasScore {
    pub entity: String,
    pub source: BiasSource,
    pub value: f64,
    pub direction: Direction,
}

impl BiasScore {
    pub fn new(entity: impl Into<String>, source: BiasSource, value: f64) -> Self {
        Self {
            entity: entity.into(),
            source,
            value,
            direction: Direction::of(value),
        }
    }
}

/// `S(E, f) - S(E, m)`; positive means a female lean.
pub fn bias_score(
    s_female: &AssociationScore,
    s_male: &AssociationScore,
) -> Result<BiasScore, ScoreError> {
    if s_female.entity != s_male.entity {
        return Err(ScoreError::EntityMismatch(
            s_female.entity.clone(),
            s_male.entity.clone(),
        ));
    }
    if s_female.source != s_male.source {
        return Err(ScoreError::SourceMismatch(s_female.source, s_male.source));
    }
    Ok(BiasScore::new(
        s_female.entity.clone(),
        s_female.source,
        s_female.value - s_male.value,
    ))
}

/// Records indexed by (model, caption, image).
#[derive(Debug, Clone, Default)]
pub struct RecordIndex {
    records: HashMap<ProbeKey, ProbabilityRecord>,
}

impl RecordIndex {
    pub fn new<'a>(records: impl IntoIterator<Item = &'a ProbabilityRecord>) -> Self {
        let mut index = Self::default();
        for r in records {
            index.insert(r.clone());
        }
        index
    }

    /// Adds a record, merging candidates into any record already stored for
    /// the same probe.
    pub fn insert(&mut self, record: ProbabilityRecord) {
        match self.records.get_mut(&record.query.key()) {
            Some(existing) => existing.probabilities.extend(record.probabilities),
            None => {
                self.records.insert(record.query.key(), record);
            }
        }
    }

    pub fn get(
        &self,
        model: ModelTag,
        caption: &str,
        image: Option<&str>,
    ) -> Option<&ProbabilityRecord> {
        self.records.get(&ProbeKey {
            model,
            caption: caption.to_owned(),
            image: image.map(str::to_owned),
        })
    }

    pub fn probability(
        &self,
        model: ModelTag,
        caption: &str,
        image: Option<&str>,
        candidate: &str,
    ) -> Option<f64> {
        self.get(model, caption, image)?.probability(candidate)
    }

    pub fn records(&self) -> impl Iterator<Item = &ProbabilityRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Computes scores for catalog entities from an indexed record set.
#[derive(Debug, Clone, Copy)]
pub struct Scorer<'a> {
    catalog: &'a Catalog,
    records: &'a RecordIndex,
}

impl<'a> Scorer<'a> {
    pub fn new(catalog: &'a Catalog, records: &'a RecordIndex) -> Self {
        Self { catalog, records }
    }

    fn caption(&self, entity: &Entity, agent: AgentGender) -> Result<String, ScoreError> {
        Ok(self.catalog.masked_caption(entity, agent)?.text)
    }

    fn term(
        &self,
        label: &str,
        entity: &Entity,
        model: ModelTag,
        caption: &str,
        image: Option<&str>,
    ) -> Result<Term, ScoreError> {
        let probability = self
            .records
            .probability(model, caption, image, entity.name())
            .ok_or_else(|| ScoreError::MissingTerm {
                term: label.to_owned(),
                entity: entity.name().to_owned(),
                caption: caption.to_owned(),
                image: image.map(str::to_owned),
            })?;
        Ok(Term {
            model,
            caption: caption.to_owned(),
            image: image.map(str::to_owned),
            probability,
        })
    }

    /// `ln(P_VL(E|g) / P_L(E|g))`, no image. Positive when vision-language
    /// pre-training strengthened the association.
    pub fn pretraining_shift(
        &self,
        entity: &Entity,
        gender: Gender,
    ) -> Result<AssociationScore, ScoreError> {
        let caption = self.caption(entity, gender.agent())?;
        let vl = self.term("P_VL", entity, ModelTag::VisionLanguage, &caption, None)?;
        let l = self.term("P_L", entity, ModelTag::TextOnly, &caption, None)?;
        Ok(AssociationScore {
            entity: entity.name().to_owned(),
            gender,
            source: BiasSource::Pretraining,
            value: association_score(vl.probability, l.probability),
            terms: vec![vl, l],
        })
    }

    /// Mean over `images` (the entity's full set) of
    /// `ln(P_VL(E|g,I) / P_VL(E|p,I))`.
    pub fn language_association(
        &self,
        entity: &Entity,
        gender: Gender,
        images: &[ImageRef],
    ) -> Result<AssociationScore, ScoreError> {
        if images.is_empty() {
            return Err(ScoreError::EmptySet {
                entity: entity.name().to_owned(),
                gender,
            });
        }
        let gendered = self.caption(entity, gender.agent())?;
        let neutral = self.caption(entity, AgentGender::Neutral)?;
        let mut terms = Vec::with_capacity(images.len() * 2);
        let mut total = 0.0;
        for image in images {
            let id = Some(image.id.as_str());
            let num = self.term(
                "P_VL(E|g,I)",
                entity,
                ModelTag::VisionLanguage,
                &gendered,
                id,
            )?;
            let den = self.term(
                "P_VL(E|p,I)",
                entity,
                ModelTag::VisionLanguage,
                &neutral,
                id,
            )?;
            total += association_score(num.probability, den.probability);
            terms.push(num);
            terms.push(den);
        }
        Ok(AssociationScore {
            entity: entity.name().to_owned(),
            gender,
            source: BiasSource::Language,
            value: total / images.len() as f64,
            terms,
        })
    }

    /// `ln(mean_I P_VL(E|p,I) / P_VL(E|p))` over the gender-matched images;
    /// the probabilities are averaged before the log.
    pub fn visual_association(
        &self,
        entity: &Entity,
        gender: Gender,
        images: &[ImageRef],
    ) -> Result<AssociationScore, ScoreError> {
        if images.is_empty() {
            return Err(ScoreError::EmptySet {
                entity: entity.name().to_owned(),
                gender,
            });
        }
        if let Some(img) = images.iter().find(|i| i.agent_gender != gender) {
            return Err(ScoreError::ImageGender {
                image: img.id.clone(),
                expected: gender,
                actual: img.agent_gender,
            });
        }
        let neutral = self.caption(entity, AgentGender::Neutral)?;
        let mut terms = Vec::with_capacity(images.len() + 1);
        let mut total = 0.0;
        for image in images {
            let t = self.term(
                "P_VL(E|I)",
                entity,
                ModelTag::VisionLanguage,
                &neutral,
                Some(&image.id),
            )?;
            total += clamp_probability(t.probability);
            terms.push(t);
        }
        let mean = total / images.len() as f64;
        let baseline = self.term(
            "P_VL(E) no-image",
            entity,
            ModelTag::VisionLanguage,
            &neutral,
            None,
        )?;
        let value = association_score(mean, baseline.probability);
        terms.push(baseline);
        Ok(AssociationScore {
            entity: entity.name().to_owned(),
            gender,
            source: BiasSource::Visual,
            value,
            terms,
        })
    }

    /// `ln(P(E|f) / P(E|m))` from imageless gendered captions under `model`.
    pub fn language_bias_direct(
        &self,
        entity: &Entity,
        model: ModelTag,
    ) -> Result<BiasScore, ScoreError> {
        let label = match model {
            ModelTag::VisionLanguage => "P_VL",
            ModelTag::TextOnly => "P_L",
        };
        let female = self.caption(entity, AgentGender::Female)?;
        let male = self.caption(entity, AgentGender::Male)?;
        let pf = self.term(label, entity, model, &female, None)?;
        let pm = self.term(label, entity, model, &male, None)?;
        Ok(BiasScore::new(
            entity.name(),
            BiasSource::Language,
            association_score(pf.probability, pm.probability),
        ))
    }

    /// `B_L` under the vision-language model minus `B_L` under the text-only
    /// model. Negative means pre-training moved the entity masculine.
    pub fn pretraining_bias_delta(&self, entity: &Entity) -> Result<f64, ScoreError> {
        let vl = self.language_bias_direct(entity, ModelTag::VisionLanguage)?;
        let l = self.language_bias_direct(entity, ModelTag::TextOnly)?;
        Ok(vl.value - l.value)
    }
}
