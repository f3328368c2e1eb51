//! Materialises the grid of probes an audit needs.
//!
//! For an entity `E` with template `T` the probes per source are:
//!
//! | source      | caption agent      | image              | model        |
//! |-------------|--------------------|--------------------|--------------|
//! | pretraining | male, female       | none               | VL and text  |
//! | language    | male, female, neutral | every image of E | VL           |
//! | visual      | neutral            | every image of E, and none | VL   |
//!
//! Probes are deduplicated on (model, caption, image); the candidate list of
//! a probe is every catalog entity sharing the template, so competing
//! entities are scored in one request.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;
use thiserror::Error;

use crate::backend::{ModelTag, ProbeKey, ProbeQuery};
use crate::domain::{
    AgentGender, BiasSource, Catalog, DomainError, Entity, Gender, ImageManifest, ImageRef,
};

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("bias source `{0}` needs an image manifest (--manifest)")]
    MissingManifest(BiasSource),
    #[error(transparent)]
    MissingTemplate(#[from] DomainError),
}

/// An (entity, source) pair the plan cannot cover, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct PlanSkip {
    pub entity: String,
    pub source: BiasSource,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProbePlan {
    pub queries: Vec<ProbeQuery>,
    /// Distinct probes each source needs on its own (sources overlap, so
    /// these do not sum to `queries.len()`).
    pub per_source: BTreeMap<BiasSource, usize>,
    pub skipped: Vec<PlanSkip>,
}

impl ProbePlan {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

fn candidates_for(catalog: &Catalog, entity: &Entity) -> Vec<String> {
    catalog
        .entities_for_template(&entity.template_id)
        .map(|e| e.name().to_owned())
        .collect()
}

fn probe(
    catalog: &Catalog,
    entity: &Entity,
    agent: AgentGender,
    image: Option<&ImageRef>,
    model: ModelTag,
) -> Result<ProbeQuery, PlanError> {
    let caption = catalog.masked_caption(entity, agent)?;
    Ok(ProbeQuery {
        caption: caption.text,
        agent,
        template_id: entity.template_id.clone(),
        image: image.cloned(),
        model,
        candidates: candidates_for(catalog, entity),
    })
}

/// Probes needed to score `entity` under `source`, in a fixed order. Returns
/// `Ok(None)` when the manifest has no images for the entity.
pub fn source_probes(
    catalog: &Catalog,
    manifest: Option<&ImageManifest>,
    entity: &Entity,
    source: BiasSource,
) -> Result<Option<Vec<ProbeQuery>>, PlanError> {
    let mut out = Vec::new();
    match source {
        BiasSource::Pretraining => {
            for gender in Gender::BOTH {
                for model in [ModelTag::VisionLanguage, ModelTag::TextOnly] {
                    out.push(probe(catalog, entity, gender.agent(), None, model)?);
                }
            }
        }
        BiasSource::Language | BiasSource::Visual => {
            let manifest = manifest.ok_or(PlanError::MissingManifest(source))?;
            let Some(images) = manifest.images(entity.name()) else {
                return Ok(None);
            };
            let agents: &[AgentGender] = if source == BiasSource::Language {
                &[AgentGender::Male, AgentGender::Female, AgentGender::Neutral]
            } else {
                &[AgentGender::Neutral]
            };
            for image in images.all() {
                for &agent in agents {
                    out.push(probe(
                        catalog,
                        entity,
                        agent,
                        Some(image),
                        ModelTag::VisionLanguage,
                    )?);
                }
            }
            if source == BiasSource::Visual {
                out.push(probe(
                    catalog,
                    entity,
                    AgentGender::Neutral,
                    None,
                    ModelTag::VisionLanguage,
                )?);
            }
        }
    }
    Ok(Some(out))
}

/// Builds the deduplicated, deterministically ordered probe list for every
/// (entity, source) pair. Order: catalog entity order, then source order,
/// then the per-source order of [`source_probes`]; first occurrence wins.
pub fn build_probe_plan(
    catalog: &Catalog,
    manifest: Option<&ImageManifest>,
    sources: &[BiasSource],
) -> Result<ProbePlan, PlanError> {
    let mut sources = sources.to_vec();
    sources.sort();
    sources.dedup();
    if manifest.is_none() {
        if let Some(&s) = sources.iter().find(|s| s.needs_images()) {
            return Err(PlanError::MissingManifest(s));
        }
    }

    let mut plan = ProbePlan::default();
    let mut index: HashMap<ProbeKey, usize> = HashMap::new();
    let mut per_source: BTreeMap<BiasSource, std::collections::HashSet<ProbeKey>> =
        sources.iter().map(|&s| (s, Default::default())).collect();

    for entity in catalog.entities() {
        for &source in &sources {
            let Some(probes) = source_probes(catalog, manifest, entity, source)? else {
                plan.skipped.push(PlanSkip {
                    entity: entity.name().to_owned(),
                    source,
                    reason: "no images in manifest".into(),
                });
                continue;
            };
            for p in probes {
                let key = p.key();
                per_source.get_mut(&source).unwrap().insert(key.clone());
                match index.get(&key) {
                    Some(&i) => {
                        let existing = &mut plan.queries[i];
                        for c in p.candidates {
                            if !existing.candidates.contains(&c) {
                                existing.candidates.push(c);
                            }
                        }
                    }
                    None => {
                        index.insert(key, plan.queries.len());
                        plan.queries.push(p);
                    }
                }
            }
        }
    }
    plan.per_source = per_source
        .into_iter()
        .map(|(s, keys)| (s, keys.len()))
        .collect();
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{AgentSet, EntityImages, Template};

    fn carry_catalog(names: &[&str]) -> Catalog {
        Catalog::new(
            [Template::new("carry", "The [AGENT] is carrying a [ENTITY] .").unwrap()],
            names
                .iter()
                .map(|n| Entity::new(*n, "carry", None).unwrap()),
            AgentSet::default(),
        )
        .unwrap()
    }

    fn manifest(entities: &[&str], per_gender: usize) -> ImageManifest {
        let mut map = BTreeMap::new();
        for e in entities {
            let mk = |g: Gender, i: usize| ImageRef {
                id: format!("{e}-{g}-{i}"),
                path_or_uri: format!("{e}/{g}/{i}.jpg"),
                agent_gender: g,
                entity: e.to_string(),
            };
            map.insert(
                e.to_string(),
                EntityImages {
                    male: (0..per_gender).map(|i| mk(Gender::Male, i)).collect(),
                    female: (0..per_gender).map(|i| mk(Gender::Female, i)).collect(),
                },
            );
        }
        ImageManifest::from_validated(map)
    }

    #[test]
    fn language_source_one_entity_twelve_images() {
        let plan = build_probe_plan(
            &carry_catalog(&["purse"]),
            Some(&manifest(&["purse"], 6)),
            &[BiasSource::Language],
        )
        .unwrap();
        assert_eq!(plan.len(), 36);
        assert!(plan
            .queries
            .iter()
            .all(|q| q.model == ModelTag::VisionLanguage && q.image.is_some()));
    }

    #[test]
    fn pretraining_one_entity() {
        let plan =
            build_probe_plan(&carry_catalog(&["purse"]), None, &[BiasSource::Pretraining]).unwrap();
        assert_eq!(plan.len(), 4);
        assert!(plan.queries.iter().all(|q| q.image.is_none()));
        let texts: Vec<_> = plan.queries.iter().map(|q| q.caption.as_str()).collect();
        assert_eq!(
            texts,
            [
                "The man is carrying a [MASK] .",
                "The man is carrying a [MASK] .",
                "The woman is carrying a [MASK] .",
                "The woman is carrying a [MASK] .",
            ]
        );
    }

    #[test]
    fn empty_entity_list_gives_empty_plan() {
        let plan = build_probe_plan(
            &carry_catalog(&[]),
            Some(&manifest(&[], 6)),
            &BiasSource::ALL,
        )
        .unwrap();
        assert!(plan.is_empty());
    }

    #[test]
    fn visual_adds_one_no_image_probe() {
        let plan = build_probe_plan(
            &carry_catalog(&["purse"]),
            Some(&manifest(&["purse"], 6)),
            &[BiasSource::Visual],
        )
        .unwrap();
        assert_eq!(plan.len(), 13);
        let all = build_probe_plan(
            &carry_catalog(&["purse"]),
            Some(&manifest(&["purse"], 6)),
            &BiasSource::ALL,
        )
        .unwrap();
        // The visual image probes coincide with the neutral language probes.
        assert_eq!(all.len(), 4 + 36 + 1);
        assert_eq!(all.per_source[&BiasSource::Visual], 13);
    }

    #[test]
    fn shared_template_merges_no_image_probes() {
        let plan = build_probe_plan(
            &carry_catalog(&["purse", "briefcase"]),
            Some(&manifest(&["purse", "briefcase"], 6)),
            &BiasSource::ALL,
        )
        .unwrap();
        assert_eq!(plan.len(), 5 + 2 * 36);
        for q in &plan.queries {
            assert_eq!(q.candidates, ["purse", "briefcase"]);
        }
    }

    #[test]
    fn missing_manifest_is_an_error() {
        let err =
            build_probe_plan(&carry_catalog(&["purse"]), None, &[BiasSource::Visual]).unwrap_err();
        assert_eq!(err, PlanError::MissingManifest(BiasSource::Visual));
    }

    #[test]
    fn entity_without_images_is_skipped() {
        let plan = build_probe_plan(
            &carry_catalog(&["purse", "briefcase"]),
            Some(&manifest(&["purse"], 1)),
            &[BiasSource::Language],
        )
        .unwrap();
        assert_eq!(plan.len(), 6);
        assert_eq!(plan.skipped.len(), 1);
        assert_eq!(plan.skipped[0].entity, "briefcase");
    }

    #[test]
    fn plan_is_deterministic() {
        let catalog = carry_catalog(&["purse", "briefcase"]);
        let m = manifest(&["purse", "briefcase"], 3);
        let a = build_probe_plan(&catalog, Some(&m), &BiasSource::ALL).unwrap();
        let b = build_probe_plan(
            &catalog,
            Some(&m),
            &[
                BiasSource::Visual,
                BiasSource::Pretraining,
                BiasSource::Language,
            ],
        )
        .unwrap();
        assert_eq!(a, b);
    }
}
