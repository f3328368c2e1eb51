mod support;

use std::collections::BTreeSet;

use mmbias_core::backend::{ProbeKey, Prober, SyntheticBackend};
use mmbias_core::plan::build_probe_plan;
use mmbias_core::scoring::{RecordIndex, Scorer};
use mmbias_core::{expand_template, AgentGender, AgentSet, BiasSource, Entity, Gender, Template};
use proptest::prelude::*;
use support::oracle::RandomAudit;

fn source_subset() -> impl Strategy<Value = Vec<BiasSource>> {
    prop::sample::subsequence(BiasSource::ALL.to_vec(), 0..=3).prop_shuffle()
}

fn agent() -> impl Strategy<Value = AgentGender> {
    prop_oneof![
        Just(AgentGender::Male),
        Just(AgentGender::Female),
        Just(AgentGender::Neutral)
    ]
}

proptest! {
    #[test]
    fn expansion_is_idempotent(
        prefix in "[A-Za-z ,]{0,12}",
        middle in "[a-z ]{0,10}",
        suffix in "[ .!?]{0,4}",
        name in "[a-z]{1,10}",
        agent in agent(),
        mask in any::<bool>(),
    ) {
        let text = format!("{prefix}[AGENT]{middle}[ENTITY]{suffix}");
        let template = Template::new("t", text).unwrap();
        let entity = Entity::new(name.clone(), "t", None).unwrap();
        let agents = AgentSet::default();
        let a = expand_template(&template, &agents, agent, &entity, mask);
        let b = expand_template(&template, &agents, agent, &entity, mask);
        prop_assert_eq!(&a.text, &b.text);
        let filler = if mask { "[MASK]" } else { name.as_str() };
        prop_assert_eq!(a.text, format!("{prefix}{}{middle}{filler}{suffix}", agents.surface(agent)));
    }

    #[test]
    fn plan_order_is_deterministic(seed in any::<u64>(), sources in source_subset()) {
        let audit = RandomAudit::generate(seed);
        let catalog = audit.catalog();
        let manifest = audit.manifest();
        let first = build_probe_plan(&catalog, Some(&manifest), &sources).unwrap();
        let mut reordered = sources.clone();
        reordered.reverse();
        let second = build_probe_plan(&audit.catalog(), Some(&audit.manifest()), &reordered).unwrap();
        prop_assert_eq!(first, second);
    }

    /// Every probability a score reads is requested by the plan, with the
    /// entity among the probe's candidates, and the plan asks for nothing
    /// the scores do not read.
    #[test]
    fn plan_covers_exactly_the_score_terms(seed in any::<u64>(), sources in source_subset()) {
        let audit = RandomAudit::generate(seed);
        let catalog = audit.catalog();
        let manifest = audit.manifest();
        let plan = build_probe_plan(&catalog, Some(&manifest), &sources).unwrap();
        let prober = Prober::new(SyntheticBackend::new(audit.table.clone()));
        let batch = prober.query_batch(&plan.queries);
        prop_assert!(batch.is_complete());
        let index = RecordIndex::new(batch.records());
        let scorer = Scorer::new(&catalog, &index);

        let mut used: BTreeSet<ProbeKey> = BTreeSet::new();
        for entity in catalog.entities() {
            let images = manifest.images(entity.name()).unwrap();
            let all: Vec<_> = images.all().cloned().collect();
            for &source in &sources {
                for gender in Gender::BOTH {
                    let score = match source {
                        BiasSource::Pretraining => scorer.pretraining_shift(entity, gender),
                        BiasSource::Language => scorer.language_association(entity, gender, &all),
                        BiasSource::Visual => scorer.visual_association(entity, gender, images.of_gender(gender)),
                    }
                    .unwrap();
                    for term in &score.terms {
                        let key = ProbeKey {
                            model: term.model,
                            caption: term.caption.clone(),
                            image: term.image.clone(),
                        };
                        let query = plan.queries.iter().find(|q| q.key() == key);
                        prop_assert!(query.is_some(), "no probe for {:?}", key);
                        prop_assert!(query.unwrap().candidates.iter().any(|c| c == entity.name()));
                        used.insert(key);
                    }
                }
            }
        }
        let planned: BTreeSet<ProbeKey> = plan.queries.iter().map(|q| q.key()).collect();
        prop_assert_eq!(planned.len(), plan.len());
        prop_assert_eq!(used, planned);
    }
}

#[test]
fn no_sources_means_no_probes() {
    let audit = RandomAudit::generate(7);
    let plan = build_probe_plan(&audit.catalog(), Some(&audit.manifest()), &[]).unwrap();
    assert!(plan.is_empty());
    assert!(plan.per_source.is_empty());
}
