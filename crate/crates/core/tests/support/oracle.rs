//! Random synthetic audits and a brute-force reference scorer.
//!
//! The reference builds captions with `format!` from template fragments and
//! reads probabilities straight out of the table, so it shares no code with
//! the template expander, the planner or the scorer.

#![allow(dead_code)]

use std::collections::BTreeMap;

use mmbias_core::backend::{ModelTag, SyntheticTable};
use mmbias_core::corpus::parse_image_manifest;
use mmbias_core::{AgentSet, BiasSource, Catalog, Gender, ImageManifest};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VERBS: [(&str, &str); 5] = [
    ("is carrying a", " ."),
    ("is wearing a", " ."),
    ("is drinking", " ."),
    ("holds the", "!"),
    ("reaches for an", " today ."),
];

const NAMES: [&str; 12] = [
    "purse",
    "briefcase",
    "apron",
    "suit",
    "wine",
    "beer",
    "lipstick",
    "drill",
    "scarf",
    "wrench",
    "necklace",
    "tie",
];

#[derive(Debug, Clone)]
pub struct OracleTemplate {
    pub id: String,
    pub verb: &'static str,
    pub tail: &'static str,
}

impl OracleTemplate {
    pub fn text(&self) -> String {
        format!("The [AGENT] {} [ENTITY]{}", self.verb, self.tail)
    }

    pub fn masked(&self, agent: &str) -> String {
        format!("The {agent} {} [MASK]{}", self.verb, self.tail)
    }
}

#[derive(Debug, Clone)]
pub struct OracleImage {
    pub id: String,
    pub entity: String,
    pub gender: Gender,
}

/// A randomly generated audit: catalog, balanced manifest and a probability
/// table covering every probe the audit can ask for.
#[derive(Debug, Clone)]
pub struct RandomAudit {
    pub templates: Vec<OracleTemplate>,
    /// (entity, index into `templates`)
    pub entities: Vec<(String, usize)>,
    pub images: Vec<OracleImage>,
    pub table: SyntheticTable,
}

fn agent_word(agent: Option<Gender>) -> &'static str {
    match agent {
        Some(Gender::Male) => "man",
        Some(Gender::Female) => "woman",
        None => "person",
    }
}

impl RandomAudit {
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_templates = rng.random_range(1..=3);
        let mut verbs = VERBS.to_vec();
        let templates: Vec<OracleTemplate> = (0..n_templates)
            .map(|i| {
                let (verb, tail) = verbs.remove(rng.random_range(0..verbs.len()));
                OracleTemplate {
                    id: format!("t{i}"),
                    verb,
                    tail,
                }
            })
            .collect();

        let n_entities = rng.random_range(1..=5);
        let mut pool: Vec<&str> = NAMES.to_vec();
        let mut entities = Vec::new();
        for _ in 0..n_entities {
            let name = pool.remove(rng.random_range(0..pool.len()));
            entities.push((name.to_owned(), rng.random_range(0..n_templates)));
        }

        let mut images = Vec::new();
        for (name, _) in &entities {
            let per_gender = rng.random_range(1..=2);
            for gender in Gender::BOTH {
                for k in 0..per_gender {
                    images.push(OracleImage {
                        id: format!("{name}-{}-{k}", gender.as_str()),
                        entity: name.clone(),
                        gender,
                    });
                }
            }
        }

        let mut table = SyntheticTable::new();
        for (t_idx, template) in templates.iter().enumerate() {
            let candidates: Vec<&str> = entities
                .iter()
                .filter(|(_, t)| *t == t_idx)
                .map(|(n, _)| n.as_str())
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let image_ids: Vec<&str> = images
                .iter()
                .filter(|img| candidates.contains(&img.entity.as_str()))
                .map(|img| img.id.as_str())
                .collect();
            let cap = 0.999 / candidates.len() as f64;
            for agent in [Some(Gender::Male), Some(Gender::Female), None] {
                let caption = template.masked(agent_word(agent));
                let mut contexts =
                    vec![(None, ModelTag::VisionLanguage), (None, ModelTag::TextOnly)];
                contexts.extend(
                    image_ids
                        .iter()
                        .map(|id| (Some(*id), ModelTag::VisionLanguage)),
                );
                for (image, model) in contexts {
                    for c in &candidates {
                        let p = random_probability(&mut rng, cap);
                        table.insert(caption.clone(), image, model, *c, p);
                    }
                }
            }
        }

        Self {
            templates,
            entities,
            images,
            table,
        }
    }

    pub fn catalog_text(&self) -> String {
        let mut out = String::new();
        for t in &self.templates {
            out.push_str(&format!("{}\t{}\n", t.id, t.text()));
        }
        for (name, t) in &self.entities {
            out.push_str(&format!("{name}\t{}\tnone\n", self.templates[*t].id));
        }
        out
    }

    pub fn catalog(&self) -> Catalog {
        Catalog::parse(&self.catalog_text(), AgentSet::default()).expect("generated catalog parses")
    }

    pub fn manifest_text(&self) -> String {
        self.images
            .iter()
            .map(|img| {
                let g = match img.gender {
                    Gender::Male => "m",
                    Gender::Female => "f",
                };
                format!("{}\t{g}\t{}\timages/{}.jpg\n", img.entity, img.id, img.id)
            })
            .collect()
    }

    pub fn manifest(&self) -> ImageManifest {
        parse_image_manifest(&self.manifest_text()).expect("generated manifest parses")
    }

    fn template_of(&self, entity: &str) -> &OracleTemplate {
        let (_, t) = self
            .entities
            .iter()
            .find(|(n, _)| n == entity)
            .expect("known entity");
        &self.templates[*t]
    }

    fn p(&self, caption: &str, image: Option<&str>, model: ModelTag, entity: &str) -> f64 {
        self.table
            .get(caption, image, model, entity)
            .unwrap_or_else(|| panic!("table lacks {caption:?} {image:?} {model:?} {entity}"))
    }

    fn images_of(&self, entity: &str, gender: Option<Gender>) -> Vec<&OracleImage> {
        self.images
            .iter()
            .filter(|i| i.entity == entity && gender.is_none_or(|g| g == i.gender))
            .collect()
    }

    /// Reference per-gender association score.
    pub fn association(&self, entity: &str, gender: Gender, source: BiasSource) -> f64 {
        let t = self.template_of(entity);
        let gendered = t.masked(agent_word(Some(gender)));
        let neutral = t.masked("person");
        let vl = ModelTag::VisionLanguage;
        match source {
            BiasSource::Pretraining => (self.p(&gendered, None, vl, entity)
                / self.p(&gendered, None, ModelTag::TextOnly, entity))
            .ln(),
            BiasSource::Language => {
                let imgs = self.images_of(entity, None);
                let sum: f64 = imgs
                    .iter()
                    .map(|i| {
                        (self.p(&gendered, Some(&i.id), vl, entity)
                            / self.p(&neutral, Some(&i.id), vl, entity))
                        .ln()
                    })
                    .sum();
                sum / imgs.len() as f64
            }
            BiasSource::Visual => {
                let imgs = self.images_of(entity, Some(gender));
                let mean = imgs
                    .iter()
                    .map(|i| self.p(&neutral, Some(&i.id), vl, entity))
                    .sum::<f64>()
                    / imgs.len() as f64;
                (mean / self.p(&neutral, None, vl, entity)).ln()
            }
        }
    }

    pub fn bias(&self, entity: &str, source: BiasSource) -> f64 {
        self.association(entity, Gender::Female, source)
            - self.association(entity, Gender::Male, source)
    }

    /// Reference imageless `ln(P(E|f)/P(E|m))` under `model`.
    pub fn language_bias_direct(&self, entity: &str, model: ModelTag) -> f64 {
        let t = self.template_of(entity);
        (self.p(&t.masked("woman"), None, model, entity)
            / self.p(&t.masked("man"), None, model, entity))
        .ln()
    }

    /// Every reference score keyed by (entity, source): (S_m, S_f, B).
    pub fn all_scores(&self) -> BTreeMap<(String, BiasSource), (f64, f64, f64)> {
        let mut out = BTreeMap::new();
        for (name, _) in &self.entities {
            for source in BiasSource::ALL {
                let m = self.association(name, Gender::Male, source);
                let f = self.association(name, Gender::Female, source);
                out.insert((name.clone(), source), (m, f, self.bias(name, source)));
            }
        }
        out
    }
}

fn random_probability(rng: &mut ChaCha8Rng, cap: f64) -> f64 {
    // Mix of moderate and very small probabilities so near-floor values are
    // exercised without ever reaching zero.
    if rng.random_bool(0.15) {
        10f64.powf(rng.random_range(-9.0..-4.0))
    } else {
        rng.random_range(1e-4..cap)
    }
}
