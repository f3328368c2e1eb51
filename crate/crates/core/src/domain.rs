//! Domain vocabulary shared by every stage of an audit: entities, agent
//! terms, caption templates, images and the balanced image manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const AGENT_SLOT: &str = "[AGENT]";
pub const ENTITY_SLOT: &str = "[ENTITY]";
pub const MASK_TOKEN: &str = "[MASK]";

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("malformed template `{id}`: {reason}")]
    MalformedTemplate { id: String, reason: String },
    #[error("invalid entity name `{0}`: must be a non-empty lowercase token without whitespace")]
    InvalidEntity(String),
    #[error("invalid agent surface `{0}`")]
    InvalidAgent(String),
    #[error("entity `{entity}` references unknown template `{template_id}`")]
    MissingTemplate { entity: String, template_id: String },
    #[error("duplicate {kind} `{name}`")]
    Duplicate { kind: &'static str, name: String },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Gender of the agent in a caption or image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentGender {
    Male,
    Female,
    Neutral,
}

/// The two gendered values bias scores are defined over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub const BOTH: [Gender; 2] = [Gender::Male, Gender::Female];

    pub fn agent(self) -> AgentGender {
        match self {
            Gender::Male => AgentGender::Male,
            Gender::Female => AgentGender::Female,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for AgentGender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgentGender::Male => "male",
            AgentGender::Female => "female",
            AgentGender::Neutral => "neutral",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stereotype {
    Masculine,
    Feminine,
}

impl Stereotype {
    pub fn as_str(self) -> &'static str {
        match self {
            Stereotype::Masculine => "masculine",
            Stereotype::Feminine => "feminine",
        }
    }
}

impl fmt::Display for Stereotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stereotype {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "masculine" => Ok(Stereotype::Masculine),
            "feminine" => Ok(Stereotype::Feminine),
            other => Err(format!("unknown stereotype `{other}`")),
        }
    }
}

/// Where a measured association comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasSource {
    /// Vision-language vs text-only model, no image.
    Pretraining,
    /// Gendered vs neutral agent in the caption, averaged over images.
    Language,
    /// Gender-matched images vs no image, neutral caption.
    Visual,
}

impl BiasSource {
    pub const ALL: [BiasSource; 3] = [
        BiasSource::Pretraining,
        BiasSource::Language,
        BiasSource::Visual,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BiasSource::Pretraining => "pretraining",
            BiasSource::Language => "language",
            BiasSource::Visual => "visual",
        }
    }

    pub fn needs_images(self) -> bool {
        !matches!(self, BiasSource::Pretraining)
    }
}

impl fmt::Display for BiasSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BiasSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "pretraining" => Ok(BiasSource::Pretraining),
            "language" => Ok(BiasSource::Language),
            "visual" => Ok(BiasSource::Visual),
            other => Err(format!(
                "unknown bias source `{other}` (expected pretraining, language or visual)"
            )),
        }
    }
}

/// A probe target word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    name: String,
    pub stereotype: Option<Stereotype>,
    pub template_id: String,
}

impl Entity {
    pub fn new(
        name: impl Into<String>,
        template_id: impl Into<String>,
        stereotype: Option<Stereotype>,
    ) -> Result<Self, DomainError> {
        let name = name.into();
        if name.is_empty()
            || name.chars().any(char::is_whitespace)
            || name != name.to_lowercase()
            || name.contains('[')
        {
            return Err(DomainError::InvalidEntity(name));
        }
        Ok(Self {
            name,
            stereotype,
            template_id: template_id.into(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

/// Surface strings substituted for the `[AGENT]` slot, one per gender value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSet {
    male: String,
    female: String,
    neutral: String,
}

impl Default for AgentSet {
    fn default() -> Self {
        Self {
            male: "man".into(),
            female: "woman".into(),
            neutral: "person".into(),
        }
    }
}

impl AgentSet {
    pub fn new(
        male: impl Into<String>,
        female: impl Into<String>,
        neutral: impl Into<String>,
    ) -> Result<Self, DomainError> {
        let set = Self {
            male: male.into(),
            female: female.into(),
            neutral: neutral.into(),
        };
        let surfaces = [&set.male, &set.female, &set.neutral];
        for s in surfaces {
            if s.trim().is_empty() || s.contains('[') || s.contains('\t') || s.contains('\n') {
                return Err(DomainError::InvalidAgent(s.clone()));
            }
        }
        let distinct: BTreeSet<_> = surfaces.into_iter().collect();
        if distinct.len() != 3 {
            return Err(DomainError::InvalidAgent(format!(
                "agent surfaces must be distinct: {}/{}/{}",
                set.male, set.female, set.neutral
            )));
        }
        Ok(set)
    }

    pub fn surface(&self, gender: AgentGender) -> &str {
        match gender {
            AgentGender::Male => &self.male,
            AgentGender::Female => &self.female,
            AgentGender::Neutral => &self.neutral,
        }
    }
}

/// A caption template with exactly one `[AGENT]` and one `[ENTITY]` slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    id: String,
    text: String,
}

impl Template {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self, DomainError> {
        let id = id.into();
        let text = text.into();
        let malformed = |reason: String| DomainError::MalformedTemplate {
            id: id.clone(),
            reason,
        };
        let agents = text.matches(AGENT_SLOT).count();
        let entities = text.matches(ENTITY_SLOT).count();
        if agents != 1 {
            return Err(malformed(format!(
                "expected one {AGENT_SLOT} slot, found {agents}"
            )));
        }
        if entities != 1 {
            return Err(malformed(format!(
                "expected one {ENTITY_SLOT} slot, found {entities}"
            )));
        }
        if text.contains(MASK_TOKEN) {
            return Err(malformed(format!("template must not contain {MASK_TOKEN}")));
        }
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            return Err(malformed("template id must be a non-empty token".into()));
        }
        Ok(Self { id, text })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// A fully substituted caption.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub agent_gender: AgentGender,
    pub entity: String,
}

/// Substitutes the agent and the entity (or `[MASK]`) into `template`.
///
/// Everything outside the two slots is copied byte for byte.
pub fn expand_template(
    template: &Template,
    agents: &AgentSet,
    agent: AgentGender,
    entity: &Entity,
    mask_entity: bool,
) -> Caption {
    let filler = if mask_entity {
        MASK_TOKEN
    } else {
        entity.name()
    };
    let text = template
        .text
        .replacen(AGENT_SLOT, agents.surface(agent), 1)
        .replacen(ENTITY_SLOT, filler, 1);
    Caption {
        text,
        agent_gender: agent,
        entity: entity.name().to_owned(),
    }
}

/// Reference to an image depicting an entity with a gendered agent.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub path_or_uri: String,
    pub agent_gender: Gender,
    pub entity: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityImages {
    pub male: Vec<ImageRef>,
    pub female: Vec<ImageRef>,
}

impl EntityImages {
    pub fn of_gender(&self, gender: Gender) -> &[ImageRef] {
        match gender {
            Gender::Male => &self.male,
            Gender::Female => &self.female,
        }
    }

    /// The full set `I_f ∪ I_m`, male images first.
    pub fn all(&self) -> impl Iterator<Item = &ImageRef> {
        self.male.iter().chain(self.female.iter())
    }
}

/// Balanced gendered image sets per entity. Construct through
/// [`crate::corpus::load_image_manifest`] or [`ImageManifest::from_images`],
/// both of which validate balance and uniqueness.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImageManifest {
    entities: BTreeMap<String, EntityImages>,
}

impl ImageManifest {
    pub(crate) fn from_validated(entities: BTreeMap<String, EntityImages>) -> Self {
        Self { entities }
    }

    pub fn images(&self, entity: &str) -> Option<&EntityImages> {
        self.entities.get(entity)
    }

    pub fn entities(&self) -> impl Iterator<Item = (&str, &EntityImages)> {
        self.entities.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn image(&self, id: &str) -> Option<&ImageRef> {
        self.entities
            .values()
            .flat_map(EntityImages::all)
            .find(|img| img.id == id)
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }
}

/// Templates, entities and agent surfaces for one audit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    templates: BTreeMap<String, Template>,
    entities: Vec<Entity>,
    pub agents: AgentSet,
}

impl Catalog {
    pub fn new(
        templates: impl IntoIterator<Item = Template>,
        entities: impl IntoIterator<Item = Entity>,
        agents: AgentSet,
    ) -> Result<Self, DomainError> {
        let mut catalog = Catalog {
            agents,
            ..Default::default()
        };
        for t in templates {
            catalog.add_template(t)?;
        }
        for e in entities {
            catalog.add_entity(e)?;
        }
        Ok(catalog)
    }

    pub fn add_template(&mut self, template: Template) -> Result<(), DomainError> {
        if self.templates.contains_key(template.id()) {
            return Err(DomainError::Duplicate {
                kind: "template",
                name: template.id().to_owned(),
            });
        }
        self.templates.insert(template.id.clone(), template);
        Ok(())
    }

    pub fn add_entity(&mut self, entity: Entity) -> Result<(), DomainError> {
        if !self.templates.contains_key(&entity.template_id) {
            return Err(DomainError::MissingTemplate {
                entity: entity.name.clone(),
                template_id: entity.template_id.clone(),
            });
        }
        if self.entity(entity.name()).is_some() {
            return Err(DomainError::Duplicate {
                kind: "entity",
                name: entity.name.clone(),
            });
        }
        self.entities.push(entity);
        Ok(())
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn entity(&self, name: &str) -> Option<&Entity> {
        self.entities.iter().find(|e| e.name() == name)
    }

    pub fn template(&self, id: &str) -> Option<&Template> {
        self.templates.get(id)
    }

    pub fn templates(&self) -> impl Iterator<Item = &Template> {
        self.templates.values()
    }

    pub fn template_for(&self, entity: &Entity) -> Result<&Template, DomainError> {
        self.template(&entity.template_id)
            .ok_or_else(|| DomainError::MissingTemplate {
                entity: entity.name.clone(),
                template_id: entity.template_id.clone(),
            })
    }

    /// Masked caption for `entity` with the given agent.
    pub fn masked_caption(
        &self,
        entity: &Entity,
        agent: AgentGender,
    ) -> Result<Caption, DomainError> {
        let template = self.template_for(entity)?;
        Ok(expand_template(template, &self.agents, agent, entity, true))
    }

    /// Entities sharing `template_id`, in catalog order. These compete as
    /// candidates for the same masked caption.
    pub fn entities_for_template<'a>(
        &'a self,
        template_id: &'a str,
    ) -> impl Iterator<Item = &'a Entity> + 'a {
        self.entities
            .iter()
            .filter(move |e| e.template_id == template_id)
    }

    /// Parses the tab-separated catalog format.
    ///
    /// Two-field lines declare templates (`id<TAB>text`), three-field lines
    /// declare entities (`name<TAB>template_id<TAB>stereotype|none`). Blank
    /// lines and lines starting with `#` are ignored. Templates may appear
    /// after the entities that use them.
    pub fn parse(input: &str, agents: AgentSet) -> Result<Self, DomainError> {
        let mut templates = Vec::new();
        let mut entities = Vec::new();
        for (idx, raw) in input.lines().enumerate() {
            let line = idx + 1;
            let raw = raw.strip_suffix('\r').unwrap_or(raw);
            if raw.trim().is_empty() || raw.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = raw.split('\t').collect();
            let at_line = |e: DomainError| DomainError::Parse {
                line,
                reason: e.to_string(),
            };
            match fields.as_slice() {
                [id, text] => templates.push((line, Template::new(*id, *text).map_err(at_line)?)),
                [name, template_id, label] => {
                    let stereotype = match *label {
                        "none" => None,
                        other => Some(
                            other
                                .parse()
                                .map_err(|reason| DomainError::Parse { line, reason })?,
                        ),
                    };
                    entities.push((
                        line,
                        Entity::new(*name, *template_id, stereotype).map_err(at_line)?,
                    ));
                }
                _ => {
                    return Err(DomainError::Parse {
                        line,
                        reason: format!(
                            "expected 2 (template) or 3 (entity) tab-separated fields, found {}",
                            fields.len()
                        ),
                    })
                }
            }
        }
        let mut catalog = Catalog {
            agents,
            ..Default::default()
        };
        for (line, t) in templates {
            catalog.add_template(t).map_err(|e| DomainError::Parse {
                line,
                reason: e.to_string(),
            })?;
        }
        for (line, e) in entities {
            catalog.add_entity(e).map_err(|e| DomainError::Parse {
                line,
                reason: e.to_string(),
            })?;
        }
        Ok(catalog)
    }
}
