//! Gender-association bias probing for masked language models, with and
//! without visual context.
//!
//! An audit expands caption templates into masked probes ([`plan`]), sends
//! them to a masked-LM backend ([`backend`]), turns the extracted
//! probabilities into log-ratio association and bias scores ([`scoring`])
//! and writes reports and plot data ([`report`]). [`corpus`] handles image
//! manifests and stereotype surveys; [`audit`] ties the stages together.

pub mod audit;
pub mod backend;
pub mod corpus;
pub mod domain;
pub mod plan;
pub mod report;
pub mod scoring;

pub use audit::{run_audit, AuditError, AuditInputs, AuditRun};
pub use domain::{
    expand_template, AgentGender, AgentSet, BiasSource, Caption, Catalog, Entity, Gender,
    ImageManifest, ImageRef, Stereotype, Template,
};
