//! Story plan types produced by the director and consumed by the renderer.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::text::{contains_whole_word, word_count};
use crate::types::sha256_hex;

pub const PLAN_SCHEMA: &str = "dreamstory.plan.v1";

/// Maximum words in a subject's short descriptor.
pub const DESCRIPTOR_MAX_WORDS: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub name: String,
    pub portrait_prompt: String,
    pub short_descriptor: String,
    /// Category noun a detector understands, e.g. "man" or "gorilla".
    pub type_token: String,
    #[serde(default)]
    pub style_tags: Vec<String>,
}

impl SubjectSpec {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.name.trim().is_empty() {
            return Err("subject name is empty".into());
        }
        if self.portrait_prompt.trim().is_empty() {
            return Err(format!("subject `{}` has an empty portrait prompt", self.name));
        }
        validate_type_token(&self.type_token)
            .map_err(|e| format!("subject `{}`: {e}", self.name))?;
        if self.short_descriptor.trim().is_empty() {
            return Err(format!("subject `{}` has an empty short descriptor", self.name));
        }
        if word_count(&self.short_descriptor) > DESCRIPTOR_MAX_WORDS {
            return Err(format!(
                "short descriptor of `{}` exceeds {DESCRIPTOR_MAX_WORDS} words",
                self.name
            ));
        }
        if contains_whole_word(&self.short_descriptor, &self.name) {
            return Err(format!("short descriptor of `{}` contains the name", self.name));
        }
        Ok(())
    }
}

/// A type token is one noun phrase: letters, digits and single spaces only.
pub fn validate_type_token(token: &str) -> std::result::Result<(), String> {
    if token.trim().is_empty() {
        return Err("type token is empty".into());
    }
    if token.trim() != token || token.contains("  ") {
        return Err(format!("type token `{token}` has stray whitespace"));
    }
    if !token.chars().all(|c| c.is_alphanumeric() || c == ' ') {
        return Err(format!("type token `{token}` contains punctuation"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub index: usize,
    pub raw_prompt: String,
    pub rewritten_prompt: String,
    pub present_subjects: Vec<String>,
    pub word_count: usize,
}

impl SceneSpec {
    pub fn new(index: usize, raw_prompt: impl Into<String>) -> Self {
        let raw_prompt = raw_prompt.into();
        Self {
            index,
            word_count: word_count(&raw_prompt),
            rewritten_prompt: raw_prompt.clone(),
            raw_prompt,
            present_subjects: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub stage: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryPlan {
    pub schema: String,
    pub story_text: String,
    pub subjects: Vec<SubjectSpec>,
    pub scenes: Vec<SceneSpec>,
    pub n_scenes_requested: Option<usize>,
    pub director_model_id: String,
    pub creation_trace: Vec<TraceEntry>,
}

impl StoryPlan {
    pub fn subject(&self, name: &str) -> Option<&SubjectSpec> {
        self.subjects.iter().find(|s| s.name == name)
    }

    /// Checks every plan invariant; the error names the offending element.
    pub fn validate(&self) -> Result<()> {
        if self.schema != PLAN_SCHEMA {
            return Err(Error::schema(
                "schema",
                format!("expected `{PLAN_SCHEMA}`, found `{}`", self.schema),
            ));
        }
        let mut names = BTreeSet::new();
        for (i, s) in self.subjects.iter().enumerate() {
            s.validate()
                .map_err(|e| Error::PlanIntegrity(format!("subjects[{i}]: {e}")))?;
            if !names.insert(s.name.as_str()) {
                return Err(Error::PlanIntegrity(format!(
                    "subjects[{i}]: duplicate name `{}`",
                    s.name
                )));
            }
        }
        for (i, scene) in self.scenes.iter().enumerate() {
            if scene.index != i {
                return Err(Error::PlanIntegrity(format!(
                    "scenes[{i}] has index {}; scenes must be indexed contiguously from 0",
                    scene.index
                )));
            }
            if scene.word_count != word_count(&scene.raw_prompt) {
                return Err(Error::PlanIntegrity(format!(
                    "scenes[{i}]: word_count {} does not match the raw prompt",
                    scene.word_count
                )));
            }
            let mut seen = BTreeSet::new();
            for name in &scene.present_subjects {
                if !names.contains(name.as_str()) {
                    return Err(Error::PlanIntegrity(format!(
                        "scenes[{i}]: subject `{name}` is not defined in the plan"
                    )));
                }
                if !seen.insert(name) {
                    return Err(Error::PlanIntegrity(format!(
                        "scenes[{i}]: subject `{name}` listed twice"
                    )));
                }
                if contains_whole_word(&scene.rewritten_prompt, name) {
                    return Err(Error::PlanIntegrity(format!(
                        "scenes[{i}]: rewritten prompt still names `{name}`"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the compact serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let value: serde_json::Value = io::read_json(path)?;
        match value.get("schema").and_then(|s| s.as_str()) {
            Some(PLAN_SCHEMA) => {}
            Some(other) => {
                return Err(Error::schema(
                    format!("{}: schema", path.display()),
                    format!("unsupported plan schema `{other}`; regenerate the plan with `dreamstory plan`"),
                ))
            }
            None => return Err(Error::schema(format!("{}: schema", path.display()), "missing")),
        }
        let plan: StoryPlan = serde_json::from_value(value)
            .map_err(|e| Error::schema(path.display().to_string(), e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }
}
