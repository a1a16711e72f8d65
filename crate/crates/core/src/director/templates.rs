//! Prompt templates with in-context examples, one file per stage.
//!
//! File layout:
//!
//! ```text
//! [system]
//! instructions
//! [example]
//! example input
//! ---
//! example output
//! [user]
//! request with {placeholders}
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::backends::Message;
use crate::error::{Error, Result};
use crate::io;

pub const MIN_EXAMPLES: usize = 2;

pub const STAGES: [&str; 8] = [
    "subjects",
    "subject_details",
    "descriptor",
    "scenes",
    "presence",
    "rewrite",
    "pool",
    "case",
];

const BUILTIN: [(&str, &str); 8] = [
    ("subjects", include_str!("../../templates/subjects.txt")),
    ("subject_details", include_str!("../../templates/subject_details.txt")),
    ("descriptor", include_str!("../../templates/descriptor.txt")),
    ("scenes", include_str!("../../templates/scenes.txt")),
    ("presence", include_str!("../../templates/presence.txt")),
    ("rewrite", include_str!("../../templates/rewrite.txt")),
    ("pool", include_str!("../../templates/pool.txt")),
    ("case", include_str!("../../templates/case.txt")),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub stage: String,
    pub system: String,
    pub examples: Vec<(String, String)>,
    pub user: String,
}

fn fill(text: &str, vars: &[(&str, &str)]) -> String {
    let mut out = text.to_string();
    for (key, value) in vars {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

impl Template {
    pub fn parse(stage: &str, text: &str) -> Result<Self> {
        let location = format!("template `{stage}`");
        let mut sections: Vec<(String, Vec<&str>)> = Vec::new();
        for line in text.lines() {
            let header = line.trim();
            if matches!(header, "[system]" | "[example]" | "[user]") {
                sections.push((header.to_string(), Vec::new()));
            } else if let Some((_, body)) = sections.last_mut() {
                body.push(line);
            } else if !header.is_empty() {
                return Err(Error::schema(&location, "text before the first section"));
            }
        }
        let mut system = None;
        let mut user = None;
        let mut examples = Vec::new();
        for (header, body) in sections {
            let body = body.join("\n").trim().to_string();
            match header.as_str() {
                "[system]" => system = Some(body),
                "[user]" => user = Some(body),
                _ => {
                    let (input, output) = body
                        .split_once("\n---\n")
                        .ok_or_else(|| Error::schema(&location, "example without `---` separator"))?;
                    examples.push((input.trim().to_string(), output.trim().to_string()));
                }
            }
        }
        let template = Template {
            stage: stage.to_string(),
            system: system.ok_or_else(|| Error::schema(&location, "missing [system] section"))?,
            examples,
            user: user.ok_or_else(|| Error::schema(&location, "missing [user] section"))?,
        };
        if template.examples.len() < MIN_EXAMPLES {
            return Err(Error::schema(
                &location,
                format!(
                    "{} in-context examples, at least {MIN_EXAMPLES} required",
                    template.examples.len()
                ),
            ));
        }
        Ok(template)
    }

    /// System message, each example as a user/assistant pair, then the request.
    pub fn render(&self, vars: &[(&str, &str)]) -> Vec<Message> {
        let mut messages = vec![Message::system(fill(&self.system, vars))];
        for (input, output) in &self.examples {
            messages.push(Message::user(input.clone()));
            messages.push(Message::assistant(output.clone()));
        }
        messages.push(Message::user(fill(&self.user, vars)));
        messages
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<String, Template>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(stage, text)| {
                let t = Template::parse(stage, text).expect("builtin templates are valid");
                (stage.to_string(), t)
            })
            .collect();
        Self { templates }
    }

    /// Builtins overridden by any `<stage>.txt` found in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self> {
        let mut set = Self::builtin();
        for stage in STAGES {
            let path = dir.join(format!("{stage}.txt"));
            if path.is_file() {
                let text = io::read_to_string(&path)?;
                let t = Template::parse(stage, &text).map_err(|e| match e {
                    Error::Schema { message, .. } => Error::schema(path.display().to_string(), message),
                    other => other,
                })?;
                set.templates.insert(stage.to_string(), t);
            }
        }
        Ok(set)
    }

    pub fn get(&self, stage: &str) -> Result<&Template> {
        self.templates
            .get(stage)
            .ok_or_else(|| Error::Config(format!("no template for stage `{stage}`")))
    }

    /// Stage whose system prompt matches `system`, if any.
    pub fn stage_of(&self, system: &str) -> Option<&str> {
        self.templates
            .values()
            .find(|t| t.system == system)
            .map(|t| t.stage.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Template> {
        self.templates.values()
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}
