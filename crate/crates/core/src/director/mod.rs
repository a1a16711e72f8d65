//! LLM story director: subject extraction, scene prompts, presence
//! annotation and name rewriting, assembled into a validated [`StoryPlan`].

mod heuristic;
mod parse;
mod templates;

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use heuristic::HeuristicLlm;
pub use parse::{parse_structured_response, validate_schema};
pub use templates::{Template, TemplateSet, MIN_EXAMPLES, STAGES};

use crate::backends::{LlmClient, Message};
use crate::error::{Error, Result};
use crate::plan::{validate_type_token, SceneSpec, StoryPlan, SubjectSpec, TraceEntry, PLAN_SCHEMA};
use crate::text::{contains_whole_word, jaccard, replace_whole_word, word_count};

/// First words of the corrective message sent after a rejected answer.
pub const RETRY_PREFIX: &str = "Your previous answer was rejected";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DirectorConfig {
    pub max_subjects: usize,
    pub n_scenes: Option<usize>,
    /// Cap on the scene count when the LLM chooses it.
    pub max_scenes: usize,
    pub word_limit: usize,
    pub max_retries: usize,
    pub jaccard_floor: f64,
    pub workers: usize,
}

impl Default for DirectorConfig {
    fn default() -> Self {
        Self {
            max_subjects: 4,
            n_scenes: None,
            max_scenes: 12,
            word_limit: 40,
            max_retries: 3,
            jaccard_floor: 0.3,
            workers: 1,
        }
    }
}

pub(crate) enum Verdict<T> {
    Accept(T),
    /// Rejected; the error is raised once retries run out.
    Retry(Error),
    /// Usable but flawed: retried while attempts remain, then kept with a
    /// trace note.
    Soft(T, String),
}

fn format_error(reason: impl Into<String>) -> Error {
    Error::LlmFormat {
        stage: String::new(),
        reason: reason.into(),
        text: String::new(),
    }
}

fn str_field<'v>(v: &'v Value, key: &str) -> &'v str {
    v.get(key).and_then(Value::as_str).unwrap_or_default().trim()
}

pub struct Director<'a> {
    llm: &'a dyn LlmClient,
    templates: &'a TemplateSet,
    config: &'a DirectorConfig,
}

impl<'a> Director<'a> {
    pub fn new(llm: &'a dyn LlmClient, templates: &'a TemplateSet, config: &'a DirectorConfig) -> Self {
        Self {
            llm,
            templates,
            config,
        }
    }

    pub(crate) fn ask<T>(
        &self,
        label: &str,
        stage: &str,
        vars: &[(&str, &str)],
        trace: &mut Vec<TraceEntry>,
        judge: impl Fn(&Value) -> Verdict<T>,
    ) -> Result<T> {
        let mut messages = self.templates.get(stage)?.render(vars);
        let attempts = self.config.max_retries + 1;
        let mut last_error = None;
        for attempt in 0..attempts {
            let response = self.llm.complete(&messages).map_err(|e| e.at_stage(label))?;
            trace.push(TraceEntry {
                stage: label.to_string(),
                response: response.clone(),
            });
            let verdict = match parse_structured_response(&response, stage) {
                Ok(value) => judge(&value),
                Err(e) => Verdict::Retry(e),
            };
            let error = match verdict {
                Verdict::Accept(v) => return Ok(v),
                Verdict::Soft(v, note) if attempt + 1 == attempts => {
                    trace.push(TraceEntry {
                        stage: format!("{label}/flag"),
                        response: note,
                    });
                    return Ok(v);
                }
                Verdict::Soft(_, note) => format_error(note),
                Verdict::Retry(e) => e,
            };
            let error = match error {
                Error::LlmFormat { reason, .. } => Error::LlmFormat {
                    stage: label.to_string(),
                    reason,
                    text: response.clone(),
                },
                other => other,
            };
            log::debug!("{label}: attempt {} rejected: {error}", attempt + 1);
            messages.push(Message::assistant(response));
            messages.push(Message::user(format!(
                "{RETRY_PREFIX}: {error}. Reply again with only the corrected JSON object."
            )));
            last_error = Some(error);
        }
        Err(last_error.expect("at least one attempt"))
    }

    /// Names first, then portrait details and a short descriptor per subject
    /// in follow-up turns.
    pub fn extract_subjects(
        &self,
        story: &str,
        max_subjects: usize,
        trace: &mut Vec<TraceEntry>,
    ) -> Result<Vec<SubjectSpec>> {
        if story.trim().is_empty() {
            return Err(Error::Input("story text is empty".into()));
        }
        if max_subjects == 0 {
            return Err(Error::Input("max_subjects must be at least 1".into()));
        }
        let max = max_subjects.to_string();
        let names = self.ask(
            "subjects",
            "subjects",
            &[("story", story), ("max_subjects", &max)],
            trace,
            |v| {
                let has_characters = v.get("has_characters").and_then(Value::as_bool);
                let names: Vec<String> = v["subjects"]
                    .as_array()
                    .into_iter()
                    .flatten()
                    .map(|s| str_field(s, "name").to_string())
                    .collect();
                if names.iter().any(String::is_empty) {
                    return Verdict::Retry(format_error("a subject has an empty name"));
                }
                let unique: BTreeSet<&String> = names.iter().collect();
                if unique.len() != names.len() {
                    return Verdict::Retry(format_error("duplicate subject names"));
                }
                if names.len() > max_subjects {
                    return Verdict::Retry(format_error(format!(
                        "{} subjects listed, at most {max_subjects} allowed",
                        names.len()
                    )));
                }
                match (names.is_empty(), has_characters) {
                    (true, Some(false)) => Verdict::Accept(names),
                    (true, _) => Verdict::Retry(format_error("empty subject list")),
                    (false, Some(false)) => Verdict::Retry(format_error(
                        "`has_characters` is false but subjects were listed",
                    )),
                    (false, _) => Verdict::Accept(names),
                }
            },
        )?;

        let mut subjects = Vec::with_capacity(names.len());
        for name in names {
            let (portrait_prompt, type_token, style_tags) = self.ask(
                &format!("subject_details/{name}"),
                "subject_details",
                &[("story", story), ("name", &name)],
                trace,
                |v| {
                    let portrait = str_field(v, "portrait_prompt").to_string();
                    let token = str_field(v, "type_token").to_string();
                    if portrait.is_empty() {
                        return Verdict::Retry(format_error("empty portrait_prompt"));
                    }
                    if let Err(e) = validate_type_token(&token) {
                        return Verdict::Retry(format_error(e));
                    }
                    let tags = v
                        .get("style_tags")
                        .and_then(Value::as_array)
                        .into_iter()
                        .flatten()
                        .filter_map(Value::as_str)
                        .map(str::to_string)
                        .collect::<Vec<_>>();
                    Verdict::Accept((portrait, token, tags))
                },
            )?;
            let max_words = crate::plan::DESCRIPTOR_MAX_WORDS.to_string();
            let spec = self.ask(
                &format!("descriptor/{name}"),
                "descriptor",
                &[
                    ("name", &name),
                    ("type_token", &type_token),
                    ("portrait_prompt", &portrait_prompt),
                    ("max_words", &max_words),
                ],
                trace,
                |v| {
                    let spec = SubjectSpec {
                        name: name.clone(),
                        portrait_prompt: portrait_prompt.clone(),
                        short_descriptor: str_field(v, "short_descriptor").to_string(),
                        type_token: type_token.clone(),
                        style_tags: style_tags.clone(),
                    };
                    match spec.validate() {
                        Ok(()) => Verdict::Accept(spec),
                        Err(e) => Verdict::Retry(format_error(e)),
                    }
                },
            )?;
            subjects.push(spec);
        }
        Ok(subjects)
    }

    pub fn generate_scenes(
        &self,
        story: &str,
        subjects: &[SubjectSpec],
        n_scenes: Option<usize>,
        trace: &mut Vec<TraceEntry>,
    ) -> Result<Vec<SceneSpec>> {
        if n_scenes == Some(0) {
            return Err(Error::Input("scene count must be at least 1".into()));
        }
        let names = if subjects.is_empty() {
            "(none)".to_string()
        } else {
            subjects.iter().map(|s| s.name.as_str()).collect::<Vec<_>>().join(", ")
        };
        let count = match n_scenes {
            Some(n) => n.to_string(),
            None => format!("your choice, at most {}", self.config.max_scenes),
        };
        let limit = self.config.word_limit;
        let limit_text = limit.to_string();
        let prompts = self.ask(
            "scenes",
            "scenes",
            &[
                ("story", story),
                ("subjects", &names),
                ("scene_count", &count),
                ("word_limit", &limit_text),
            ],
            trace,
            |v| {
                let prompts: Vec<String> = v["scenes"]
                    .as_array()
                    .into_iter()
                    .flatten()
                    .filter_map(Value::as_str)
                    .map(|s| s.trim().to_string())
                    .collect();
                if prompts.iter().any(String::is_empty) {
                    return Verdict::Retry(format_error("empty scene prompt"));
                }
                match n_scenes {
                    Some(n) if prompts.len() != n => {
                        return Verdict::Retry(Error::SceneCountMismatch {
                            requested: n,
                            returned: prompts.len(),
                        })
                    }
                    None if prompts.is_empty() => {
                        return Verdict::Retry(format_error("no scenes returned"))
                    }
                    None if prompts.len() > self.config.max_scenes => {
                        return Verdict::Retry(Error::SceneCountMismatch {
                            requested: self.config.max_scenes,
                            returned: prompts.len(),
                        })
                    }
                    _ => {}
                }
                let long: Vec<String> = prompts
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| word_count(p) > limit)
                    .map(|(i, p)| format!("scene {i} has {} words", word_count(p)))
                    .collect();
                if long.is_empty() {
                    Verdict::Accept(prompts)
                } else {
                    let note = format!("word limit {limit} exceeded: {}", long.join(", "));
                    Verdict::Soft(prompts, note)
                }
            },
        )?;
        Ok(prompts
            .into_iter()
            .enumerate()
            .map(|(i, p)| SceneSpec::new(i, p))
            .collect())
    }

    /// One yes/no question per subject, against the raw scene prompt.
    pub fn annotate_presence(
        &self,
        scene: &SceneSpec,
        subjects: &[SubjectSpec],
        trace: &mut Vec<TraceEntry>,
    ) -> Result<Vec<String>> {
        let mut present = Vec::new();
        for s in subjects {
            let yes = self.ask(
                &format!("presence/{}/{}", scene.index, s.name),
                "presence",
                &[
                    ("name", &s.name),
                    ("descriptor", &s.short_descriptor),
                    ("scene", &scene.raw_prompt),
                ],
                trace,
                |v| Verdict::Accept(v["present"].as_bool().unwrap_or(false)),
            )?;
            if yes {
                present.push(s.name.clone());
            }
        }
        Ok(present)
    }

    pub fn rewrite_scene(
        &self,
        scene: &SceneSpec,
        subjects: &[SubjectSpec],
        trace: &mut Vec<TraceEntry>,
    ) -> Result<String> {
        let present: Vec<&SubjectSpec> = scene
            .present_subjects
            .iter()
            .map(|n| {
                subjects
                    .iter()
                    .find(|s| &s.name == n)
                    .ok_or_else(|| Error::PlanIntegrity(format!("unknown subject `{n}`")))
            })
            .collect::<Result<_>>()?;
        if present.is_empty() {
            return Ok(scene.raw_prompt.clone());
        }
        let replacements = present
            .iter()
            .map(|s| format!("{} -> {}", s.name, s.short_descriptor))
            .collect::<Vec<_>>()
            .join("\n");
        // lexical baseline: the raw prompt with names swapped mechanically
        let baseline = present.iter().fold(scene.raw_prompt.clone(), |text, s| {
            replace_whole_word(&text, &s.name, &s.short_descriptor)
        });
        let floor = self.config.jaccard_floor;
        self.ask(
            &format!("rewrite/{}", scene.index),
            "rewrite",
            &[("scene", &scene.raw_prompt), ("replacements", &replacements)],
            trace,
            |v| {
                let text = str_field(v, "rewritten").to_string();
                if text.is_empty() {
                    return Verdict::Retry(format_error("empty rewrite"));
                }
                let lower = text.to_lowercase();
                for s in &present {
                    if contains_whole_word(&text, &s.name) {
                        return Verdict::Retry(Error::RewriteLeak {
                            scene: scene.index,
                            name: s.name.clone(),
                        });
                    }
                    if !lower.contains(&s.short_descriptor.to_lowercase()) {
                        return Verdict::Retry(format_error(format!(
                            "descriptor `{}` missing from the rewrite",
                            s.short_descriptor
                        )));
                    }
                }
                let overlap = jaccard(&baseline, &text);
                if overlap < floor {
                    return Verdict::Retry(format_error(format!(
                        "rewrite drifted from the scene (word overlap {overlap:.2} < {floor})"
                    )));
                }
                Verdict::Accept(text)
            },
        )
    }

    fn finish_scene(&self, mut scene: SceneSpec, subjects: &[SubjectSpec]) -> Result<(SceneSpec, Vec<TraceEntry>)> {
        let mut trace = Vec::new();
        if !subjects.is_empty() {
            scene.present_subjects = self.annotate_presence(&scene, subjects, &mut trace)?;
        }
        scene.rewritten_prompt = self.rewrite_scene(&scene, subjects, &mut trace)?;
        Ok((scene, trace))
    }

    pub fn build_story_plan(&self, story: &str) -> Result<StoryPlan> {
        let mut trace = Vec::new();
        let subjects = self.extract_subjects(story, self.config.max_subjects, &mut trace)?;
        let scenes = self.generate_scenes(story, &subjects, self.config.n_scenes, &mut trace)?;

        let finish = |scenes: Vec<SceneSpec>| -> Vec<Result<(SceneSpec, Vec<TraceEntry>)>> {
            scenes
                .into_par_iter()
                .map(|s| self.finish_scene(s, &subjects))
                .collect()
        };
        let results = if self.config.workers > 1 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(self.config.workers)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?
                .install(|| finish(scenes))
        } else {
            scenes
                .into_iter()
                .map(|s| self.finish_scene(s, &subjects))
                .collect()
        };
        let mut done = Vec::with_capacity(results.len());
        for r in results {
            let (scene, scene_trace) = r?;
            trace.extend(scene_trace);
            done.push(scene);
        }

        let plan = StoryPlan {
            schema: PLAN_SCHEMA.to_string(),
            story_text: story.to_string(),
            subjects,
            scenes: done,
            n_scenes_requested: self.config.n_scenes,
            director_model_id: self.llm.model_id().to_string(),
            creation_trace: trace,
        };
        plan.validate()?;
        Ok(plan)
    }
}

/// Runs every director stage with the given templates.
pub fn build_story_plan(
    story: &str,
    config: &DirectorConfig,
    llm: &dyn LlmClient,
    templates: &TemplateSet,
) -> Result<StoryPlan> {
    Director::new(llm, templates, config).build_story_plan(story)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::FnLlm;

    fn last_user(m: &[Message]) -> &str {
        &m.iter()
            .rev()
            .find(|m| m.role == crate::backends::Role::User && !m.content.starts_with(RETRY_PREFIX))
            .unwrap()
            .content
    }

    fn stage(m: &[Message]) -> String {
        TemplateSet::builtin().stage_of(&m[0].content).unwrap().to_string()
    }

    /// Scripted two-subject director.
    fn fixture(m: &[Message]) -> Result<String> {
        let user = last_user(m);
        let subject = user
            .lines()
            .find_map(|l| l.strip_prefix("Subject: "))
            .unwrap_or_default();
        Ok(match stage(m).as_str() {
            "subjects" => r#"{"has_characters": true, "subjects": [{"name": "Kondo"}, {"name": "Mira"}]}"#.into(),
            "subject_details" if subject == "Kondo" => {
                r#"{"portrait_prompt": "a towering silverback gorilla", "type_token": "gorilla", "style_tags": []}"#.into()
            }
            "subject_details" => {
                r#"{"portrait_prompt": "a small girl in a yellow raincoat", "type_token": "girl"}"#.into()
            }
            "descriptor" if subject == "Kondo" => r#"{"short_descriptor": "towering gorilla"}"#.into(),
            "descriptor" => r#"{"short_descriptor": "girl in yellow raincoat"}"#.into(),
            "scenes" => r#"{"scenes": ["Kondo pounds his chest atop the skyscraper", "Mira waves from the street below", "Kondo lifts Mira onto the roof", "The city lights flicker at night"]}"#.into(),
            "presence" => {
                let scene = user.lines().find_map(|l| l.strip_prefix("Scene: ")).unwrap();
                format!("{{\"present\": {}}}", contains_whole_word(scene, subject))
            }
            "rewrite" => {
                let scene = user.lines().find_map(|l| l.strip_prefix("Scene: ")).unwrap();
                let out = scene
                    .replace("Kondo", "the towering gorilla")
                    .replace("Mira", "the girl in yellow raincoat");
                format!("{{\"rewritten\": \"{out}\"}}")
            }
            other => panic!("unexpected stage {other}"),
        })
    }

    fn director_plan(llm: &dyn LlmClient, config: &DirectorConfig) -> Result<StoryPlan> {
        build_story_plan("Kondo and Mira in the city.", config, llm, &TemplateSet::builtin())
    }

    #[test]
    fn fixture_story_builds_a_valid_plan() {
        let llm = FnLlm::new("fixture", fixture);
        let plan = director_plan(&llm, &DirectorConfig::default()).unwrap();
        assert_eq!(plan.subjects.len(), 2);
        assert_eq!(plan.scenes.len(), 4);
        assert_eq!(plan.subjects[0].short_descriptor, "towering gorilla");
        assert_eq!(plan.subjects[0].type_token, "gorilla");
        assert_eq!(plan.scenes[0].present_subjects, vec!["Kondo"]);
        assert_eq!(plan.scenes[2].present_subjects, vec!["Kondo", "Mira"]);
        assert!(plan.scenes[3].present_subjects.is_empty());
        assert_eq!(plan.scenes[3].rewritten_prompt, plan.scenes[3].raw_prompt);
        plan.validate().unwrap();
        // one exchange per stage call: 1 + 2*2 + 1 + 4*2 presence + 3 rewrites
        assert_eq!(plan.creation_trace.len(), 1 + 4 + 1 + 8 + 3);
    }

    #[test]
    fn parallel_scenes_give_the_same_plan() {
        let llm = FnLlm::new("fixture", fixture);
        let serial = director_plan(&llm, &DirectorConfig::default()).unwrap();
        let config = DirectorConfig {
            workers: 4,
            ..DirectorConfig::default()
        };
        assert_eq!(serial, director_plan(&llm, &config).unwrap());
    }

    #[test]
    fn garbage_llm_names_the_stage() {
        let llm = FnLlm::new("junk", |_: &[Message]| Ok("no idea".to_string()));
        let err = director_plan(&llm, &DirectorConfig::default()).unwrap_err();
        match err {
            Error::LlmFormat { stage, .. } => assert_eq!(stage, "subjects"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn retries_quote_the_previous_answer() {
        let calls = std::sync::Mutex::new(Vec::new());
        let llm = FnLlm::new("flaky", |m: &[Message]| {
            calls.lock().unwrap().push(m.len());
            if m.last().unwrap().content.starts_with(RETRY_PREFIX) {
                Ok(r#"{"has_characters": true, "subjects": [{"name": "Kondo"}]}"#.to_string())
            } else {
                Ok(r#"{"has_characters": true, "subjects": []}"#.to_string())
            }
        });
        let director_config = DirectorConfig::default();
        let templates = TemplateSet::builtin();
        let d = Director::new(&llm, &templates, &director_config);
        let mut trace = Vec::new();
        let names_only = d.ask("subjects", "subjects", &[("story", "x"), ("max_subjects", "2")], &mut trace, |v| {
            match v["subjects"].as_array().map(|a| a.len()) {
                Some(n) if n > 0 => Verdict::Accept(n),
                _ => Verdict::Retry(format_error("empty subject list")),
            }
        });
        assert_eq!(names_only.unwrap(), 1);
        let calls = calls.lock().unwrap();
        assert_eq!(calls[1], calls[0] + 2);
        assert_eq!(trace.len(), 2);
    }

    #[test]
    fn empty_subject_list_is_a_format_error() {
        let llm = FnLlm::new("empty", |_: &[Message]| Ok(r#"{"subjects": []}"#.to_string()));
        let templates = TemplateSet::builtin();
        let config = DirectorConfig::default();
        let err = Director::new(&llm, &templates, &config)
            .extract_subjects("Someone walks.", 3, &mut Vec::new())
            .unwrap_err();
        assert!(err.is_llm_format());
    }

    #[test]
    fn landscape_story_has_no_subjects() {
        let llm = FnLlm::new("land", |m: &[Message]| {
            Ok(match stage(m).as_str() {
                "subjects" => r#"{"has_characters": false, "subjects": []}"#.to_string(),
                "scenes" => r#"{"scenes": ["Fog over a valley", "Sun over a river"]}"#.to_string(),
                other => panic!("unexpected stage {other}"),
            })
        });
        let plan = director_plan(&llm, &DirectorConfig::default()).unwrap();
        assert!(plan.subjects.is_empty());
        assert_eq!(plan.scenes.len(), 2);
        assert!(plan.scenes.iter().all(|s| s.present_subjects.is_empty()));
    }

    #[test]
    fn scene_count_mismatch_after_retries() {
        let llm = FnLlm::new("three", |_: &[Message]| Ok(r#"{"scenes": ["a", "b", "c"]}"#.to_string()));
        let templates = TemplateSet::builtin();
        let config = DirectorConfig::default();
        let d = Director::new(&llm, &templates, &config);
        let mut trace = Vec::new();
        let err = d.generate_scenes("story", &[], Some(6), &mut trace).unwrap_err();
        assert!(matches!(err, Error::SceneCountMismatch { requested: 6, returned: 3 }));
        assert_eq!(trace.len(), 4);
        let scenes = d.generate_scenes("story", &[], None, &mut Vec::new()).unwrap();
        assert_eq!(scenes.len(), 3);
    }

    #[test]
    fn long_scene_is_flagged_not_truncated() {
        let long = vec!["word"; 60].join(" ");
        let body = format!("{{\"scenes\": [\"{long}\"]}}");
        let llm = FnLlm::new("long", move |_: &[Message]| Ok(body.clone()));
        let templates = TemplateSet::builtin();
        let config = DirectorConfig::default();
        let mut trace = Vec::new();
        let scenes = Director::new(&llm, &templates, &config)
            .generate_scenes("story", &[], Some(1), &mut trace)
            .unwrap();
        assert_eq!(scenes[0].word_count, 60);
        assert_eq!(trace.len(), 5);
        assert_eq!(trace[4].stage, "scenes/flag");
        assert!(trace[4].response.contains("60 words"));
    }

    #[test]
    fn surviving_name_is_a_rewrite_leak() {
        let llm = FnLlm::new("leaky", |_: &[Message]| {
            Ok(r#"{"rewritten": "Kondo the towering gorilla climbs the tower"}"#.to_string())
        });
        let templates = TemplateSet::builtin();
        let config = DirectorConfig::default();
        let mut scene = SceneSpec::new(2, "Kondo climbs the tower");
        scene.present_subjects = vec!["Kondo".into()];
        let kondo = SubjectSpec {
            name: "Kondo".into(),
            portrait_prompt: "a gorilla".into(),
            short_descriptor: "towering gorilla".into(),
            type_token: "gorilla".into(),
            style_tags: vec![],
        };
        let err = Director::new(&llm, &templates, &config)
            .rewrite_scene(&scene, &[kondo], &mut Vec::new())
            .unwrap_err();
        assert!(matches!(err, Error::RewriteLeak { scene: 2, ref name } if name == "Kondo"));
    }
}
