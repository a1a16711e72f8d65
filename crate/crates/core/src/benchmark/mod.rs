//! Synthetic multi-subject benchmarks: a subject pool, cases with exactly k
//! pool subjects, review flags and manifest round-trips.

mod evaluate;

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use evaluate::{annotation_decisions, case_plan, evaluate_benchmark, BenchEvalSetup};

use crate::backends::LlmClient;
use crate::director::{Director, DirectorConfig, TemplateSet, Verdict};
use crate::error::{Error, Result};
use crate::io;
use crate::plan::SubjectSpec;
use crate::text::{contains_whole_word, word_count};
use crate::types::derive_seed;

pub const BENCH_SCHEMA: &str = "dreamstory.bench.v1";
pub const MAX_SUBJECTS_PER_CASE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    #[default]
    Auto,
    Approved,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkCase {
    pub case_id: String,
    pub k_subjects: usize,
    pub subjects: Vec<SubjectSpec>,
    pub scene_prompt: String,
    pub word_count: usize,
    #[serde(default)]
    pub review_status: ReviewStatus,
}

/// One discarded LLM answer during case generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRejection {
    pub case_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub schema: String,
    pub generator_model_id: String,
    pub seed: u64,
    pub word_limit: usize,
    /// Number of cases per subject count.
    pub group_sizes: BTreeMap<usize, usize>,
    pub pool: Vec<SubjectSpec>,
    pub cases: Vec<BenchmarkCase>,
    #[serde(default)]
    pub rejections: Vec<CaseRejection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub pool_size: usize,
    pub cases_per_group: usize,
    pub groups: Vec<usize>,
    pub word_limit: usize,
    pub seed: u64,
    pub max_retries: usize,
    /// Pool requests allowed before giving up on unique subjects.
    pub max_pool_rounds: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            pool_size: 12,
            cases_per_group: 100,
            groups: vec![0, 1, 2, 3],
            word_limit: 40,
            seed: 0,
            max_retries: 3,
            max_pool_rounds: 5,
        }
    }
}

fn mentions(text: &str, word: &str) -> bool {
    contains_whole_word(&text.to_lowercase(), &word.to_lowercase())
}

/// Pool subjects other than `chosen` whose names appear in `prompt`.
pub fn foreign_mentions<'p>(prompt: &str, chosen: &[SubjectSpec], pool: &'p [SubjectSpec]) -> Vec<&'p str> {
    pool.iter()
        .filter(|p| !chosen.iter().any(|c| c.name == p.name))
        .filter(|p| mentions(prompt, &p.name))
        .map(|p| p.name.as_str())
        .collect()
}

fn director_config(max_retries: usize) -> DirectorConfig {
    DirectorConfig {
        max_retries,
        ..DirectorConfig::default()
    }
}

fn pool_entry(v: &Value) -> Option<SubjectSpec> {
    let field = |k: &str| v.get(k).and_then(Value::as_str).unwrap_or_default().trim().to_string();
    let spec = SubjectSpec {
        name: field("name"),
        portrait_prompt: field("portrait_prompt"),
        short_descriptor: field("short_descriptor"),
        type_token: field("type_token").to_lowercase(),
        style_tags: Vec::new(),
    };
    match spec.validate() {
        Ok(()) => Some(spec),
        Err(e) => {
            log::warn!("pool entry dropped: {e}");
            None
        }
    }
}

/// Asks for subjects until `n` unique ones are collected. Entries repeating a
/// name or a portrait prompt are dropped and requested again.
pub fn gen_subject_pool(
    llm: &dyn LlmClient,
    templates: &TemplateSet,
    n: usize,
    config: &BenchConfig,
) -> Result<Vec<SubjectSpec>> {
    if n == 0 {
        return Err(Error::Input("subject pool size must be at least 1".into()));
    }
    let dconfig = director_config(config.max_retries);
    let director = Director::new(llm, templates, &dconfig);
    let mut pool: Vec<SubjectSpec> = Vec::new();
    for round in 0..config.max_pool_rounds {
        let want = (n - pool.len()).to_string();
        let avoid = pool.iter().map(|s| s.name.as_str()).collect::<Vec<_>>().join(", ");
        let batch = director.ask(
            &format!("pool/{round}"),
            "pool",
            &[("n", &want), ("avoid", &avoid)],
            &mut Vec::new(),
            |v| Verdict::Accept(v["subjects"].as_array().cloned().unwrap_or_default()),
        )?;
        for spec in batch.iter().filter_map(pool_entry) {
            let duplicate = pool.iter().any(|p| {
                p.name.eq_ignore_ascii_case(&spec.name) || p.portrait_prompt == spec.portrait_prompt
            });
            if duplicate {
                log::info!("duplicate subject `{}` dropped", spec.name);
            } else if pool.len() < n {
                pool.push(spec);
            }
        }
        if pool.len() == n {
            return Ok(pool);
        }
    }
    Err(Error::PoolExhausted {
        wanted: n,
        got: pool.len(),
    })
}

fn case_problem(prompt: &str, chosen: &[SubjectSpec], pool: &[SubjectSpec], word_limit: usize) -> Option<String> {
    if prompt.trim().is_empty() {
        return Some("scene_prompt is empty".into());
    }
    let words = word_count(prompt);
    if words > word_limit {
        return Some(format!("scene_prompt has {words} words, limit is {word_limit}"));
    }
    let foreign = foreign_mentions(prompt, chosen, pool);
    if !foreign.is_empty() {
        return Some(format!("scene_prompt mentions other subjects: {}", foreign.join(", ")));
    }
    let missing: Vec<&str> = chosen
        .iter()
        .filter(|s| !mentions(prompt, &s.name) && !mentions(prompt, &s.short_descriptor))
        .map(|s| s.name.as_str())
        .collect();
    if !missing.is_empty() {
        return Some(format!("scene_prompt does not mention {}", missing.join(", ")));
    }
    None
}

fn subject_lines(chosen: &[SubjectSpec]) -> String {
    if chosen.is_empty() {
        return "(none)".into();
    }
    chosen
        .iter()
        .map(|s| format!("- {} ({}): {}", s.name, s.type_token, s.portrait_prompt))
        .collect::<Vec<_>>()
        .join("\n")
}

/// `n_cases` cases with `k` distinct pool subjects each, sampled from a
/// stream seeded by `(seed, k)`.
///
/// Answers that break the word limit or mention the wrong subjects are
/// logged and re-asked; a case whose last answer still fails is kept with
/// `review_status = rejected`.
#[allow(clippy::too_many_arguments)]
pub fn gen_cases(
    pool: &[SubjectSpec],
    k: usize,
    n_cases: usize,
    word_limit: usize,
    llm: &dyn LlmClient,
    templates: &TemplateSet,
    seed: u64,
    max_retries: usize,
) -> Result<(Vec<BenchmarkCase>, Vec<CaseRejection>)> {
    if k > MAX_SUBJECTS_PER_CASE {
        return Err(Error::Input(format!(
            "cases hold at most {MAX_SUBJECTS_PER_CASE} subjects, {k} requested"
        )));
    }
    if pool.len() < k {
        return Err(Error::Input(format!("pool of {} cannot supply {k} subjects", pool.len())));
    }
    let dconfig = director_config(max_retries);
    let director = Director::new(llm, templates, &dconfig);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("cases/{k}")));
    let limit = word_limit.to_string();
    let mut cases = Vec::with_capacity(n_cases);
    let log = RefCell::new(Vec::new());
    for i in 0..n_cases {
        let case_id = format!("k{k}-{i:03}");
        let chosen: Vec<SubjectSpec> = rand::seq::index::sample(&mut rng, pool.len(), k)
            .into_iter()
            .map(|j| pool[j].clone())
            .collect();
        let lines = subject_lines(&chosen);
        let prompt = director.ask(
            &format!("case/{case_id}"),
            "case",
            &[("word_limit", &limit), ("subjects", &lines)],
            &mut Vec::new(),
            |v| {
                let prompt = v["scene_prompt"].as_str().unwrap_or_default().trim().to_string();
                match case_problem(&prompt, &chosen, pool, word_limit) {
                    None => Verdict::Accept(prompt),
                    Some(reason) => {
                        log::info!("{case_id}: answer rejected, {reason}");
                        log.borrow_mut().push(CaseRejection {
                            case_id: case_id.clone(),
                            reason: reason.clone(),
                        });
                        Verdict::Soft(prompt, reason)
                    }
                }
            },
        )?;
        let review_status = if case_problem(&prompt, &chosen, pool, word_limit).is_some() {
            log::warn!("{case_id}: rejected after {} attempts", max_retries + 1);
            ReviewStatus::Rejected
        } else {
            ReviewStatus::Auto
        };
        cases.push(BenchmarkCase {
            case_id,
            k_subjects: k,
            subjects: chosen,
            word_count: word_count(&prompt),
            scene_prompt: prompt,
            review_status,
        });
    }
    Ok((cases, log.into_inner()))
}

pub fn build_benchmark(llm: &dyn LlmClient, templates: &TemplateSet, config: &BenchConfig) -> Result<BenchmarkManifest> {
    let pool = gen_subject_pool(llm, templates, config.pool_size, config)?;
    let mut cases = Vec::new();
    let mut rejections = Vec::new();
    let mut group_sizes = BTreeMap::new();
    for &k in &config.groups {
        let (group, log) = gen_cases(
            &pool,
            k,
            config.cases_per_group,
            config.word_limit,
            llm,
            templates,
            config.seed,
            config.max_retries,
        )?;
        group_sizes.insert(k, group.len());
        cases.extend(group);
        rejections.extend(log);
    }
    let manifest = BenchmarkManifest {
        schema: BENCH_SCHEMA.into(),
        generator_model_id: llm.model_id().to_string(),
        seed: config.seed,
        word_limit: config.word_limit,
        group_sizes,
        pool,
        cases,
        rejections,
    };
    manifest.validate()?;
    Ok(manifest)
}

impl BenchmarkManifest {
    /// Cases that evaluation should consider.
    pub fn eval_cases(&self) -> impl Iterator<Item = &BenchmarkCase> {
        self.cases
            .iter()
            .filter(|c| c.review_status != ReviewStatus::Rejected)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |location: String, message: String| Err(Error::schema(location, message));
        if self.schema != BENCH_SCHEMA {
            return bad("schema".into(), format!("expected `{BENCH_SCHEMA}`, found `{}`", self.schema));
        }
        let mut names = BTreeSet::new();
        for (i, s) in self.pool.iter().enumerate() {
            if let Err(e) = s.validate() {
                return bad(format!("pool[{i}]"), e);
            }
            if !names.insert(s.name.to_lowercase()) {
                return bad(format!("pool[{i}]"), format!("duplicate subject `{}`", s.name));
            }
        }
        let mut ids = BTreeSet::new();
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for (i, case) in self.cases.iter().enumerate() {
            let at = |field: &str| format!("cases[{i}].{field}");
            if !ids.insert(case.case_id.as_str()) {
                return bad(at("case_id"), format!("duplicate case id `{}`", case.case_id));
            }
            if case.k_subjects > MAX_SUBJECTS_PER_CASE {
                return bad(
                    at("k_subjects"),
                    format!("{} outside 0..={MAX_SUBJECTS_PER_CASE}", case.k_subjects),
                );
            }
            if case.subjects.len() != case.k_subjects {
                return bad(
                    at("subjects"),
                    format!("{} subjects listed, k_subjects is {}", case.subjects.len(), case.k_subjects),
                );
            }
            let mut seen = BTreeSet::new();
            for s in &case.subjects {
                if !self.pool.iter().any(|p| p == s) {
                    return bad(at("subjects"), format!("`{}` is not a pool subject", s.name));
                }
                if !seen.insert(s.name.as_str()) {
                    return bad(at("subjects"), format!("`{}` listed twice", s.name));
                }
            }
            if case.word_count != word_count(&case.scene_prompt) {
                return bad(at("word_count"), "does not match scene_prompt".into());
            }
            if case.review_status != ReviewStatus::Rejected {
                if case.word_count > self.word_limit {
                    return bad(
                        at("scene_prompt"),
                        format!("{} words exceed the limit of {}", case.word_count, self.word_limit),
                    );
                }
                let foreign = foreign_mentions(&case.scene_prompt, &case.subjects, &self.pool);
                if !foreign.is_empty() {
                    return bad(at("scene_prompt"), format!("mentions {}", foreign.join(", ")));
                }
            }
            *counts.entry(case.k_subjects).or_default() += 1;
        }
        let declared: BTreeMap<usize, usize> =
            self.group_sizes.iter().filter(|(_, n)| **n > 0).map(|(k, n)| (*k, *n)).collect();
        if declared != counts {
            return bad("group_sizes".into(), format!("declared {declared:?}, cases give {counts:?}"));
        }
        Ok(())
    }
}

/// Validates, then writes through a temporary file.
pub fn export_manifest(manifest: &BenchmarkManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    io::write_json(path, manifest)
}

pub fn import_manifest(path: &Path) -> Result<BenchmarkManifest> {
    let location = path.display().to_string();
    let raw: Value = io::read_json(path)?;
    match raw.get("schema").and_then(Value::as_str) {
        Some(BENCH_SCHEMA) => {}
        Some(other) => {
            return Err(Error::schema(
                format!("{location}: schema"),
                format!(
                    "unsupported schema `{other}`; rebuild the benchmark with `dreamstory bench build` \
                     or migrate the file to `{BENCH_SCHEMA}` (fields: schema, generator_model_id, \
                     seed, word_limit, group_sizes, pool, cases)"
                ),
            ))
        }
        None => return Err(Error::schema(format!("{location}: schema"), "missing schema field")),
    }
    let manifest: BenchmarkManifest =
        serde_json::from_value(raw).map_err(|e| Error::schema(&location, e.to_string()))?;
    manifest.validate().map_err(|e| match e {
        Error::Schema { location: at, message } => Error::schema(format!("{location}: {at}"), message),
        other => other,
    })?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{FnLlm, Message};
    use crate::director::HeuristicLlm;
    use serde_json::json;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn small() -> BenchConfig {
        BenchConfig {
            pool_size: 6,
            cases_per_group: 3,
            ..BenchConfig::default()
        }
    }

    fn spec(name: &str, token: &str) -> Value {
        json!({"name": name, "portrait_prompt": format!("a {token} named {name}"),
               "short_descriptor": format!("tall {token}"), "type_token": token})
    }

    #[test]
    fn pool_of_three_from_fixture() {
        let llm = FnLlm::new("fixture", |_m: &[Message]| {
            Ok(json!({"subjects": [spec("Arlo", "dog"), spec("Bea", "girl"), spec("Cy", "man")]}).to_string())
        });
        let pool = gen_subject_pool(&llm, &TemplateSet::builtin(), 3, &small()).unwrap();
        assert_eq!(pool.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(), ["Arlo", "Bea", "Cy"]);
    }

    #[test]
    fn duplicates_are_regenerated() {
        let calls = AtomicUsize::new(0);
        let llm = FnLlm::new("fixture", move |_m: &[Message]| {
            let body = if calls.fetch_add(1, Ordering::SeqCst) == 0 {
                json!({"subjects": [spec("Arlo", "dog"), spec("arlo", "cat")]})
            } else {
                json!({"subjects": [spec("Bea", "girl")]})
            };
            Ok(body.to_string())
        });
        let pool = gen_subject_pool(&llm, &TemplateSet::builtin(), 2, &small()).unwrap();
        assert_eq!(pool.len(), 2);
        assert_eq!(pool[1].name, "Bea");
    }

    #[test]
    fn pool_errors() {
        let llm = HeuristicLlm::default();
        assert!(matches!(gen_subject_pool(&llm, &TemplateSet::builtin(), 0, &small()), Err(Error::Input(_))));
        let stuck = FnLlm::new("fixture", |_m: &[Message]| Ok(json!({"subjects": [spec("Arlo", "dog")]}).to_string()));
        let err = gen_subject_pool(&stuck, &TemplateSet::builtin(), 2, &small()).unwrap_err();
        assert!(matches!(err, Error::PoolExhausted { wanted: 2, got: 1 }));
    }

    #[test]
    fn cases_are_exclusive_and_seeded() {
        let llm = HeuristicLlm::default();
        let t = TemplateSet::builtin();
        let pool = gen_subject_pool(&llm, &t, 6, &small()).unwrap();
        for k in 0..=3 {
            let (cases, _) = gen_cases(&pool, k, 4, 40, &llm, &t, 9, 3).unwrap();
            let (again, _) = gen_cases(&pool, k, 4, 40, &llm, &t, 9, 3).unwrap();
            assert_eq!(cases, again);
            for c in &cases {
                assert_eq!(c.subjects.len(), k);
                assert_eq!(c.review_status, ReviewStatus::Auto);
                assert!(foreign_mentions(&c.scene_prompt, &c.subjects, &pool).is_empty());
                for s in &c.subjects {
                    assert!(mentions(&c.scene_prompt, &s.name));
                }
            }
        }
    }

    #[test]
    fn long_answers_are_logged_then_rejected() {
        let long = vec!["word"; 60].join(" ");
        let llm = FnLlm::new("fixture", move |_m: &[Message]| Ok(json!({"scene_prompt": long.clone()}).to_string()));
        let pool = vec![pool_entry(&spec("Arlo", "dog")).unwrap()];
        let (cases, log) = gen_cases(&pool, 0, 1, 40, &llm, &TemplateSet::builtin(), 1, 2).unwrap();
        assert_eq!(cases[0].review_status, ReviewStatus::Rejected);
        assert_eq!(log.len(), 3);
        assert!(log[0].reason.contains("60 words"));
    }

    #[test]
    fn round_trip_and_schema_errors() {
        let llm = HeuristicLlm::default();
        let mut m = build_benchmark(&llm, &TemplateSet::builtin(), &small()).unwrap();
        assert_eq!(m.group_sizes, BTreeMap::from([(0, 3), (1, 3), (2, 3), (3, 3)]));
        m.cases[1].review_status = ReviewStatus::Rejected;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.json");
        export_manifest(&m, &path).unwrap();
        let back = import_manifest(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.eval_cases().count(), m.cases.len() - 1);

        let mut raw: Value = io::read_json(&path).unwrap();
        raw["cases"][0]["k_subjects"] = json!(5);
        io::write_json(&path, &raw).unwrap();
        let err = import_manifest(&path).unwrap_err();
        assert!(err.is_schema() && err.to_string().contains("k_subjects"), "{err}");

        raw["schema"] = json!("dreamstory.bench.v0");
        io::write_json(&path, &raw).unwrap();
        let err = import_manifest(&path).unwrap_err();
        assert!(err.is_schema() && err.to_string().contains("migrate"), "{err}");
    }
}
