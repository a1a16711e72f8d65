use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{BenchmarkCase, BenchmarkManifest, MAX_SUBJECTS_PER_CASE};
use crate::backends::{DenoiserBackend, LlmClient, Segmenter};
use crate::director::{Director, DirectorConfig, TemplateSet};
use crate::error::{Error, Result};
use crate::eval::{aggregate_report, annotation_accuracy, evaluate_run, EvalBackends, Grouping, Metric, MetricsReport};
use crate::pipeline::{run_story, RenderConfig, RunOptions};
use crate::plan::{SceneSpec, StoryPlan, PLAN_SCHEMA};
use crate::text::replace_whole_word;
use crate::types::derive_seed;

/// Single-scene plan for a case; names in the prompt are swapped for the
/// subjects' short descriptors.
pub fn case_plan(case: &BenchmarkCase, model_id: &str) -> StoryPlan {
    let mut scene = SceneSpec::new(0, case.scene_prompt.clone());
    scene.rewritten_prompt = case.subjects.iter().fold(case.scene_prompt.clone(), |p, s| {
        replace_whole_word(&p, &s.name, &s.short_descriptor)
    });
    scene.present_subjects = case.subjects.iter().map(|s| s.name.clone()).collect();
    StoryPlan {
        schema: PLAN_SCHEMA.into(),
        story_text: case.scene_prompt.clone(),
        subjects: case.subjects.clone(),
        scenes: vec![scene],
        n_scenes_requested: Some(1),
        director_model_id: model_id.to_string(),
        creation_trace: Vec::new(),
    }
}

type Decisions = BTreeMap<(String, String), bool>;

/// Presence questions for every evaluated case: its own subjects plus pool
/// distractors, `MAX_SUBJECTS_PER_CASE` questions per case in total.
/// Returns `(predictions, ground_truth)`.
pub fn annotation_decisions(
    manifest: &BenchmarkManifest,
    llm: &dyn LlmClient,
    templates: &TemplateSet,
    config: &DirectorConfig,
) -> Result<(Decisions, Decisions)> {
    let director = Director::new(llm, templates, config);
    let mut predictions = BTreeMap::new();
    let mut truth = BTreeMap::new();
    for case in manifest.eval_cases() {
        let mut others: Vec<_> = manifest
            .pool
            .iter()
            .filter(|p| !case.subjects.iter().any(|s| s.name == p.name))
            .cloned()
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(manifest.seed, &format!("annotate/{}", case.case_id)));
        others.shuffle(&mut rng);
        others.truncate(MAX_SUBJECTS_PER_CASE.saturating_sub(case.k_subjects));
        let candidates: Vec<_> = case.subjects.iter().cloned().chain(others).collect();
        let scene = SceneSpec::new(0, case.scene_prompt.clone());
        let present = director
            .annotate_presence(&scene, &candidates, &mut Vec::new())
            .map_err(|e| e.at_stage(&case.case_id))?;
        for c in &candidates {
            let key = (case.case_id.clone(), c.name.clone());
            predictions.insert(key.clone(), present.contains(&c.name));
            truth.insert(key, case.subjects.iter().any(|s| s.name == c.name));
        }
    }
    Ok((predictions, truth))
}

pub struct BenchEvalSetup<'a> {
    pub render: &'a RenderConfig,
    pub denoiser: &'a dyn DenoiserBackend,
    pub segmenter: &'a dyn Segmenter,
    pub eval: EvalBackends<'a>,
    pub metrics: &'a [Metric],
    /// Each case renders into `<out_dir>/<case_id>/`.
    pub out_dir: &'a Path,
    pub workers: usize,
}

/// Renders every non-rejected case, scores it, and optionally adds the
/// annotator's presence accuracy.
pub fn evaluate_benchmark(
    manifest: &BenchmarkManifest,
    setup: &BenchEvalSetup<'_>,
    annotator: Option<(&dyn LlmClient, &TemplateSet, &DirectorConfig)>,
) -> Result<MetricsReport> {
    manifest.validate()?;
    let cases: Vec<&BenchmarkCase> = manifest.eval_cases().collect();
    if cases.is_empty() {
        return Err(Error::Input("benchmark has no cases left to evaluate".into()));
    }
    let score = |case: &&BenchmarkCase| -> Result<Vec<_>> {
        let plan = case_plan(case, &manifest.generator_model_id);
        let dir = setup.out_dir.join(&case.case_id);
        run_story(&plan, setup.render, setup.denoiser, setup.segmenter, &dir, &RunOptions::default())
            .map_err(|e| e.at_stage(&case.case_id))?;
        let mut rows = evaluate_run(&dir, setup.metrics, &setup.eval)?;
        for row in &mut rows {
            row.scene = case.case_id.clone();
            row.k_subjects = case.k_subjects;
        }
        Ok(rows)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(setup.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let rows: Vec<Vec<_>> = pool.install(|| cases.par_iter().map(score).collect::<Result<_>>())?;
    let mut report = aggregate_report(rows.into_iter().flatten().collect(), setup.metrics, Grouping::SubjectCount)?;
    if let Some((llm, templates, config)) = annotator {
        let (predictions, truth) = annotation_decisions(manifest, llm, templates, config)?;
        report
            .annotation_accuracy
            .push(annotation_accuracy(llm.model_id(), &predictions, &truth)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{make_mock_denoiser, ContrastAesthetic, HashScorer, LayoutMock, MockSpec, PixelSimilarity};
    use crate::benchmark::{build_benchmark, BenchConfig};
    use crate::director::HeuristicLlm;

    #[test]
    fn case_plans_validate() {
        let llm = HeuristicLlm::default();
        let config = BenchConfig {
            pool_size: 5,
            cases_per_group: 2,
            ..BenchConfig::default()
        };
        let m = build_benchmark(&llm, &TemplateSet::builtin(), &config).unwrap();
        for case in &m.cases {
            case_plan(case, "x").validate().unwrap();
        }
    }

    #[test]
    fn small_benchmark_end_to_end() {
        let llm = HeuristicLlm::default();
        let templates = TemplateSet::builtin();
        let config = BenchConfig {
            pool_size: 5,
            cases_per_group: 2,
            ..BenchConfig::default()
        };
        let m = build_benchmark(&llm, &templates, &config).unwrap();
        let backend = make_mock_denoiser(3, MockSpec::default()).unwrap();
        let layout = LayoutMock::bands(3);
        let render = RenderConfig {
            steps: 2,
            width: 16,
            height: 16,
            ..RenderConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let setup = BenchEvalSetup {
            render: &render,
            denoiser: &backend,
            segmenter: &layout,
            eval: EvalBackends {
                detector: &layout,
                similarity: &PixelSimilarity::default(),
                clip: &HashScorer::default(),
                aesthetic: &ContrastAesthetic,
            },
            metrics: &Metric::ALL,
            out_dir: dir.path(),
            workers: 2,
        };
        let dconfig = DirectorConfig::default();
        let report = evaluate_benchmark(&m, &setup, Some((&llm, &templates, &dconfig))).unwrap();
        assert_eq!(report.scenes.len(), 8);
        assert_eq!(report.groups.len(), 5);
        let acc = &report.annotation_accuracy[0];
        assert_eq!(acc.groups.len(), 4);
        assert!(acc.groups.values().all(|c| c.decisions == 2 * MAX_SUBJECTS_PER_CASE));
    }
}
