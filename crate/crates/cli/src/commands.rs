use std::path::{Path, PathBuf};

use anyhow::bail;
use dreamstory_core::benchmark::{
    build_benchmark, evaluate_benchmark, export_manifest, import_manifest, BenchEvalSetup, BenchmarkManifest,
};
use dreamstory_core::director::{build_story_plan, DirectorConfig};
use dreamstory_core::eval::{
    aggregate_report, evaluate_run, parse_metrics, render_accuracy_table, render_metrics_table, Grouping,
    MetricsReport, SceneMetrics,
};
use dreamstory_core::pipeline::{run_story, RunOptions};
use dreamstory_core::{io, Error, StoryPlan};
use serde::Serialize;

use crate::args::{BenchBuildArgs, BenchEvalArgs, EvalArgs, PlanArgs, RunArgs};
use crate::config::{self, FileConfig, DEFAULT_METRICS};
use crate::stack::{self, MockScorers, SessionLlm};

/// What a run manifest remembers about the command that produced it.
#[derive(Debug, Serialize)]
pub struct RunInvocation<'a> {
    pub subcommand: &'a str,
    pub config_path: Option<&'a Path>,
    /// Arguments as given, minus the output location.
    pub overrides: Vec<String>,
    pub run_id: String,
    pub effective: &'a config::Effective,
}

fn overrides(argv: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip = false;
    for a in argv.iter().skip(1) {
        if skip {
            skip = false;
        } else if a == "--out" {
            skip = true;
        } else if !a.starts_with("--out=") {
            out.push(a.clone());
        }
    }
    out
}

fn plan_story(story: &Path, director: &DirectorConfig, llm: &SessionLlm, templates_dir: Option<&Path>) -> anyhow::Result<StoryPlan> {
    let text = io::read_to_string(story)?;
    let templates = stack::templates(templates_dir)?;
    let plan = build_story_plan(&text, director, llm.client(), &templates);
    llm.finish()?;
    Ok(plan?)
}

pub fn plan(args: &PlanArgs, file: &FileConfig) -> anyhow::Result<()> {
    let spec = config::llm_spec(file, &args.llm);
    let templates = stack::templates(args.llm.templates.as_deref())?;
    let llm = SessionLlm::new(&spec, &templates, args.llm.record.clone())?;
    let director = config::merge_director(file, args.scenes, None);
    let plan = plan_story(&args.story, &director, &llm, args.llm.templates.as_deref())?;
    plan.save(&args.out)?;
    println!(
        "wrote {} ({} subjects, {} scenes)",
        args.out.display(),
        plan.subjects.len(),
        plan.scenes.len()
    );
    Ok(())
}

pub fn run(args: &RunArgs, file: &FileConfig, config_path: Option<&Path>, argv: &[String]) -> anyhow::Result<()> {
    let spec = config::llm_spec(file, &args.llm);
    let effective = config::effective(file, &args.render, &spec, args.scenes);
    let backend = stack::make_backend(&effective.backend)?;
    effective.render.validate()?;

    let plan = match (&args.plan, &args.story) {
        (Some(path), _) => StoryPlan::load(path)?,
        (None, Some(story)) => {
            let templates = stack::templates(args.llm.templates.as_deref())?;
            let llm = SessionLlm::new(&spec, &templates, args.llm.record.clone())?;
            plan_story(story, &effective.director, &llm, args.llm.templates.as_deref())?
        }
        (None, None) => bail!("one of --story or --plan is required"),
    };

    let run_id = args
        .out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let invocation = RunInvocation {
        subcommand: "run",
        config_path,
        overrides: overrides(argv),
        run_id,
        effective: &effective,
    };
    let options = RunOptions {
        workers: effective.workers,
        resume: args.resume,
        fail_fast: args.fail_fast,
        invocation: serde_json::to_value(&invocation)?,
    };
    let result = run_story(&plan, &effective.render, &backend, &stack::layout(), &args.out, &options)?;
    let failed = result.manifest.failed();
    println!(
        "rendered {} scenes into {}",
        result.manifest.scenes.len() - failed.len(),
        result.out_dir.display()
    );
    if !failed.is_empty() {
        bail!("scenes {failed:?} failed; see manifest.json, finished scenes were kept");
    }
    Ok(())
}

pub fn bench_build(args: &BenchBuildArgs, file: &FileConfig) -> anyhow::Result<()> {
    let spec = config::llm_spec(file, &args.llm);
    let templates = stack::templates(args.llm.templates.as_deref())?;
    let llm = SessionLlm::new(&spec, &templates, args.llm.record.clone())?;
    let bench = config::merge_bench(file, args);
    let manifest = build_benchmark(llm.client(), &templates, &bench);
    llm.finish()?;
    let manifest = manifest?;
    export_manifest(&manifest, &args.out)?;
    println!(
        "wrote {} ({} cases, {} rejected, pool of {})",
        args.out.display(),
        manifest.cases.len(),
        manifest.rejections.len(),
        manifest.pool.len()
    );
    Ok(())
}

fn metrics_list(arg: &Option<String>, file: &FileConfig) -> anyhow::Result<Vec<dreamstory_core::eval::Metric>> {
    let list = arg.clone().or_else(|| file.metrics.clone()).unwrap_or_else(|| DEFAULT_METRICS.into());
    Ok(parse_metrics(&list)?)
}

fn print_report(report: &MetricsReport, path: &Path) -> anyhow::Result<()> {
    report.save(path)?;
    println!("{}", render_metrics_table(report));
    if !report.annotation_accuracy.is_empty() {
        let rows: Vec<_> = report
            .annotation_accuracy
            .iter()
            .map(|t| (t.model_id.clone(), t.percentages()))
            .collect();
        println!("{}", render_accuracy_table(&rows));
    }
    println!("wrote {}", path.display());
    Ok(())
}

pub fn bench_eval(args: &BenchEvalArgs, file: &FileConfig) -> anyhow::Result<()> {
    let manifest = import_manifest(&args.bench)?;
    let metrics = metrics_list(&args.metrics, file)?;
    let effective = config::effective(file, &args.render, config::DEFAULT_LLM, None);
    let backend = stack::make_backend(&effective.backend)?;
    effective.render.validate_for(&backend)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let scorers = MockScorers::default();
    let layout = stack::layout();
    let setup = BenchEvalSetup {
        render: &effective.render,
        denoiser: &backend,
        segmenter: &layout,
        eval: scorers.backends(),
        metrics: &metrics,
        out_dir: &args.out,
        workers: effective.workers,
    };
    let templates = stack::templates(args.templates.as_deref())?;
    let annotator = match &args.annotator {
        Some(spec) => Some(stack::make_llm(spec, &templates)?),
        None => None,
    };
    let report = evaluate_benchmark(
        &manifest,
        &setup,
        annotator.as_deref().map(|llm| (llm, &templates, &effective.director)),
    )?;
    print_report(&report, &args.out.join("metrics.json"))
}

fn case_rows(manifest: &BenchmarkManifest, results: &Path, metrics: &[dreamstory_core::eval::Metric], scorers: &MockScorers) -> anyhow::Result<Vec<SceneMetrics>> {
    let mut rows = Vec::new();
    for case in manifest.eval_cases() {
        let dir = results.join(&case.case_id);
        let mut case_rows = evaluate_run(&dir, metrics, &scorers.backends()).map_err(|e| e.at_stage(&case.case_id))?;
        for row in &mut case_rows {
            row.scene = case.case_id.clone();
            row.k_subjects = case.k_subjects;
        }
        rows.extend(case_rows);
    }
    Ok(rows)
}

pub fn eval(args: &EvalArgs, file: &FileConfig) -> anyhow::Result<()> {
    let metrics = metrics_list(&args.metrics, file)?;
    let scorers = MockScorers::default();
    let rows = match &args.bench {
        Some(bench) => case_rows(&import_manifest(bench)?, &args.results, &metrics, &scorers)?,
        None => evaluate_run(&args.results, &metrics, &scorers.backends())?,
    };
    let report = aggregate_report(rows, &metrics, Grouping::SubjectCount)?;
    let out: PathBuf = args.out.clone().unwrap_or_else(|| args.results.join("metrics.json"));
    print_report(&report, &out)
}
