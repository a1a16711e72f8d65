use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    generate_anchor, rehearsal_render, render_scene_msd, MultimodalAnchor, RenderConfig, SceneFlag,
};
use crate::attention::LayerActivation;
use crate::backends::{DenoiserBackend, Segmenter};
use crate::error::{Error, Result};
use crate::io;
use crate::mask::file_stem;
use crate::plan::{SceneSpec, StoryPlan, SubjectSpec};

pub const RUN_SCHEMA: &str = "dreamstory.run.v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneStatus {
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorRecord {
    pub subject: String,
    pub seed: u64,
    pub prompt: String,
    pub image: String,
    pub mask: String,
    #[serde(default)]
    pub flags: Vec<SceneFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub index: usize,
    pub seed: u64,
    pub prompt: String,
    pub present_subjects: Vec<String>,
    pub status: SceneStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rehearsal: Option<String>,
    #[serde(default)]
    pub masks: BTreeMap<String, String>,
    #[serde(default)]
    pub flags: Vec<SceneFlag>,
    /// Per-layer module activation keyed by layer name.
    #[serde(default)]
    pub layers: BTreeMap<String, LayerActivation>,
    #[serde(default)]
    pub refined_steps: Vec<usize>,
}

/// Everything needed to reproduce a run. Wall-clock timings live in the
/// `timings.jsonl` sidecar so identical reruns give identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub run_id: String,
    pub plan_hash: String,
    pub backend: String,
    pub config: RenderConfig,
    #[serde(default)]
    pub invocation: serde_json::Value,
    pub anchors: Vec<AnchorRecord>,
    pub scenes: Vec<SceneRecord>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let manifest: RunManifest = io::read_json(path)?;
        if manifest.schema != RUN_SCHEMA {
            return Err(Error::schema(
                path.display().to_string(),
                format!("expected schema {RUN_SCHEMA}, found {}", manifest.schema),
            ));
        }
        Ok(manifest)
    }

    pub fn failed(&self) -> Vec<usize> {
        self.scenes
            .iter()
            .filter(|s| s.status == SceneStatus::Failed)
            .map(|s| s.index)
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub workers: usize,
    /// Keep finished scenes from an existing manifest in the output directory.
    pub resume: bool,
    /// Abort on the first failed scene instead of recording it and moving on.
    pub fail_fast: bool,
    /// Caller-supplied effective settings, stored verbatim in the manifest.
    pub invocation: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct StoryResult {
    pub out_dir: PathBuf,
    pub manifest: RunManifest,
}

#[derive(Serialize)]
struct Timing<'a> {
    stage: &'a str,
    item: String,
    millis: u128,
}

struct Run<'a> {
    out: &'a Path,
    manifest: Mutex<RunManifest>,
    timings: Mutex<std::fs::File>,
}

impl Run<'_> {
    fn save(&self) -> Result<()> {
        let mut manifest = self.manifest.lock().expect("manifest lock");
        manifest.scenes.sort_by_key(|s| s.index);
        io::write_json(&self.out.join("manifest.json"), &*manifest)
    }

    fn time(&self, stage: &str, item: String, start: Instant) {
        let line = serde_json::to_string(&Timing {
            stage,
            item,
            millis: start.elapsed().as_millis(),
        })
        .expect("timing serializes");
        let mut file = self.timings.lock().expect("timings lock");
        if let Err(e) = writeln!(file, "{line}") {
            log::warn!("could not append timing: {e}");
        }
    }

    fn record_scene(&self, record: SceneRecord) -> Result<()> {
        {
            let mut manifest = self.manifest.lock().expect("manifest lock");
            manifest.scenes.retain(|s| s.index != record.index);
            manifest.scenes.push(record);
        }
        self.save()
    }
}

fn rel(path: &Path, out: &Path) -> String {
    path.strip_prefix(out)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

fn scene_subjects(plan: &StoryPlan, scene: &SceneSpec) -> Result<Vec<SubjectSpec>> {
    scene
        .present_subjects
        .iter()
        .map(|n| {
            plan.subject(n).cloned().ok_or_else(|| {
                Error::PlanIntegrity(format!("scene {} names unknown subject `{n}`", scene.index))
            })
        })
        .collect()
}

fn render_one(
    plan: &StoryPlan,
    scene: &SceneSpec,
    anchors: &BTreeMap<String, MultimodalAnchor>,
    backend: &dyn DenoiserBackend,
    segmenter: &dyn Segmenter,
    config: &RenderConfig,
    run: &Run<'_>,
) -> Result<SceneRecord> {
    let out = run.out;
    let seed = config.scene_seed(scene.index);
    let prompt = config.scene_prompt(scene).to_string();
    let subjects = scene_subjects(plan, scene)?;
    let stem = format!("{:04}", scene.index);

    let start = Instant::now();
    let (rehearsal, masks) = rehearsal_render(&prompt, seed, backend, segmenter, &subjects, config)?;
    run.time("rehearsal", stem.clone(), start);
    let rehearsal_path = out.join("rehearsal").join(format!("{stem}.png"));
    io::save_png(&rehearsal_path, &rehearsal)?;
    let mask_dir = out.join("masks").join(&stem);
    let masks_written = if masks.is_empty() {
        BTreeMap::new()
    } else {
        masks
            .save_pngs(&mask_dir)?
            .into_iter()
            .map(|(name, file)| (name, rel(&mask_dir.join(file), out)))
            .collect()
    };

    let mut flags: Vec<SceneFlag> = masks
        .missing
        .iter()
        .map(|s| SceneFlag::MissingSubject { subject: s.clone() })
        .collect();
    let mut layers = BTreeMap::new();
    let mut refined_steps = Vec::new();
    let image = if subjects.is_empty() {
        flags.push(SceneFlag::MsdSkipped);
        rehearsal
    } else {
        let refs: Vec<&MultimodalAnchor> = scene
            .present_subjects
            .iter()
            .map(|n| {
                anchors.get(n).ok_or_else(|| {
                    Error::PlanIntegrity(format!("scene {} has no anchor for `{n}`", scene.index))
                })
            })
            .collect::<Result<_>>()?;
        let start = Instant::now();
        let render = render_scene_msd(scene, &prompt, &refs, &masks, seed, backend, config)?;
        run.time("msd", stem.clone(), start);
        flags.extend(render.flags);
        layers = render
            .report
            .layers
            .iter()
            .map(|(id, act)| (id.to_string(), *act))
            .collect();
        refined_steps = render.report.refined_steps;
        render.image
    };
    let image_path = out.join("scenes").join(format!("{stem}.png"));
    io::save_png(&image_path, &image)?;
    Ok(SceneRecord {
        index: scene.index,
        seed,
        prompt: config.styled(&prompt),
        present_subjects: scene.present_subjects.clone(),
        status: SceneStatus::Done,
        error: None,
        image: Some(rel(&image_path, out)),
        rehearsal: Some(rel(&rehearsal_path, out)),
        masks: masks_written,
        flags,
        layers,
        refined_steps,
    })
}

/// Renders every anchor, then every scene, into `out_dir`.
///
/// Layout: `plan.json`, `manifest.json`, `timings.jsonl`, `anchors/`,
/// `rehearsal/`, `masks/<scene>/` and `scenes/`.
pub fn run_story(
    plan: &StoryPlan,
    config: &RenderConfig,
    backend: &dyn DenoiserBackend,
    segmenter: &dyn Segmenter,
    out_dir: &Path,
    options: &RunOptions,
) -> Result<StoryResult> {
    plan.validate()?;
    config.validate_for(backend)?;
    for scene in &plan.scenes {
        scene_subjects(plan, scene)?;
    }
    let plan_hash = plan.hash()?;
    let manifest_path = out_dir.join("manifest.json");
    let run_id = out_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());

    let mut kept = Vec::new();
    if options.resume && manifest_path.is_file() {
        let previous = RunManifest::load(&manifest_path)?;
        if previous.plan_hash != plan_hash || previous.config != *config {
            return Err(Error::Config(format!(
                "{} was produced by a different plan or configuration",
                manifest_path.display()
            )));
        }
        kept = previous
            .scenes
            .into_iter()
            .filter(|s| {
                s.status == SceneStatus::Done
                    && s.image.as_ref().is_some_and(|p| out_dir.join(p).is_file())
            })
            .collect();
    }

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    plan.save(&out_dir.join("plan.json"))?;
    let timings_path = out_dir.join("timings.jsonl");
    let timings = OpenOptions::new()
        .create(true)
        .append(options.resume)
        .write(true)
        .truncate(!options.resume)
        .open(&timings_path)
        .map_err(|e| Error::io(&timings_path, e))?;

    let run = Run {
        out: out_dir,
        manifest: Mutex::new(RunManifest {
            schema: RUN_SCHEMA.into(),
            run_id,
            plan_hash,
            backend: backend.name().to_string(),
            config: config.clone(),
            invocation: options.invocation.clone(),
            anchors: Vec::new(),
            scenes: kept,
        }),
        timings: Mutex::new(timings),
    };

    let mut anchors = BTreeMap::new();
    let mut anchor_records = Vec::new();
    for subject in &plan.subjects {
        let seed = config.anchor_seed(&subject.name);
        let start = Instant::now();
        let anchor = generate_anchor(subject, seed, backend, segmenter, config)
            .map_err(|e| e.at_stage(&format!("anchor `{}`", subject.name)))?;
        run.time("anchor", subject.name.clone(), start);
        let stem = file_stem(&subject.name);
        let image = out_dir.join("anchors").join(format!("{stem}.png"));
        let mask = out_dir.join("anchors").join(format!("{stem}.mask.png"));
        io::save_png(&image, &anchor.portrait)?;
        anchor.pixel_mask.save_png(&mask)?;
        anchor_records.push(AnchorRecord {
            subject: subject.name.clone(),
            seed,
            prompt: anchor.prompt.clone(),
            image: rel(&image, out_dir),
            mask: rel(&mask, out_dir),
            flags: anchor.flags.clone(),
        });
        anchors.insert(subject.name.clone(), anchor);
    }
    run.manifest.lock().expect("manifest lock").anchors = anchor_records;
    run.save()?;

    let done: Vec<usize> = run
        .manifest
        .lock()
        .expect("manifest lock")
        .scenes
        .iter()
        .map(|s| s.index)
        .collect();
    let pending: Vec<&SceneSpec> = plan.scenes.iter().filter(|s| !done.contains(&s.index)).collect();
    if !done.is_empty() {
        log::info!("resuming: {} scenes kept, {} to render", done.len(), pending.len());
    }

    let task = |scene: &&SceneSpec| -> Result<()> {
        match render_one(plan, scene, &anchors, backend, segmenter, config, &run) {
            Ok(record) => run.record_scene(record),
            Err(e) if options.fail_fast => Err(e.at_stage(&format!("scene {}", scene.index))),
            Err(e) => {
                log::error!("scene {} failed: {e}", scene.index);
                run.record_scene(SceneRecord {
                    index: scene.index,
                    seed: config.scene_seed(scene.index),
                    prompt: config.styled(config.scene_prompt(scene)),
                    present_subjects: scene.present_subjects.clone(),
                    status: SceneStatus::Failed,
                    error: Some(e.to_string()),
                    image: None,
                    rehearsal: None,
                    masks: BTreeMap::new(),
                    flags: Vec::new(),
                    layers: BTreeMap::new(),
                    refined_steps: Vec::new(),
                })
            }
        }
    };
    let workers = options.workers.max(1);
    if workers == 1 {
        pending.iter().try_for_each(task)?;
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        pool.install(|| pending.par_iter().try_for_each(task))?;
    }
    run.save()?;
    let manifest = run.manifest.into_inner().expect("manifest lock");
    Ok(StoryResult {
        out_dir: out_dir.to_path_buf(),
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{make_mock_denoiser, LayoutMock, MockSpec};
    use crate::plan::PLAN_SCHEMA;

    fn plan() -> StoryPlan {
        let subject = |name: &str, token: &str| SubjectSpec {
            name: name.into(),
            portrait_prompt: format!("a {token}, full body portrait"),
            short_descriptor: format!("the {token}"),
            type_token: token.into(),
            style_tags: vec![],
        };
        let scene = |i: usize, text: &str, who: &[&str]| {
            let mut s = SceneSpec::new(i, text);
            s.present_subjects = who.iter().map(|w| w.to_string()).collect();
            s
        };
        StoryPlan {
            schema: PLAN_SCHEMA.into(),
            story_text: "Ben and Ada walk.".into(),
            subjects: vec![subject("Ben", "man"), subject("Ada", "girl")],
            scenes: vec![
                scene(0, "the man walks", &["Ben"]),
                scene(1, "the man and the girl talk", &["Ben", "Ada"]),
                scene(2, "an empty street", &[]),
            ],
            n_scenes_requested: None,
            director_model_id: "test".into(),
            creation_trace: vec![],
        }
    }

    fn config() -> RenderConfig {
        RenderConfig {
            steps: 3,
            width: 16,
            height: 16,
            ..RenderConfig::default()
        }
    }

    fn go(out: &Path, workers: usize, resume: bool) -> StoryResult {
        let backend = make_mock_denoiser(1, MockSpec::default()).unwrap();
        let options = RunOptions {
            workers,
            resume,
            ..RunOptions::default()
        };
        run_story(&plan(), &config(), &backend, &LayoutMock::bands(2), out, &options).unwrap()
    }

    #[test]
    fn layout_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let a = go(&dir.path().join("a"), 1, false);
        let b = go(&dir.path().join("a"), 3, false);
        assert_eq!(a.manifest, b.manifest);
        let m = &a.manifest;
        assert_eq!(m.scenes.len(), 3);
        assert_eq!(m.scenes[2].flags, vec![SceneFlag::MsdSkipped]);
        assert!(m.scenes[2].layers.is_empty());
        assert!(!m.scenes[1].layers.is_empty());
        for p in ["plan.json", "manifest.json", "timings.jsonl", "anchors/Ben.png", "scenes/0001.png", "rehearsal/0002.png", "masks/0001/Ada.png"] {
            assert!(dir.path().join("a").join(p).is_file(), "{p}");
        }
        let empty_scene = std::fs::read(dir.path().join("a/scenes/0002.png")).unwrap();
        let empty_rehearsal = std::fs::read(dir.path().join("a/rehearsal/0002.png")).unwrap();
        assert_eq!(empty_scene, empty_rehearsal);
    }

    #[test]
    fn resume_renders_only_missing_scenes() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("r");
        let full = go(&out, 1, false);
        std::fs::remove_file(out.join("scenes/0002.png")).unwrap();
        let resumed = go(&out, 1, true);
        assert_eq!(full.manifest, resumed.manifest);
        let timings = std::fs::read_to_string(out.join("timings.jsonl")).unwrap();
        let rehearsals = timings.lines().filter(|l| l.contains("\"rehearsal\"")).count();
        assert_eq!(rehearsals, 3 + 1);
    }

    #[test]
    fn resume_refuses_other_config() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("r");
        go(&out, 1, false);
        let backend = make_mock_denoiser(1, MockSpec::default()).unwrap();
        let options = RunOptions { resume: true, ..RunOptions::default() };
        let other = RenderConfig { lambda: 0.5, ..config() };
        let err = run_story(&plan(), &other, &backend, &LayoutMock::bands(2), &out, &options).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn dangling_subject_fails_before_rendering() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = plan();
        p.scenes[0].present_subjects.push("Zed".into());
        let backend = make_mock_denoiser(1, MockSpec::default()).unwrap();
        let err = run_story(&p, &config(), &backend, &LayoutMock::bands(2), dir.path(), &RunOptions::default())
            .unwrap_err();
        assert!(matches!(err.root(), Error::PlanIntegrity(_)), "{err}");
        assert!(!dir.path().join("anchors").exists());
    }
}
