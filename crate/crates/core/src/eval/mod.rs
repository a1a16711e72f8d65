//! Objective metrics over rendered scenes and LLM annotation accuracy.

mod table;

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use table::{render_accuracy_table, render_metrics_table};

use crate::backends::{AestheticScorer, Detection, Detector, ImageTextScorer, PerceptualSimilarity};
use crate::error::{Error, Result};
use crate::io;
use crate::mask::file_stem;
use crate::pipeline::{RunManifest, SceneStatus};
use crate::plan::StoryPlan;
use crate::types::{BoundingBox, Image};

pub const METRICS_SCHEMA: &str = "dreamstory.metrics.v1";

pub const DC_DS_NOTE: &str = "D&C-DS here: detections are assigned to subjects greedily by score, \
assigned boxes must overlap pairwise with IoU <= 0.5, the scene scores 0 if any subject is left \
unassigned, otherwise the mean per-subject similarity. This is our reading of the \
detect-and-compare rule, not a reference implementation.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Aes,
    ClipT,
    Ds,
    DcDs,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Aes, Metric::ClipT, Metric::Ds, Metric::DcDs];

    pub fn label(&self) -> &'static str {
        match self {
            Metric::Aes => "AES",
            Metric::ClipT => "CLIP-T",
            Metric::Ds => "DS",
            Metric::DcDs => "D&C-DS",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "aes" => Ok(Metric::Aes),
            "clip_t" => Ok(Metric::ClipT),
            "ds" => Ok(Metric::Ds),
            "dc_ds" => Ok(Metric::DcDs),
            other => Err(Error::Config(format!(
                "unknown metric `{other}` (aes, clip_t, ds, dc_ds)"
            ))),
        }
    }
}

/// Parses `aes,clip_t,ds,dc_ds`; order and duplicates are normalized.
pub fn parse_metrics(list: &str) -> Result<Vec<Metric>> {
    let mut metrics: Vec<Metric> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    metrics.sort();
    metrics.dedup();
    if metrics.is_empty() {
        return Err(Error::Config("no metrics selected".into()));
    }
    Ok(metrics)
}

/// The reference side of DS: a subject's crop from its own portrait.
#[derive(Debug, Clone)]
pub struct AnchorCrop {
    pub name: String,
    pub type_token: String,
    pub crop: Image,
}

impl AnchorCrop {
    /// Crops the highest-score detection of the type token, or keeps the
    /// whole portrait when nothing is detected.
    pub fn from_portrait(
        name: &str,
        type_token: &str,
        portrait: &Image,
        detector: &dyn Detector,
    ) -> Result<Self> {
        let crop = best_detection(detector.detect(portrait, type_token)?, portrait)
            .map(|d| crop_box(portrait, &d.bbox))
            .unwrap_or_else(|| portrait.clone());
        Ok(Self {
            name: name.to_string(),
            type_token: type_token.to_string(),
            crop,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub subject: String,
    pub bbox: Option<BoundingBox>,
    pub score: f64,
    pub found: bool,
}

fn usable(mut dets: Vec<Detection>, image: &Image) -> Vec<Detection> {
    let (w, h) = image.dimensions();
    dets.iter_mut().for_each(|d| d.bbox = d.bbox.clamp_to(w, h));
    dets.retain(|d| !d.bbox.is_empty() && d.score.is_finite());
    dets
}

fn best_detection(dets: Vec<Detection>, image: &Image) -> Option<Detection> {
    usable(dets, image)
        .into_iter()
        .reduce(|best, d| if d.score > best.score { d } else { best })
}

pub fn crop_box(image: &Image, bbox: &BoundingBox) -> Image {
    let b = bbox.clamp_to(image.width(), image.height());
    image::imageops::crop_imm(image, b.x0, b.y0, b.width(), b.height()).to_image()
}

fn check_image(image: &Image) -> Result<()> {
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::Input("empty image".into()));
    }
    Ok(())
}

/// Similarity between the subject's highest-score scene crop and its anchor
/// crop; 0 with `found = false` when nothing is detected.
pub fn compute_ds(
    image: &Image,
    anchor: &AnchorCrop,
    detector: &dyn Detector,
    sim: &dyn PerceptualSimilarity,
) -> Result<(f64, DetectionRecord)> {
    check_image(image)?;
    match best_detection(detector.detect(image, &anchor.type_token)?, image) {
        None => Ok((
            0.0,
            DetectionRecord {
                subject: anchor.name.clone(),
                bbox: None,
                score: 0.0,
                found: false,
            },
        )),
        Some(d) => {
            let value = sim.similarity(&crop_box(image, &d.bbox), &anchor.crop)?;
            Ok((
                value,
                DetectionRecord {
                    subject: anchor.name.clone(),
                    bbox: Some(d.bbox),
                    score: d.score,
                    found: true,
                },
            ))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DcDsRule {
    /// Largest IoU allowed between two assigned boxes.
    pub max_iou: f64,
}

impl Default for DcDsRule {
    fn default() -> Self {
        Self { max_iou: 0.5 }
    }
}

pub fn compute_dc_ds(
    image: &Image,
    anchors: &[AnchorCrop],
    detector: &dyn Detector,
    sim: &dyn PerceptualSimilarity,
    rule: &DcDsRule,
) -> Result<f64> {
    check_image(image)?;
    if anchors.is_empty() {
        return Err(Error::Input("D&C-DS needs at least one expected subject".into()));
    }
    let mut candidates = Vec::new();
    for (i, anchor) in anchors.iter().enumerate() {
        for d in usable(detector.detect(image, &anchor.type_token)?, image) {
            candidates.push((i, d));
        }
    }
    // stable sort keeps subject order on equal scores
    candidates.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut assigned: Vec<Option<BoundingBox>> = vec![None; anchors.len()];
    for (i, d) in candidates {
        if assigned[i].is_some() {
            continue;
        }
        if assigned.iter().flatten().all(|b| b.iou(&d.bbox) <= rule.max_iou) {
            assigned[i] = Some(d.bbox);
        }
    }
    let mut total = 0.0;
    for (anchor, bbox) in anchors.iter().zip(&assigned) {
        let Some(bbox) = bbox else {
            return Ok(0.0);
        };
        total += sim.similarity(&crop_box(image, bbox), &anchor.crop)?;
    }
    Ok(total / anchors.len() as f64)
}

pub fn compute_clip_t(image: &Image, text: &str, scorer: &dyn ImageTextScorer) -> Result<f64> {
    check_image(image)?;
    if text.trim().is_empty() {
        return Err(Error::Input("CLIP-T needs a non-empty prompt".into()));
    }
    scorer.score(image, text)
}

pub fn compute_aes(image: &Image, scorer: &dyn AestheticScorer) -> Result<f64> {
    check_image(image)?;
    scorer.score(image)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene: String,
    pub k_subjects: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aes: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_t: Option<f64>,
    /// Undetected subjects score 0.
    #[serde(default)]
    pub ds_per_subject: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dc_ds: Option<f64>,
    #[serde(default)]
    pub detection_log: Vec<DetectionRecord>,
}

impl SceneMetrics {
    pub fn ds(&self) -> Option<f64> {
        if self.ds_per_subject.is_empty() {
            None
        } else {
            Some(self.ds_per_subject.values().sum::<f64>() / self.ds_per_subject.len() as f64)
        }
    }

    pub fn value(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Aes => self.aes,
            Metric::ClipT => self.clip_t,
            Metric::Ds => self.ds(),
            Metric::DcDs => self.dc_ds,
        }
    }
}

pub struct EvalBackends<'a> {
    pub detector: &'a dyn Detector,
    pub similarity: &'a dyn PerceptualSimilarity,
    pub clip: &'a dyn ImageTextScorer,
    pub aesthetic: &'a dyn AestheticScorer,
}

/// All selected metrics for one scene image.
pub fn score_scene(
    id: &str,
    image: &Image,
    prompt: &str,
    anchors: &[AnchorCrop],
    metrics: &[Metric],
    backends: &EvalBackends<'_>,
) -> Result<SceneMetrics> {
    let mut row = SceneMetrics {
        scene: id.to_string(),
        k_subjects: anchors.len(),
        aes: None,
        clip_t: None,
        ds_per_subject: BTreeMap::new(),
        dc_ds: None,
        detection_log: Vec::new(),
    };
    if metrics.contains(&Metric::Aes) {
        row.aes = Some(compute_aes(image, backends.aesthetic)?);
    }
    if metrics.contains(&Metric::ClipT) {
        row.clip_t = Some(compute_clip_t(image, prompt, backends.clip)?);
    }
    if metrics.contains(&Metric::Ds) {
        for anchor in anchors {
            let (value, record) = compute_ds(image, anchor, backends.detector, backends.similarity)?;
            row.ds_per_subject.insert(anchor.name.clone(), value);
            row.detection_log.push(record);
        }
    }
    if metrics.contains(&Metric::DcDs) && !anchors.is_empty() {
        row.dc_ds = Some(compute_dc_ds(
            image,
            anchors,
            backends.detector,
            backends.similarity,
            &DcDsRule::default(),
        )?);
    }
    Ok(row)
}

/// Scores every finished scene of a run directory written by `run_story`.
pub fn evaluate_run(dir: &Path, metrics: &[Metric], backends: &EvalBackends<'_>) -> Result<Vec<SceneMetrics>> {
    let manifest = RunManifest::load(&dir.join("manifest.json"))?;
    let plan = StoryPlan::load(&dir.join("plan.json"))?;
    let mut anchors = BTreeMap::new();
    for record in &manifest.anchors {
        let subject = plan.subject(&record.subject).ok_or_else(|| {
            Error::schema(
                dir.join("manifest.json").display().to_string(),
                format!("anchor `{}` is not in plan.json", record.subject),
            )
        })?;
        let portrait = io::load_image(&dir.join(&record.image))?;
        anchors.insert(
            subject.name.clone(),
            AnchorCrop::from_portrait(&subject.name, &subject.type_token, &portrait, backends.detector)?,
        );
    }
    let mut rows = Vec::new();
    for scene in &manifest.scenes {
        let (SceneStatus::Done, Some(path)) = (scene.status, &scene.image) else {
            log::warn!("scene {} of {} has no image, skipped", scene.index, manifest.run_id);
            continue;
        };
        let image = io::load_image(&dir.join(path))?;
        let crops: Vec<AnchorCrop> = scene
            .present_subjects
            .iter()
            .map(|n| {
                anchors.get(n).cloned().ok_or_else(|| {
                    Error::PlanIntegrity(format!("scene {} has no anchor for `{n}`", scene.index))
                })
            })
            .collect::<Result<_>>()?;
        let id = format!("{}/{}", manifest.run_id, file_stem(&format!("{:04}", scene.index)));
        rows.push(score_scene(&id, &image, &scene.prompt, &crops, metrics, backends)?);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    SubjectCount,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    pub scenes: usize,
    pub means: BTreeMap<Metric, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub metrics: Vec<Metric>,
    pub note: String,
    pub scenes: Vec<SceneMetrics>,
    pub groups: Vec<GroupRow>,
    #[serde(default)]
    pub annotation_accuracy: Vec<AccuracyTable>,
}

fn group_row(group: String, rows: &[&SceneMetrics], metrics: &[Metric]) -> GroupRow {
    let mut means = BTreeMap::new();
    for &m in metrics {
        let values: Vec<f64> = rows.iter().filter_map(|r| r.value(m)).collect();
        if !values.is_empty() {
            means.insert(m, values.iter().sum::<f64>() / values.len() as f64);
        }
    }
    GroupRow {
        group,
        scenes: rows.len(),
        means,
    }
}

pub fn group_label(k: usize) -> String {
    format!("{k}-Subject")
}

/// Per-group means; the `All` row is added whenever there is more than one group.
pub fn aggregate_report(scenes: Vec<SceneMetrics>, metrics: &[Metric], grouping: Grouping) -> Result<MetricsReport> {
    if scenes.is_empty() {
        return Err(Error::Input("no scene metrics to aggregate".into()));
    }
    let all: Vec<&SceneMetrics> = scenes.iter().collect();
    let mut groups = Vec::new();
    if grouping == Grouping::SubjectCount {
        let mut by_k: BTreeMap<usize, Vec<&SceneMetrics>> = BTreeMap::new();
        for row in &scenes {
            by_k.entry(row.k_subjects).or_default().push(row);
        }
        for (k, rows) in &by_k {
            groups.push(group_row(group_label(*k), rows, metrics));
        }
    }
    if groups.len() != 1 {
        groups.push(group_row("All".into(), &all, metrics));
    }
    Ok(MetricsReport {
        schema: METRICS_SCHEMA.into(),
        metrics: metrics.to_vec(),
        note: DC_DS_NOTE.into(),
        scenes,
        groups,
        annotation_accuracy: Vec::new(),
    })
}

impl MetricsReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let report: MetricsReport = io::read_json(path)?;
        if report.schema != METRICS_SCHEMA {
            return Err(Error::schema(
                path.display().to_string(),
                format!("expected schema {METRICS_SCHEMA}, found {}", report.schema),
            ));
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub decisions: usize,
    pub correct: usize,
    pub scenes: usize,
    pub scenes_exact: usize,
}

impl AccuracyCell {
    pub fn decision_accuracy(&self) -> f64 {
        if self.decisions == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.decisions as f64
        }
    }

    pub fn scene_accuracy(&self) -> f64 {
        if self.scenes == 0 {
            0.0
        } else {
            100.0 * self.scenes_exact as f64 / self.scenes as f64
        }
    }
}

/// Presence-annotation accuracy of one model, keyed by subject count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub model_id: String,
    pub groups: BTreeMap<usize, AccuracyCell>,
}

impl AccuracyTable {
    pub fn percentages(&self) -> BTreeMap<usize, f64> {
        self.groups
            .iter()
            .map(|(k, c)| (*k, c.decision_accuracy()))
            .collect()
    }
}

/// Compares presence decisions keyed by `(case, subject)`.
///
/// A case's subject count is the number of subjects its ground truth marks
/// present. A ground-truth decision with no prediction counts as wrong.
pub fn annotation_accuracy(
    model_id: &str,
    predictions: &BTreeMap<(String, String), bool>,
    truth: &BTreeMap<(String, String), bool>,
) -> Result<AccuracyTable> {
    if let Some((case, subject)) = predictions.keys().find(|k| !truth.contains_key(*k)) {
        return Err(Error::KeyMismatch(format!("({case}, {subject})")));
    }
    let mut cases: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for ((case, subject), expected) in truth {
        let entry = cases.entry(case.as_str()).or_default();
        entry.0 += usize::from(*expected);
        entry.1 += 1;
        if predictions.get(&(case.clone(), subject.clone())) == Some(expected) {
            entry.2 += 1;
        }
    }
    let mut groups: BTreeMap<usize, AccuracyCell> = BTreeMap::new();
    for (k, decisions, correct) in cases.into_values() {
        let cell = groups.entry(k).or_default();
        cell.decisions += decisions;
        cell.correct += correct;
        cell.scenes += 1;
        cell.scenes_exact += usize::from(correct == decisions);
    }
    Ok(AccuracyTable {
        model_id: model_id.to_string(),
        groups,
    })
}
