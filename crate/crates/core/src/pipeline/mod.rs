//! Anchor generation, rehearsal renders and the joint-batch masked render of
//! each scene.

mod story;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use story::{
    run_story, AnchorRecord, RunManifest, RunOptions, SceneRecord, SceneStatus, StoryResult,
    RUN_SCHEMA,
};

use crate::attention::{LayerSelect, MsdConfig, MsdProcessor, MsdReport, SubjectMasks};
use crate::backends::{
    render_single, DenoiseStream, DenoiserBackend, ProcessorRegistry, Segmenter, StreamRole,
};
use crate::error::{Error, Result};
use crate::mask::{segment_subjects, LayerMask, MaskRefine, MaskSet, PixelMask, UnionMode};
use crate::plan::{SceneSpec, SubjectSpec};
use crate::types::{derive_seed, Image, LayerId, TokenEmbeddings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedPolicy {
    /// Each scene gets `derive_seed(seed, "scene/<index>")`.
    #[default]
    Derived,
    /// Every scene uses the global seed.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub seed: u64,
    pub steps: usize,
    pub guidance: f64,
    pub width: u32,
    pub height: u32,
    pub lambda: f64,
    pub dropout: f64,
    pub mmsa: bool,
    pub mmca: bool,
    pub mmsa_layers: LayerSelect,
    pub mmca_layers: LayerSelect,
    pub mask_refine: MaskRefine,
    pub drift_threshold: f64,
    pub union_mode: UnionMode,
    pub seed_policy: SeedPolicy,
    pub style_suffix: String,
    /// Render from rewritten prompts; off renders the raw prompts.
    pub rewrite: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 50,
            guidance: 7.0,
            width: 1280,
            height: 768,
            lambda: 0.9,
            dropout: 0.5,
            mmsa: true,
            mmca: true,
            mmsa_layers: LayerSelect::Decoder,
            mmca_layers: LayerSelect::All,
            mask_refine: MaskRefine::Off,
            drift_threshold: crate::mask::DEFAULT_DRIFT_THRESHOLD,
            union_mode: UnionMode::Union,
            seed_policy: SeedPolicy::Derived,
            style_suffix: String::new(),
            rewrite: true,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if !self.guidance.is_finite() || self.guidance < 0.0 {
            return bad(format!("guidance {} must be finite and non-negative", self.guidance));
        }
        if self.width == 0 || self.height == 0 {
            return bad("width and height must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.drift_threshold) {
            return bad(format!("drift threshold {} outside [0, 1]", self.drift_threshold));
        }
        Ok(())
    }

    /// Validation plus the backend's dimension constraint.
    pub fn validate_for(&self, backend: &dyn DenoiserBackend) -> Result<()> {
        self.validate()?;
        backend.check_dimensions(self.height, self.width)
    }

    pub fn styled(&self, prompt: &str) -> String {
        if self.style_suffix.trim().is_empty() {
            prompt.to_string()
        } else {
            format!("{prompt}, {}", self.style_suffix.trim())
        }
    }

    pub fn anchor_seed(&self, subject: &str) -> u64 {
        derive_seed(self.seed, &format!("anchor/{subject}"))
    }

    pub fn scene_seed(&self, index: usize) -> u64 {
        match self.seed_policy {
            SeedPolicy::Derived => derive_seed(self.seed, &format!("scene/{index}")),
            SeedPolicy::Shared => self.seed,
        }
    }

    pub fn scene_prompt<'s>(&self, scene: &'s SceneSpec) -> &'s str {
        if self.rewrite {
            &scene.rewritten_prompt
        } else {
            &scene.raw_prompt
        }
    }

    pub fn msd(&self) -> MsdConfig {
        MsdConfig {
            mmsa: self.mmsa,
            mmsa_layers: self.mmsa_layers,
            dropout: self.dropout,
            mmca: self.mmca,
            mmca_layers: self.mmca_layers,
            lambda: self.lambda,
            union_mode: self.union_mode,
            mask_refine: self.mask_refine,
            drift_threshold: self.drift_threshold,
            powers: crate::mask::DEFAULT_POWERS,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "flag", rename_all = "snake_case")]
pub enum SceneFlag {
    MissingSubject { subject: String },
    EmptyAnchorMask { subject: String },
    RefinementTriggered,
    MsdSkipped,
}

/// A subject's portrait plus everything derived from it.
#[derive(Debug, Clone)]
pub struct MultimodalAnchor {
    pub subject: SubjectSpec,
    pub prompt: String,
    pub portrait: Image,
    pub portrait_seed: u64,
    pub text_embedding: TokenEmbeddings,
    pub pixel_mask: PixelMask,
    pub layer_masks: BTreeMap<LayerId, LayerMask>,
    pub flags: Vec<SceneFlag>,
}

pub fn generate_anchor(
    subject: &SubjectSpec,
    seed: u64,
    backend: &dyn DenoiserBackend,
    segmenter: &dyn Segmenter,
    config: &RenderConfig,
) -> Result<MultimodalAnchor> {
    if subject.portrait_prompt.trim().is_empty() {
        return Err(Error::Input(format!("subject `{}` has no portrait prompt", subject.name)));
    }
    let prompt = config.styled(&subject.portrait_prompt);
    let portrait = render_single(
        backend,
        &prompt,
        seed,
        config.steps,
        config.guidance,
        config.height,
        config.width,
    )?;
    let masks = segment_subjects(&portrait, std::slice::from_ref(subject), segmenter)?
        .with_layers(&backend.layer_catalog(), config.union_mode)?;
    let mut flags = Vec::new();
    if !masks.missing.is_empty() {
        log::warn!("no mask for `{}` in its own portrait", subject.name);
        flags.push(SceneFlag::EmptyAnchorMask {
            subject: subject.name.clone(),
        });
    }
    let layer_masks = masks
        .layer_masks
        .iter()
        .map(|((_, layer), m)| (*layer, m.clone()))
        .collect();
    let pixel_mask = masks.pixel_masks[&subject.name].clone();
    Ok(MultimodalAnchor {
        subject: subject.clone(),
        text_embedding: backend.encode_text(&prompt)?,
        prompt,
        portrait,
        portrait_seed: seed,
        pixel_mask,
        layer_masks,
        flags,
    })
}

/// Vanilla render of the scene with the seed the masked pass will reuse,
/// plus the subject masks found in it.
pub fn rehearsal_render(
    prompt: &str,
    seed: u64,
    backend: &dyn DenoiserBackend,
    segmenter: &dyn Segmenter,
    subjects: &[SubjectSpec],
    config: &RenderConfig,
) -> Result<(Image, MaskSet)> {
    let image = render_single(
        backend,
        &config.styled(prompt),
        seed,
        config.steps,
        config.guidance,
        config.height,
        config.width,
    )?;
    if subjects.is_empty() {
        return Ok((image, MaskSet::default()));
    }
    let masks = segment_subjects(&image, subjects, segmenter)?
        .with_layers(&backend.layer_catalog(), config.union_mode)?;
    Ok((image, masks))
}

#[derive(Debug, Clone)]
pub struct SceneRender {
    pub image: Image,
    pub report: MsdReport,
    pub flags: Vec<SceneFlag>,
}

/// Joint denoising of one reference stream per anchor plus the target.
///
/// Reference streams replay their anchor's portrait trajectory (same seed,
/// same prompt) so the target reads timestep-aligned reference features.
pub fn render_scene_msd(
    scene: &SceneSpec,
    prompt: &str,
    anchors: &[&MultimodalAnchor],
    target_masks: &MaskSet,
    seed: u64,
    backend: &dyn DenoiserBackend,
    config: &RenderConfig,
) -> Result<SceneRender> {
    for name in &scene.present_subjects {
        if !anchors.iter().any(|a| &a.subject.name == name) {
            return Err(Error::PlanIntegrity(format!(
                "scene {} has no anchor for `{name}`",
                scene.index
            )));
        }
    }
    let catalog = backend.layer_catalog();
    let uncond = backend.encode_text("")?;
    let mut streams = Vec::with_capacity(anchors.len() + 1);
    let mut subjects = Vec::with_capacity(anchors.len());
    for (i, anchor) in anchors.iter().enumerate() {
        let name = &anchor.subject.name;
        streams.push(DenoiseStream {
            role: StreamRole::Reference(i),
            latents: backend.init_latents(anchor.portrait_seed, config.height, config.width)?,
            cond: anchor.text_embedding.clone(),
            uncond: uncond.clone(),
        });
        let mut target = BTreeMap::new();
        let mut reference = BTreeMap::new();
        for layer in &catalog {
            let t = target_masks
                .layer_mask(name, &layer.id)
                .map(|m| m.values.clone())
                .unwrap_or_else(|| vec![false; layer.n_tokens()]);
            let r = anchor
                .layer_masks
                .get(&layer.id)
                .map(|m| m.values.clone())
                .unwrap_or_else(|| vec![false; layer.n_tokens()]);
            target.insert(layer.id, t);
            reference.insert(layer.id, r);
        }
        subjects.push(SubjectMasks {
            name: name.clone(),
            target,
            reference,
        });
    }
    streams.push(DenoiseStream {
        role: StreamRole::Target,
        latents: backend.init_latents(seed, config.height, config.width)?,
        cond: backend.encode_text(&config.styled(prompt))?,
        uncond,
    });

    let mut registry = ProcessorRegistry::new();
    let mut report = None;
    if config.mmsa || config.mmca {
        let processor = MsdProcessor::new(config.msd(), &catalog, subjects)?;
        report = Some(processor.report_handle());
        registry.install(catalog.iter().map(|l| l.id), Box::new(processor));
    }
    backend.run_steps(&mut streams, config.steps, config.guidance, &mut registry)?;
    let target = streams.last().expect("target stream");
    let image = backend.decode(&target.latents, config.height, config.width)?;
    let report = report
        .map(|r| r.lock().expect("report lock").clone())
        .unwrap_or_default();
    let mut flags = Vec::new();
    if !report.refined_steps.is_empty() {
        flags.push(SceneFlag::RefinementTriggered);
    }
    Ok(SceneRender {
        image,
        report,
        flags,
    })
}
