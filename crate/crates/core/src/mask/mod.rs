//! Subject masks: segmentation of portraits and rehearsal images, disjointness
//! post-processing, pixel-to-token downsampling, fusion maps, and the
//! attention-derived refinement path.

mod otsu;
mod semantic;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use otsu::{otsu_binarize, OtsuResult};
pub use semantic::{
    correspondence_matrix, outer, semantic_map, AttentionPair, CorrespondenceMatrix, SemanticMap,
    DEFAULT_POWERS, STOCHASTIC_TOLERANCE,
};

use crate::backends::Segmenter;
use crate::error::{Error, Result};
use crate::io;
use crate::plan::SubjectSpec;
use crate::types::{Image, LayerId, LayerInfo};

/// Default fraction of cross-attention mass allowed outside a subject mask
/// before refinement kicks in (`auto` mode).
pub const DEFAULT_DRIFT_THRESHOLD: f64 = 0.35;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    Segmentation,
    AttentionRefined,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelMask {
    pub values: Array2<bool>,
    pub source: MaskSource,
    pub subject_name: String,
    pub score: f64,
}

impl PixelMask {
    pub fn empty(subject_name: &str, height: usize, width: usize) -> Self {
        Self {
            values: Array2::from_elem((height, width), false),
            source: MaskSource::Segmentation,
            subject_name: subject_name.to_string(),
            score: 0.0,
        }
    }

    pub fn is_empty(&self) -> bool {
        !self.values.iter().any(|v| *v)
    }

    pub fn area(&self) -> usize {
        self.values.iter().filter(|v| **v).count()
    }

    pub fn to_gray(&self) -> image::GrayImage {
        let (h, w) = self.values.dim();
        image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([if self.values[[y as usize, x as usize]] { 255 } else { 0 }])
        })
    }

    /// Lossless grayscale PNG, 255 inside the mask.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        io::save_gray_png(path, &self.to_gray())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMask {
    /// One entry per spatial token, row-major over the layer grid.
    pub values: Vec<bool>,
    pub layer: LayerId,
    pub subject_name: String,
}

/// How `m_u` combines several subject masks in the fusion step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnionMode {
    #[default]
    Union,
    Intersection,
}

/// Per-token `m_u` and `m_s` of one layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FusionMaps {
    pub union: Vec<f64>,
    pub sum: Vec<f64>,
}

/// `m_s` is the elementwise sum of the masks; `m_u` their union (max) or,
/// when requested, their intersection (min).
pub fn fusion_maps(masks: &[&[bool]], tokens: usize, mode: UnionMode) -> Result<FusionMaps> {
    if let Some(m) = masks.iter().find(|m| m.len() != tokens) {
        return Err(Error::shape(format!(
            "mask with {} entries on a {tokens}-token layer",
            m.len()
        )));
    }
    let mut sum = vec![0.0; tokens];
    let mut union = vec![0.0; tokens];
    for t in 0..tokens {
        let hits = masks.iter().filter(|m| m[t]).count();
        sum[t] = hits as f64;
        union[t] = match mode {
            UnionMode::Union => (hits > 0) as u8 as f64,
            UnionMode::Intersection => (!masks.is_empty() && hits == masks.len()) as u8 as f64,
        };
    }
    Ok(FusionMaps { union, sum })
}

/// Detector phrase plus the mapping from each distinct type token back to the
/// subjects sharing it, in subject order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionPrompt {
    pub text: String,
    pub groups: Vec<(String, Vec<String>)>,
}

impl DetectionPrompt {
    pub fn phrases(&self) -> Vec<String> {
        self.groups.iter().map(|(t, _)| t.clone()).collect()
    }
}

/// Joins the distinct type tokens as `"man. girl."`.
pub fn build_detection_prompt(subjects: &[SubjectSpec]) -> DetectionPrompt {
    let mut groups: Vec<(String, Vec<String>)> = Vec::new();
    for s in subjects {
        match groups.iter_mut().find(|(t, _)| *t == s.type_token) {
            Some((_, names)) => names.push(s.name.clone()),
            None => groups.push((s.type_token.clone(), vec![s.name.clone()])),
        }
    }
    let text = groups
        .iter()
        .map(|(t, _)| format!("{t}."))
        .collect::<Vec<_>>()
        .join(" ");
    DetectionPrompt { text, groups }
}

/// Per-subject masks of one image plus their per-layer derivatives.
#[derive(Debug, Clone, Default)]
pub struct MaskSet {
    pub pixel_masks: BTreeMap<String, PixelMask>,
    pub layer_masks: BTreeMap<(String, LayerId), LayerMask>,
    pub fusion: BTreeMap<LayerId, FusionMaps>,
    pub correspondence: BTreeMap<(String, LayerId), CorrespondenceMatrix>,
    /// Subjects the segmenter did not find; their masks are empty.
    pub missing: Vec<String>,
}

impl MaskSet {
    pub fn is_empty(&self) -> bool {
        self.pixel_masks.is_empty()
    }

    pub fn layer_mask(&self, subject: &str, layer: &LayerId) -> Option<&LayerMask> {
        self.layer_masks.get(&(subject.to_string(), *layer))
    }

    /// Downsamples every pixel mask onto every catalog layer and builds the
    /// fusion maps. Subject order for fusion follows the map's key order.
    pub fn with_layers(mut self, catalog: &[LayerInfo], mode: UnionMode) -> Result<Self> {
        self.layer_masks.clear();
        self.fusion.clear();
        for layer in catalog {
            let mut per_layer = Vec::new();
            for (name, pm) in &self.pixel_masks {
                let lm = downsample_mask(pm, layer, layer.grid)?;
                per_layer.push(lm.values.clone());
                self.layer_masks.insert((name.clone(), layer.id), lm);
            }
            let refs: Vec<&[bool]> = per_layer.iter().map(|v| v.as_slice()).collect();
            self.fusion
                .insert(layer.id, fusion_maps(&refs, layer.n_tokens(), mode)?);
        }
        Ok(self)
    }

    /// True when no pixel is claimed by two subjects.
    pub fn is_disjoint(&self) -> bool {
        let masks: Vec<&PixelMask> = self.pixel_masks.values().collect();
        for (i, a) in masks.iter().enumerate() {
            for b in &masks[i + 1..] {
                if a.values.dim() == b.values.dim()
                    && a.values.iter().zip(b.values.iter()).any(|(x, y)| *x && *y)
                {
                    return false;
                }
            }
        }
        true
    }

    pub fn save_pngs(&self, dir: &Path) -> Result<BTreeMap<String, String>> {
        let mut paths = BTreeMap::new();
        for (name, pm) in &self.pixel_masks {
            let file = format!("{}.png", file_stem(name));
            pm.save_png(&dir.join(&file))?;
            paths.insert(name.clone(), file);
        }
        Ok(paths)
    }
}

/// Filesystem-safe stem for a subject name.
pub fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Segments `subjects` in `image` and makes the masks pairwise disjoint.
///
/// The k-th best segment for a shared type token goes to the k-th subject
/// carrying that token. Contested pixels go to the higher-scoring mask.
pub fn segment_subjects(
    image: &Image,
    subjects: &[SubjectSpec],
    segmenter: &dyn Segmenter,
) -> Result<MaskSet> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let prompt = build_detection_prompt(subjects);
    let mut set = MaskSet::default();
    if subjects.is_empty() {
        return Ok(set);
    }
    let segments = segmenter
        .segment(image, &prompt.phrases())
        .map_err(|e| match e {
            Error::SegmenterFailure(_) => e,
            other => Error::SegmenterFailure(other.to_string()),
        })?;
    for seg in &segments {
        if seg.mask.dim() != (h, w) {
            return Err(Error::SegmenterFailure(format!(
                "mask for `{}` is {:?}, image is ({h}, {w})",
                seg.phrase,
                seg.mask.dim()
            )));
        }
        if !(0.0..=1.0).contains(&seg.score) {
            return Err(Error::SegmenterFailure(format!(
                "score {} for `{}` outside [0, 1]",
                seg.score, seg.phrase
            )));
        }
    }

    for (token, names) in &prompt.groups {
        let mut ranked: Vec<_> = segments.iter().filter(|s| &s.phrase == token).collect();
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
        for (k, name) in names.iter().enumerate() {
            match ranked.get(k) {
                Some(seg) if seg.mask.iter().any(|v| *v) => {
                    set.pixel_masks.insert(
                        name.clone(),
                        PixelMask {
                            values: seg.mask.clone(),
                            source: MaskSource::Segmentation,
                            subject_name: name.clone(),
                            score: seg.score,
                        },
                    );
                }
                _ => {
                    set.pixel_masks.insert(name.clone(), PixelMask::empty(name, h, w));
                    set.missing.push(name.clone());
                }
            }
        }
    }
    resolve_overlaps(&mut set, subjects);
    Ok(set)
}

fn resolve_overlaps(set: &mut MaskSet, subjects: &[SubjectSpec]) {
    let order: Vec<&str> = subjects.iter().map(|s| s.name.as_str()).collect();
    let Some(first) = set.pixel_masks.values().next() else {
        return;
    };
    let (h, w) = first.values.dim();
    for y in 0..h {
        for x in 0..w {
            let claimants: Vec<&str> = order
                .iter()
                .copied()
                .filter(|n| set.pixel_masks[*n].values[[y, x]])
                .collect();
            if claimants.len() < 2 {
                continue;
            }
            // strict > keeps the earlier subject on ties
            let winner = claimants
                .iter()
                .copied()
                .reduce(|best, n| {
                    if set.pixel_masks[n].score > set.pixel_masks[best].score {
                        n
                    } else {
                        best
                    }
                })
                .unwrap_or(claimants[0]);
            for n in claimants {
                if n != winner {
                    if let Some(m) = set.pixel_masks.get_mut(n) {
                        m.values[[y, x]] = false;
                    }
                }
            }
        }
    }
}

/// Area-average pooling onto the token grid, then a strict `> 0.5` threshold.
pub fn downsample_mask(
    mask: &PixelMask,
    layer: &LayerInfo,
    token_grid: (usize, usize),
) -> Result<LayerMask> {
    if token_grid != layer.grid {
        return Err(Error::shape(format!(
            "token grid {token_grid:?} does not match layer {} grid {:?}",
            layer.id, layer.grid
        )));
    }
    let (h, w) = mask.values.dim();
    let (gh, gw) = token_grid;
    if gh == 0 || gw == 0 || h % gh != 0 || w % gw != 0 {
        return Err(Error::shape(format!(
            "mask {h}x{w} does not tile onto a {gh}x{gw} token grid"
        )));
    }
    let (bh, bw) = (h / gh, w / gw);
    let area = (bh * bw) as f64;
    let mut values = Vec::with_capacity(gh * gw);
    for ty in 0..gh {
        for tx in 0..gw {
            let block = mask
                .values
                .slice(ndarray::s![ty * bh..(ty + 1) * bh, tx * bw..(tx + 1) * bw]);
            let on = block.iter().filter(|v| **v).count() as f64;
            values.push(on / area > 0.5);
        }
    }
    Ok(LayerMask {
        values,
        layer: layer.id,
        subject_name: mask.subject_name.clone(),
    })
}

/// Fraction of a subject's attention mass that falls outside its mask.
pub fn drift_fraction(mask: &[bool], mass: &[f64]) -> Result<f64> {
    if mask.len() != mass.len() {
        return Err(Error::shape(format!(
            "mask of {} tokens vs attention mass of {}",
            mask.len(),
            mass.len()
        )));
    }
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return Ok(0.0);
    }
    let outside: f64 = mask
        .iter()
        .zip(mass)
        .filter(|(m, _)| !**m)
        .map(|(_, a)| *a)
        .sum();
    Ok(outside / total)
}

/// True iff some subject's drift fraction exceeds `threshold`.
pub fn should_refine(subjects: &[(&[bool], &[f64])], threshold: f64) -> Result<bool> {
    for (mask, mass) in subjects {
        if drift_fraction(mask, mass)? > threshold {
            return Ok(true);
        }
    }
    Ok(false)
}

/// When attention-derived masks replace the segmentation masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRefine {
    #[default]
    Off,
    Auto,
    On,
}

impl std::str::FromStr for MaskRefine {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "off" => Ok(MaskRefine::Off),
            "auto" => Ok(MaskRefine::Auto),
            "on" => Ok(MaskRefine::On),
            other => Err(format!("unknown mask refinement mode `{other}` (off|auto|on)")),
        }
    }
}
