//! Segmentation, detection and scoring interfaces with fixture-driven mocks.

use std::collections::HashMap;

use image::imageops::{self, FilterType};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{derive_seed, sha256_hex, BoundingBox, Image};

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub phrase: String,
    pub score: f64,
    pub bbox: BoundingBox,
    /// `[height x width]`, same resolution as the queried image.
    pub mask: Array2<bool>,
}

/// Open-vocabulary segmentation.
pub trait Segmenter: Send + Sync {
    fn segment(&self, image: &Image, phrases: &[String]) -> Result<Vec<Segment>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
}

/// Open-vocabulary detection of one category.
pub trait Detector: Send + Sync {
    fn detect(&self, image: &Image, category: &str) -> Result<Vec<Detection>>;
}

/// Similarity in `[0, 1]`, 1 meaning identical.
pub trait PerceptualSimilarity: Send + Sync {
    fn similarity(&self, a: &Image, b: &Image) -> Result<f64>;
}

pub trait ImageTextScorer: Send + Sync {
    fn score(&self, image: &Image, text: &str) -> Result<f64>;
}

pub trait AestheticScorer: Send + Sync {
    fn score(&self, image: &Image) -> Result<f64>;
}

/// Box in image-relative coordinates, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl RelBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn to_pixels(&self, width: u32, height: u32) -> BoundingBox {
        let px = |f: f64, n: u32| ((f.clamp(0.0, 1.0) * n as f64).round() as u32).min(n);
        BoundingBox::new(
            px(self.x0, width),
            px(self.y0, height),
            px(self.x1, width),
            px(self.y1, height),
        )
        .clamp_to(width, height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub phrase: String,
    pub rel_box: RelBox,
    pub score: f64,
}

/// What a [`LayoutMock`] reports for phrases without a placement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Fallback {
    /// Not found.
    Miss,
    /// Vertical band chosen by a stable hash of the phrase out of `n` bands.
    Bands(usize),
}

/// Segmenter and detector returning configured rectangles.
///
/// Every placement whose phrase matches the query is reported, so a phrase
/// may yield several ranked hits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutMock {
    pub placements: Vec<Placement>,
    pub fallback: Fallback,
}

impl LayoutMock {
    pub fn new(placements: Vec<Placement>) -> Self {
        Self {
            placements,
            fallback: Fallback::Miss,
        }
    }

    pub fn bands(n: usize) -> Self {
        Self {
            placements: Vec::new(),
            fallback: Fallback::Bands(n.max(1)),
        }
    }

    pub fn place(mut self, phrase: &str, rel_box: RelBox, score: f64) -> Self {
        self.placements.push(Placement {
            phrase: phrase.to_string(),
            rel_box,
            score,
        });
        self
    }

    fn hits(&self, phrase: &str) -> Vec<(RelBox, f64)> {
        let explicit: Vec<_> = self
            .placements
            .iter()
            .filter(|p| p.phrase == phrase)
            .map(|p| (p.rel_box, p.score))
            .collect();
        if !explicit.is_empty() {
            return explicit;
        }
        match self.fallback {
            Fallback::Miss => Vec::new(),
            Fallback::Bands(n) => {
                let slot = (derive_seed(0, phrase) % n as u64) as f64;
                let w = 1.0 / n as f64;
                // slightly wider than the band so neighbours overlap
                let rel = RelBox::new(
                    (slot * w - 0.05 * w).max(0.0),
                    0.1,
                    ((slot + 1.0) * w + 0.05 * w).min(1.0),
                    0.95,
                );
                vec![(rel, 0.9 - 0.1 * (slot / n as f64))]
            }
        }
    }
}

pub fn box_mask(bbox: &BoundingBox, width: u32, height: u32) -> Array2<bool> {
    Array2::from_shape_fn((height as usize, width as usize), |(y, x)| {
        let (x, y) = (x as u32, y as u32);
        x >= bbox.x0 && x < bbox.x1 && y >= bbox.y0 && y < bbox.y1
    })
}

impl Segmenter for LayoutMock {
    fn segment(&self, image: &Image, phrases: &[String]) -> Result<Vec<Segment>> {
        let (w, h) = image.dimensions();
        let mut out = Vec::new();
        for phrase in phrases {
            for (rel, score) in self.hits(phrase) {
                let bbox = rel.to_pixels(w, h);
                out.push(Segment {
                    phrase: phrase.clone(),
                    score,
                    bbox,
                    mask: box_mask(&bbox, w, h),
                });
            }
        }
        Ok(out)
    }
}

impl Detector for LayoutMock {
    fn detect(&self, image: &Image, category: &str) -> Result<Vec<Detection>> {
        let (w, h) = image.dimensions();
        Ok(self
            .hits(category)
            .into_iter()
            .map(|(rel, score)| Detection {
                bbox: rel.to_pixels(w, h),
                score,
            })
            .collect())
    }
}

/// `1 - mean absolute channel difference / 255` after resizing both images to
/// a common thumbnail. Identical inputs score exactly 1; symmetric.
#[derive(Debug, Clone, Copy)]
pub struct PixelSimilarity {
    pub thumb: u32,
}

impl Default for PixelSimilarity {
    fn default() -> Self {
        Self { thumb: 32 }
    }
}

impl PerceptualSimilarity for PixelSimilarity {
    fn similarity(&self, a: &Image, b: &Image) -> Result<f64> {
        if a.width() == 0 || a.height() == 0 || b.width() == 0 || b.height() == 0 {
            return Err(Error::Input("similarity of an empty image".into()));
        }
        let ta = imageops::resize(a, self.thumb, self.thumb, FilterType::Nearest);
        let tb = imageops::resize(b, self.thumb, self.thumb, FilterType::Nearest);
        let total: u64 = ta
            .as_raw()
            .iter()
            .zip(tb.as_raw())
            .map(|(x, y)| x.abs_diff(*y) as u64)
            .sum();
        let n = ta.as_raw().len() as f64;
        Ok(1.0 - total as f64 / (255.0 * n))
    }
}

/// Scorer that returns the same value for every input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantScorer(pub f64);

impl ImageTextScorer for ConstantScorer {
    fn score(&self, _image: &Image, _text: &str) -> Result<f64> {
        Ok(self.0)
    }
}

impl AestheticScorer for ConstantScorer {
    fn score(&self, _image: &Image) -> Result<f64> {
        Ok(self.0)
    }
}

/// Scorer backed by a fixture table keyed by image content (and text).
#[derive(Debug, Clone, Default)]
pub struct KeyedScorer {
    table: HashMap<String, f64>,
    pub default: Option<f64>,
}

impl KeyedScorer {
    pub fn key(image: &Image, text: Option<&str>) -> String {
        let mut bytes = image.width().to_le_bytes().to_vec();
        bytes.extend_from_slice(&image.height().to_le_bytes());
        bytes.extend_from_slice(image.as_raw());
        if let Some(t) = text {
            bytes.push(0);
            bytes.extend_from_slice(t.as_bytes());
        }
        sha256_hex(&bytes)
    }

    pub fn insert(&mut self, image: &Image, text: Option<&str>, value: f64) {
        self.table.insert(Self::key(image, text), value);
    }

    fn lookup(&self, key: String) -> Result<f64> {
        self.table
            .get(&key)
            .copied()
            .or(self.default)
            .ok_or_else(|| Error::Input(format!("no fixture score for key {key}")))
    }
}

impl ImageTextScorer for KeyedScorer {
    fn score(&self, image: &Image, text: &str) -> Result<f64> {
        self.lookup(Self::key(image, Some(text)))
    }
}

impl AestheticScorer for KeyedScorer {
    fn score(&self, image: &Image) -> Result<f64> {
        self.lookup(Self::key(image, None))
    }
}

/// Deterministic stand-in for an image-text model: a value in `[lo, hi]`
/// derived from a hash of the image content and the text.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HashScorer {
    pub lo: f64,
    pub hi: f64,
}

impl Default for HashScorer {
    fn default() -> Self {
        Self { lo: 0.2, hi: 0.4 }
    }
}

impl ImageTextScorer for HashScorer {
    fn score(&self, image: &Image, text: &str) -> Result<f64> {
        let seed = derive_seed(0, &KeyedScorer::key(image, Some(text)));
        let unit = (seed >> 11) as f64 / (1u64 << 53) as f64;
        Ok(self.lo + unit * (self.hi - self.lo))
    }
}

/// Luminance standard deviation mapped onto `[0, 10]`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ContrastAesthetic;

impl AestheticScorer for ContrastAesthetic {
    fn score(&self, image: &Image) -> Result<f64> {
        let n = (image.width() * image.height()) as f64;
        if n == 0.0 {
            return Err(Error::Input("aesthetic score of an empty image".into()));
        }
        let luma: Vec<f64> = image
            .pixels()
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect();
        let mean = luma.iter().sum::<f64>() / n;
        let var = luma.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
        Ok((var.sqrt() / 127.5 * 10.0).min(10.0))
    }
}
