//! Types shared by the backends, mask engine, attention processors and pipeline.

use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Image = image::RgbImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Encoder,
    Middle,
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnKind {
    #[serde(rename = "self")]
    SelfAttn,
    Cross,
}

/// Address of one attention layer inside a backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerId {
    pub block_kind: BlockKind,
    pub layer_index: usize,
    pub attn_kind: AttnKind,
}

impl LayerId {
    pub fn new(block_kind: BlockKind, layer_index: usize, attn_kind: AttnKind) -> Self {
        Self {
            block_kind,
            layer_index,
            attn_kind,
        }
    }

    /// The layer of the other attention kind in the same block position.
    pub fn sibling(&self) -> LayerId {
        let attn_kind = match self.attn_kind {
            AttnKind::SelfAttn => AttnKind::Cross,
            AttnKind::Cross => AttnKind::SelfAttn,
        };
        LayerId { attn_kind, ..*self }
    }

    pub fn is_self(&self) -> bool {
        self.attn_kind == AttnKind::SelfAttn
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let block = match self.block_kind {
            BlockKind::Encoder => "enc",
            BlockKind::Middle => "mid",
            BlockKind::Decoder => "dec",
        };
        let kind = match self.attn_kind {
            AttnKind::SelfAttn => "self",
            AttnKind::Cross => "cross",
        };
        write!(f, "{block}{}.{kind}", self.layer_index)
    }
}

/// A catalog entry: the layer address plus its spatial token grid (rows, cols).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub id: LayerId,
    pub grid: (usize, usize),
}

impl LayerInfo {
    pub fn n_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Text-encoder output, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddings {
    values: Array2<f64>,
}

impl TokenEmbeddings {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::Input("token embeddings need at least one token".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("token embeddings contain non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn token_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Latent image: one row per spatial position, one column per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Latents {
    pub values: Array2<f64>,
    pub grid: (usize, usize),
    /// Number of denoising steps already applied.
    pub step: usize,
}

/// Pixel-space box, half-open on the right and bottom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BoundingBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn intersection(&self, other: &BoundingBox) -> BoundingBox {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = self.x1.min(other.x1).max(x0);
        let y1 = self.y1.min(other.y1).max(y0);
        BoundingBox { x0, y0, x1, y1 }
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection(other).area();
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Clamps the box into an image of the given size.
    pub fn clamp_to(&self, width: u32, height: u32) -> BoundingBox {
        let x0 = self.x0.min(width);
        let y0 = self.y0.min(height);
        BoundingBox {
            x0,
            y0,
            x1: self.x1.min(width).max(x0),
            y1: self.y1.min(height).max(y0),
        }
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x0 <= self.x1 && self.y0 <= self.y1 && self.x1 <= width && self.y1 <= height
    }
}

/// Stable 64-bit seed derived from a parent seed and a label.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(parent.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
