//! Story-to-image pipeline with subject-consistent masked attention.

pub mod attention;
pub mod backends;
pub mod benchmark;
pub mod director;
pub mod error;
pub mod eval;
pub mod io;
pub mod mask;
pub mod pipeline;
pub mod plan;
pub mod text;
pub mod types;

pub use error::{Error, Result};
pub use plan::{SceneSpec, StoryPlan, SubjectSpec, TraceEntry, PLAN_SCHEMA};
pub use types::{
    derive_seed, AttnKind, BlockKind, BoundingBox, Image, LayerId, LayerInfo, Latents,
    TokenEmbeddings,
};
