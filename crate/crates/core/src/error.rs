use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// The LLM answered, but the answer could not be coerced into the expected schema.
    #[error("LLM response for stage `{stage}` did not match schema: {reason}")]
    LlmFormat {
        stage: String,
        reason: String,
        text: String,
    },

    #[error("LLM transport failure: {0}")]
    LlmTransport(String),

    #[error("no recorded response for message hash {hash}")]
    ReplayMiss { hash: String },

    #[error("requested {requested} scenes but the LLM returned {returned}")]
    SceneCountMismatch { requested: usize, returned: usize },

    #[error("subject name `{name}` survived rewriting of scene {scene}")]
    RewriteLeak { scene: usize, name: String },

    #[error("invalid backend spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("streams are not timestep-aligned: {0}")]
    TimestepMisalignment(String),

    #[error("segmenter failure: {0}")]
    SegmenterFailure(String),

    #[error("plan integrity violation: {0}")]
    PlanIntegrity(String),

    #[error("subject pool exhausted: wanted {wanted} unique subjects, got {got}")]
    PoolExhausted { wanted: usize, got: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("prediction key {0} has no ground truth")]
    KeyMismatch(String),

    #[error("schema error at {location}: {message}")]
    Schema { location: String, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn schema(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            location: location.into(),
            message: message.into(),
        }
    }

    /// Attaches a stage name. Format errors carry the stage inline, everything
    /// else gets wrapped.
    pub fn at_stage(self, stage: &str) -> Self {
        match self {
            Error::LlmFormat { reason, text, .. } => Error::LlmFormat {
                stage: stage.to_string(),
                reason,
                text,
            },
            e @ Error::Stage { .. } => e,
            other => Error::Stage {
                stage: stage.to_string(),
                source: Box::new(other),
            },
        }
    }

    /// The innermost error, looking through stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_llm_format(&self) -> bool {
        matches!(self.root(), Error::LlmFormat { .. })
    }

    pub fn is_schema(&self) -> bool {
        matches!(self.root(), Error::Schema { .. })
    }
}
