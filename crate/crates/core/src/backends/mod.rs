//! Pluggable model interfaces and deterministic stand-ins.

mod denoiser;
mod llm;
mod mock_denoiser;
mod vision;

pub use denoiser::{
    render_single, AttentionCall, AttentionProcessor, CallRecorder, CapturedCall, DenoiseStream,
    DenoiserBackend, GuidancePass, ProcessorRegistry, StreamQkv, StreamRole, VanillaProcessor,
};
pub use llm::{
    make_replay_llm, message_hash, FnLlm, LlmClient, Message, RateLimitedLlm, RecordingLlm,
    ReplayLlm, Role, Transcript, TranscriptEntry,
};
pub use mock_denoiser::{make_mock_denoiser, MockDenoiser, MockLayerSpec, MockSpec};
pub use vision::{
    box_mask, AestheticScorer, ConstantScorer, ContrastAesthetic, Detection, Detector, Fallback,
    HashScorer, ImageTextScorer, KeyedScorer, LayoutMock, PerceptualSimilarity, PixelSimilarity, Placement, RelBox, Segment,
    Segmenter,
};
