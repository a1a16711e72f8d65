use std::path::{Path, PathBuf};

use dreamstory_core::backends::{
    make_mock_denoiser, make_replay_llm, ContrastAesthetic, FnLlm, HashScorer, LayoutMock, LlmClient,
    MockDenoiser, MockSpec, PixelSimilarity, RecordingLlm,
};
use dreamstory_core::director::{HeuristicLlm, TemplateSet};
use dreamstory_core::eval::EvalBackends;
use dreamstory_core::{io, Error, Result};

/// Bands used by the mock segmenter and detector.
const MOCK_BANDS: usize = 3;

pub fn templates(dir: Option<&Path>) -> Result<TemplateSet> {
    match dir {
        Some(d) => TemplateSet::with_overrides(d),
        None => Ok(TemplateSet::builtin()),
    }
}

pub fn make_llm(spec: &str, templates: &TemplateSet) -> Result<Box<dyn LlmClient>> {
    match spec.split_once(':') {
        None if spec == "mock" => Ok(Box::new(HeuristicLlm::new(templates.clone()))),
        Some(("replay", path)) => Ok(Box::new(make_replay_llm(Path::new(path))?)),
        Some(("fixed", path)) => {
            let text = io::read_to_string(Path::new(path))?;
            Ok(Box::new(FnLlm::new(format!("fixed:{path}"), move |_| Ok(text.clone()))))
        }
        _ => Err(Error::InvalidSpec(format!(
            "unknown LLM `{spec}` (mock, replay:<path>, fixed:<path>)"
        ))),
    }
}

/// An LLM that optionally records its exchanges.
pub struct SessionLlm {
    inner: RecordingLlm<Box<dyn LlmClient>>,
    record: Option<PathBuf>,
}

impl SessionLlm {
    pub fn new(spec: &str, templates: &TemplateSet, record: Option<PathBuf>) -> Result<Self> {
        Ok(Self {
            inner: RecordingLlm::new(make_llm(spec, templates)?),
            record,
        })
    }

    pub fn client(&self) -> &dyn LlmClient {
        &self.inner
    }

    /// Writes the transcript when recording was requested.
    pub fn finish(&self) -> Result<()> {
        match &self.record {
            Some(path) => {
                self.inner.save(path)?;
                log::info!("recorded LLM transcript to {}", path.display());
                Ok(())
            }
            None => Ok(()),
        }
    }
}

pub fn make_backend(spec: &str) -> Result<MockDenoiser> {
    let seed = match spec.split_once(':') {
        None if spec == "mock" => 0,
        Some(("mock", seed)) => seed
            .parse()
            .map_err(|_| Error::InvalidSpec(format!("mock weights seed `{seed}` is not an integer")))?,
        _ => return Err(Error::InvalidSpec(format!("unknown backend `{spec}` (mock, mock:<seed>)"))),
    };
    make_mock_denoiser(seed, MockSpec::default())
}

pub fn layout() -> LayoutMock {
    LayoutMock::bands(MOCK_BANDS)
}

pub struct MockScorers {
    layout: LayoutMock,
    similarity: PixelSimilarity,
    clip: HashScorer,
}

impl Default for MockScorers {
    fn default() -> Self {
        Self {
            layout: layout(),
            similarity: PixelSimilarity::default(),
            clip: HashScorer::default(),
        }
    }
}

impl MockScorers {

    pub fn backends(&self) -> EvalBackends<'_> {
        EvalBackends {
            detector: &self.layout,
            similarity: &self.similarity,
            clip: &self.clip,
            aesthetic: &ContrastAesthetic,
        }
    }
}
