//! Denoiser interface and the attention-processor hook surface.
//!
//! A backend runs a joint batch of streams (zero or more reference streams
//! followed by exactly one target stream) through its denoising loop in
//! lockstep. At every attention layer it projects Q/K/V for all streams and
//! hands them to the installed processor, which returns the pre-projection
//! attention output for every stream. The backend owns the output projection
//! and the residual path.

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};

use ndarray::Array2;

use crate::attention::vanilla_attention;
use crate::error::{Error, Result};
use crate::types::{Image, LayerId, LayerInfo, Latents, TokenEmbeddings};

/// Which classifier-free-guidance pass a processor call belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidancePass {
    Conditional,
    Unconditional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamRole {
    /// Re-derivation of subject `index`'s portrait trajectory.
    Reference(usize),
    Target,
}

/// One stream of a joint denoising batch.
#[derive(Debug, Clone)]
pub struct DenoiseStream {
    pub role: StreamRole,
    pub latents: Latents,
    pub cond: TokenEmbeddings,
    pub uncond: TokenEmbeddings,
}

/// Projected features of one stream at one attention layer.
#[derive(Debug, Clone)]
pub struct StreamQkv {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
}

pub struct AttentionCall<'a> {
    pub layer: LayerInfo,
    pub timestep: usize,
    pub pass: GuidancePass,
    pub scale: f64,
    pub roles: &'a [StreamRole],
    pub streams: &'a [StreamQkv],
}

impl AttentionCall<'_> {
    pub fn target_index(&self) -> Result<usize> {
        match self.roles.last() {
            Some(StreamRole::Target) => Ok(self.roles.len() - 1),
            _ => Err(Error::TimestepMisalignment(
                "joint batch must end with the target stream".into(),
            )),
        }
    }

    /// Plain attention for one stream.
    pub fn vanilla(&self, stream: usize) -> Result<Array2<f64>> {
        let s = &self.streams[stream];
        vanilla_attention(s.q.view(), s.k.view(), s.v.view(), self.scale)
    }
}

/// Attention processor installed on one or more layers.
pub trait AttentionProcessor: Send {
    /// Returns one output per stream, before the layer's output projection.
    fn process(&mut self, call: &AttentionCall<'_>) -> Result<Vec<Array2<f64>>>;

    /// Called once after both guidance passes of a step finished.
    fn end_step(&mut self, _timestep: usize) -> Result<()> {
        Ok(())
    }
}

/// Recomputes plain attention for every stream; installing it must not
/// change any output.
#[derive(Debug, Default, Clone, Copy)]
pub struct VanillaProcessor;

impl AttentionProcessor for VanillaProcessor {
    fn process(&mut self, call: &AttentionCall<'_>) -> Result<Vec<Array2<f64>>> {
        (0..call.streams.len()).map(|i| call.vanilla(i)).collect()
    }
}

/// Owned copy of one processor call.
#[derive(Debug, Clone)]
pub struct CapturedCall {
    pub layer: LayerInfo,
    pub timestep: usize,
    pub pass: GuidancePass,
    pub scale: f64,
    pub roles: Vec<StreamRole>,
    pub streams: Vec<StreamQkv>,
}

impl CapturedCall {
    pub fn as_call(&self) -> AttentionCall<'_> {
        AttentionCall {
            layer: self.layer,
            timestep: self.timestep,
            pass: self.pass,
            scale: self.scale,
            roles: &self.roles,
            streams: &self.streams,
        }
    }
}

/// Records every call it sees and answers with plain attention.
#[derive(Debug, Default, Clone)]
pub struct CallRecorder {
    calls: Arc<Mutex<Vec<CapturedCall>>>,
}

impl CallRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Shared view of the recorded calls; stays valid after the recorder is
    /// moved into a registry.
    pub fn calls(&self) -> Arc<Mutex<Vec<CapturedCall>>> {
        Arc::clone(&self.calls)
    }
}

impl AttentionProcessor for CallRecorder {
    fn process(&mut self, call: &AttentionCall<'_>) -> Result<Vec<Array2<f64>>> {
        self.calls.lock().expect("recorder lock").push(CapturedCall {
            layer: call.layer,
            timestep: call.timestep,
            pass: call.pass,
            scale: call.scale,
            roles: call.roles.to_vec(),
            streams: call.streams.to_vec(),
        });
        (0..call.streams.len()).map(|i| call.vanilla(i)).collect()
    }
}

#[derive(Default)]
pub struct ProcessorRegistry {
    entries: Vec<(BTreeSet<LayerId>, Box<dyn AttentionProcessor>)>,
}

impl ProcessorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Installs `processor` on `layers`. Later installs win for layers that
    /// are already covered.
    pub fn install(
        &mut self,
        layers: impl IntoIterator<Item = LayerId>,
        processor: Box<dyn AttentionProcessor>,
    ) {
        self.entries.insert(0, (layers.into_iter().collect(), processor));
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&mut self, layer: &LayerId) -> Option<&mut (dyn AttentionProcessor + 'static)> {
        self.entries
            .iter_mut()
            .find(|(layers, _)| layers.contains(layer))
            .map(|(_, p)| p.as_mut())
    }

    /// Runs the installed processor for `call`, or plain attention.
    pub fn dispatch(&mut self, call: &AttentionCall<'_>) -> Result<Vec<Array2<f64>>> {
        let outputs = match self.lookup(&call.layer.id) {
            Some(p) => p.process(call)?,
            None => VanillaProcessor.process(call)?,
        };
        if outputs.len() != call.streams.len() {
            return Err(Error::shape(format!(
                "processor at {} returned {} outputs for {} streams",
                call.layer.id,
                outputs.len(),
                call.streams.len()
            )));
        }
        Ok(outputs)
    }

    pub fn end_step(&mut self, timestep: usize) -> Result<()> {
        for (_, p) in &mut self.entries {
            p.end_step(timestep)?;
        }
        Ok(())
    }
}

pub trait DenoiserBackend: Send + Sync {
    fn name(&self) -> &str;

    fn encode_text(&self, prompt: &str) -> Result<TokenEmbeddings>;

    fn init_latents(&self, seed: u64, height: u32, width: u32) -> Result<Latents>;

    /// Denoises all streams jointly for `steps` steps. Streams must share
    /// latent shape and step counter.
    fn run_steps(
        &self,
        streams: &mut [DenoiseStream],
        steps: usize,
        guidance_scale: f64,
        registry: &mut ProcessorRegistry,
    ) -> Result<()>;

    fn decode(&self, latents: &Latents, height: u32, width: u32) -> Result<Image>;

    fn layer_catalog(&self) -> Vec<LayerInfo>;

    /// Errors unless an image of this size maps onto the latent grid.
    fn check_dimensions(&self, height: u32, width: u32) -> Result<()>;
}

/// Single-stream vanilla render: the portrait and rehearsal path.
pub fn render_single(
    backend: &dyn DenoiserBackend,
    prompt: &str,
    seed: u64,
    steps: usize,
    guidance_scale: f64,
    height: u32,
    width: u32,
) -> Result<Image> {
    let mut streams = [DenoiseStream {
        role: StreamRole::Target,
        latents: backend.init_latents(seed, height, width)?,
        cond: backend.encode_text(prompt)?,
        uncond: backend.encode_text("")?,
    }];
    backend.run_steps(&mut streams, steps, guidance_scale, &mut ProcessorRegistry::new())?;
    backend.decode(&streams[0].latents, height, width)
}
