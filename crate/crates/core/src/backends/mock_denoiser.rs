//! Tiny deterministic denoiser with real attention layers.
//!
//! Weights come from a `ChaCha8Rng` seeded with the backend seed. Each step
//! runs the conditional and unconditional passes over the whole joint batch,
//! combines them with classifier-free guidance and takes an Euler-style step.
//! Every attention layer goes through the processor registry exactly like a
//! production backbone would, so masked attention can be exercised end to end
//! on 8x8 latents.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::denoiser::{
    AttentionCall, DenoiseStream, DenoiserBackend, GuidancePass, ProcessorRegistry, StreamQkv,
    StreamRole,
};
use crate::error::{Error, Result};
use crate::types::{
    derive_seed, AttnKind, BlockKind, Image, LayerId, LayerInfo, Latents, TokenEmbeddings,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockLayerSpec {
    pub block: BlockKind,
    pub index: usize,
    pub self_attn: bool,
    pub cross_attn: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockSpec {
    /// Latent rows and columns. Middle-block layers run at half resolution.
    pub latent_grid: (usize, usize),
    pub channels: usize,
    pub token_dim: usize,
    pub max_text_tokens: usize,
    pub layers: Vec<MockLayerSpec>,
}

impl Default for MockSpec {
    fn default() -> Self {
        let both = |block, index| MockLayerSpec {
            block,
            index,
            self_attn: true,
            cross_attn: true,
        };
        Self {
            latent_grid: (8, 8),
            channels: 4,
            token_dim: 16,
            max_text_tokens: 32,
            layers: vec![
                both(BlockKind::Encoder, 0),
                both(BlockKind::Middle, 0),
                both(BlockKind::Decoder, 0),
                both(BlockKind::Decoder, 1),
            ],
        }
    }
}

struct Projections {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    out: Array2<f64>,
}

struct MockLayer {
    spec: MockLayerSpec,
    grid: (usize, usize),
    self_proj: Option<Projections>,
    cross_proj: Option<Projections>,
}

pub struct MockDenoiser {
    seed: u64,
    spec: MockSpec,
    w_in: Array2<f64>,
    w_out: Array2<f64>,
    time_freq: Array1<f64>,
    time_phase: Array1<f64>,
    layers: Vec<MockLayer>,
    name: String,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (3.0 / rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

fn projections(rng: &mut ChaCha8Rng, d: usize) -> Projections {
    Projections {
        q: uniform_matrix(rng, d, d),
        k: uniform_matrix(rng, d, d),
        v: uniform_matrix(rng, d, d),
        out: uniform_matrix(rng, d, d),
    }
}

/// Builds a mock denoiser whose weights are a function of `seed` only.
pub fn make_mock_denoiser(seed: u64, spec: MockSpec) -> Result<MockDenoiser> {
    let (gh, gw) = spec.latent_grid;
    if spec.layers.is_empty() {
        return Err(Error::InvalidSpec("layer catalog is empty".into()));
    }
    if gh == 0 || gw == 0 {
        return Err(Error::InvalidSpec("latent grid must be non-empty".into()));
    }
    if spec.channels < 3 {
        return Err(Error::InvalidSpec("need at least 3 latent channels".into()));
    }
    if spec.token_dim == 0 || spec.max_text_tokens == 0 {
        return Err(Error::InvalidSpec("token dim and text length must be positive".into()));
    }
    if spec.layers.iter().any(|l| !l.self_attn && !l.cross_attn) {
        return Err(Error::InvalidSpec("layer without attention".into()));
    }
    let has_middle = spec.layers.iter().any(|l| l.block == BlockKind::Middle);
    if has_middle && (gh % 2 != 0 || gw % 2 != 0) {
        return Err(Error::InvalidSpec("middle block needs an even latent grid".into()));
    }
    let mut ids = BTreeSet::new();
    for l in &spec.layers {
        if !ids.insert((l.block, l.index)) {
            return Err(Error::InvalidSpec(format!(
                "duplicate layer {:?}{}",
                l.block, l.index
            )));
        }
    }

    let d = spec.token_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_in = uniform_matrix(&mut rng, spec.channels, d);
    let w_out = uniform_matrix(&mut rng, d, spec.channels);
    let time_freq = Array1::from_shape_fn(d, |_| rng.random_range(0.5..6.0));
    let time_phase = Array1::from_shape_fn(d, |_| rng.random_range(0.0..std::f64::consts::TAU));
    let layers = spec
        .layers
        .iter()
        .map(|l| {
            let grid = if l.block == BlockKind::Middle {
                (gh / 2, gw / 2)
            } else {
                (gh, gw)
            };
            MockLayer {
                spec: l.clone(),
                grid,
                self_proj: l.self_attn.then(|| projections(&mut rng, d)),
                cross_proj: l.cross_attn.then(|| projections(&mut rng, d)),
            }
        })
        .collect();
    Ok(MockDenoiser {
        seed,
        spec,
        w_in,
        w_out,
        time_freq,
        time_phase,
        layers,
        name: format!("mock-{seed}"),
    })
}

fn pool2(h: &Array2<f64>, grid: (usize, usize)) -> Array2<f64> {
    let (gh, gw) = grid;
    let (ph, pw) = (gh / 2, gw / 2);
    let mut out = Array2::<f64>::zeros((ph * pw, h.ncols()));
    for y in 0..gh {
        for x in 0..gw {
            let mut row = out.row_mut((y / 2) * pw + x / 2);
            row.scaled_add(0.25, &h.row(y * gw + x));
        }
    }
    out
}

fn upsample2(h: &Array2<f64>, grid: (usize, usize)) -> Array2<f64> {
    let (gh, gw) = grid;
    let pw = gw / 2;
    Array2::from_shape_fn((gh * gw, h.ncols()), |(t, c)| {
        let (y, x) = (t / gw, t % gw);
        h[[(y / 2) * pw + x / 2, c]]
    })
}

impl MockDenoiser {
    pub fn spec(&self) -> &MockSpec {
        &self.spec
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, token));
        (0..self.spec.token_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect()
    }

    fn attend(
        &self,
        registry: &mut ProcessorRegistry,
        info: LayerInfo,
        timestep: usize,
        pass: GuidancePass,
        roles: &[StreamRole],
        qkv: Vec<StreamQkv>,
    ) -> Result<Vec<Array2<f64>>> {
        let call = AttentionCall {
            layer: info,
            timestep,
            pass,
            scale: 1.0 / (self.spec.token_dim as f64).sqrt(),
            roles,
            streams: &qkv,
        };
        registry.dispatch(&call)
    }

    /// Noise prediction for every stream in one guidance pass.
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        latents: &[&Array2<f64>],
        texts: &[&TokenEmbeddings],
        roles: &[StreamRole],
        timestep: usize,
        tau: f64,
        pass: GuidancePass,
        registry: &mut ProcessorRegistry,
    ) -> Result<Vec<Array2<f64>>> {
        let temb = Array1::from_shape_fn(self.spec.token_dim, |j| {
            (tau * self.time_freq[j] + self.time_phase[j]).sin()
        });
        let mut hidden: Vec<Array2<f64>> = latents.iter().map(|x| x.dot(&self.w_in) + &temb).collect();
        let full = self.spec.latent_grid;

        for layer in &self.layers {
            let middle = layer.spec.block == BlockKind::Middle;
            let before: Vec<Array2<f64>> = hidden
                .iter()
                .map(|h| if middle { pool2(h, full) } else { h.clone() })
                .collect();
            let mut h_l = before.clone();

            if let Some(p) = &layer.self_proj {
                let info = LayerInfo {
                    id: LayerId::new(layer.spec.block, layer.spec.index, AttnKind::SelfAttn),
                    grid: layer.grid,
                };
                let qkv = h_l
                    .iter()
                    .map(|h| StreamQkv {
                        q: h.dot(&p.q),
                        k: h.dot(&p.k),
                        v: h.dot(&p.v),
                    })
                    .collect();
                let outs = self.attend(registry, info, timestep, pass, roles, qkv)?;
                for (h, o) in h_l.iter_mut().zip(&outs) {
                    *h += &o.dot(&p.out);
                }
            }
            if let Some(p) = &layer.cross_proj {
                let info = LayerInfo {
                    id: LayerId::new(layer.spec.block, layer.spec.index, AttnKind::Cross),
                    grid: layer.grid,
                };
                let qkv = h_l
                    .iter()
                    .zip(texts)
                    .map(|(h, t)| StreamQkv {
                        q: h.dot(&p.q),
                        k: t.values().dot(&p.k),
                        v: t.values().dot(&p.v),
                    })
                    .collect();
                let outs = self.attend(registry, info, timestep, pass, roles, qkv)?;
                for (h, o) in h_l.iter_mut().zip(&outs) {
                    *h += &o.dot(&p.out);
                }
            }
            for h in &mut h_l {
                h.mapv_inplace(f64::tanh);
            }
            if middle {
                for ((h, after), before) in hidden.iter_mut().zip(&h_l).zip(&before) {
                    *h += &upsample2(&(after - before), full);
                }
            } else {
                hidden = h_l;
            }
        }
        Ok(hidden.iter().map(|h| h.dot(&self.w_out)).collect())
    }
}

impl DenoiserBackend for MockDenoiser {
    fn name(&self) -> &str {
        &self.name
    }

    fn encode_text(&self, prompt: &str) -> Result<TokenEmbeddings> {
        let words = prompt
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| w.to_lowercase());
        let tokens: Vec<String> = std::iter::once("<bos>".to_string())
            .chain(words)
            .take(self.spec.max_text_tokens)
            .collect();
        let d = self.spec.token_dim;
        let mut values = Array2::<f64>::zeros((tokens.len(), d));
        for (row, tok) in values.outer_iter_mut().zip(&tokens) {
            let v = self.token_vector(tok);
            for (dst, src) in row.into_iter().zip(v) {
                *dst = src;
            }
        }
        TokenEmbeddings::new(values)
    }

    fn init_latents(&self, seed: u64, height: u32, width: u32) -> Result<Latents> {
        self.check_dimensions(height, width)?;
        let (gh, gw) = self.spec.latent_grid;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = Array2::from_shape_fn((gh * gw, self.spec.channels), |_| {
            rng.sample::<f64, _>(StandardNormal)
        });
        Ok(Latents {
            values,
            grid: (gh, gw),
            step: 0,
        })
    }

    fn run_steps(
        &self,
        streams: &mut [DenoiseStream],
        steps: usize,
        guidance_scale: f64,
        registry: &mut ProcessorRegistry,
    ) -> Result<()> {
        let Some(first) = streams.first() else {
            return Ok(());
        };
        let start = first.latents.step;
        let grid = first.latents.grid;
        for (i, s) in streams.iter().enumerate() {
            if s.latents.step != start {
                return Err(Error::TimestepMisalignment(format!(
                    "stream {i} is at step {}, stream 0 at {start}",
                    s.latents.step
                )));
            }
            if s.latents.grid != grid || s.latents.values.dim() != first.latents.values.dim() {
                return Err(Error::shape(format!("stream {i} latent shape differs")));
            }
        }
        if steps == 0 {
            return Err(Error::Input("steps must be at least 1".into()));
        }
        let roles: Vec<StreamRole> = streams.iter().map(|s| s.role).collect();
        let total = start + steps;
        for s in 0..steps {
            let timestep = start + s;
            let tau = (total - timestep) as f64 / total as f64;
            let latents: Vec<&Array2<f64>> = streams.iter().map(|s| &s.latents.values).collect();
            let cond: Vec<&TokenEmbeddings> = streams.iter().map(|s| &s.cond).collect();
            let uncond: Vec<&TokenEmbeddings> = streams.iter().map(|s| &s.uncond).collect();
            let eps_c = self.forward(
                &latents,
                &cond,
                &roles,
                timestep,
                tau,
                GuidancePass::Conditional,
                registry,
            )?;
            let eps_u = self.forward(
                &latents,
                &uncond,
                &roles,
                timestep,
                tau,
                GuidancePass::Unconditional,
                registry,
            )?;
            registry.end_step(timestep)?;
            let dt = 1.0 / total as f64;
            for ((stream, c), u) in streams.iter_mut().zip(eps_c).zip(eps_u) {
                let guided = &u + &((&c - &u) * guidance_scale);
                stream.latents.values.scaled_add(-dt, &guided);
                stream.latents.step += 1;
            }
        }
        Ok(())
    }

    fn decode(&self, latents: &Latents, height: u32, width: u32) -> Result<Image> {
        self.check_dimensions(height, width)?;
        let (gh, gw) = latents.grid;
        if latents.values.nrows() != gh * gw || latents.values.ncols() < 3 {
            return Err(Error::shape("latents do not match their grid"));
        }
        let (bh, bw) = (height as usize / gh, width as usize / gw);
        let colors: Vec<[u8; 3]> = latents
            .values
            .axis_iter(Axis(0))
            .map(|row| {
                let px = |v: f64| (255.0 / (1.0 + (-v).exp())).round() as u8;
                [px(row[0]), px(row[1]), px(row[2])]
            })
            .collect();
        Ok(Image::from_fn(width, height, |x, y| {
            let t = (y as usize / bh) * gw + x as usize / bw;
            image::Rgb(colors[t])
        }))
    }

    fn layer_catalog(&self) -> Vec<LayerInfo> {
        let mut out = Vec::new();
        for l in &self.layers {
            for (present, kind) in [
                (l.spec.self_attn, AttnKind::SelfAttn),
                (l.spec.cross_attn, AttnKind::Cross),
            ] {
                if present {
                    out.push(LayerInfo {
                        id: LayerId::new(l.spec.block, l.spec.index, kind),
                        grid: l.grid,
                    });
                }
            }
        }
        out
    }

    fn check_dimensions(&self, height: u32, width: u32) -> Result<()> {
        let (gh, gw) = self.spec.latent_grid;
        if height == 0 || width == 0 || !(height as usize).is_multiple_of(gh) || !(width as usize).is_multiple_of(gw) {
            return Err(Error::Config(format!(
                "{width}x{height} is not divisible by the {gw}x{gh} latent grid"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::denoiser::{render_single, VanillaProcessor};

    #[test]
    fn zero_layer_catalog_is_invalid() {
        let spec = MockSpec {
            layers: vec![],
            ..MockSpec::default()
        };
        assert!(matches!(make_mock_denoiser(1, spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn default_catalog_has_required_layers() {
        let m = make_mock_denoiser(1, MockSpec::default()).unwrap();
        let cat = m.layer_catalog();
        let dec_self = cat
            .iter()
            .filter(|l| l.id.block_kind == BlockKind::Decoder && l.id.is_self())
            .count();
        let cross = cat.iter().filter(|l| !l.id.is_self()).count();
        assert!(dec_self >= 2 && cross >= 2);
        assert_eq!(cat, m.layer_catalog());
    }

    #[test]
    fn same_inputs_same_image() {
        let a = make_mock_denoiser(3, MockSpec::default()).unwrap();
        let b = make_mock_denoiser(3, MockSpec::default()).unwrap();
        let ia = render_single(&a, "a gorilla on a tower", 11, 4, 7.0, 16, 16).unwrap();
        let ib = render_single(&b, "a gorilla on a tower", 11, 4, 7.0, 16, 16).unwrap();
        assert_eq!(ia, ib);
        let ic = render_single(&a, "a gorilla on a tower", 12, 4, 7.0, 16, 16).unwrap();
        assert_ne!(ia, ic);
    }

    #[test]
    fn passthrough_processor_changes_nothing() {
        let m = make_mock_denoiser(5, MockSpec::default()).unwrap();
        let run = |registry: &mut ProcessorRegistry| {
            let mut streams = [DenoiseStream {
                role: StreamRole::Target,
                latents: m.init_latents(9, 16, 16).unwrap(),
                cond: m.encode_text("a cat").unwrap(),
                uncond: m.encode_text("").unwrap(),
            }];
            m.run_steps(&mut streams, 4, 7.0, registry).unwrap();
            streams[0].latents.values.clone()
        };
        let vanilla = run(&mut ProcessorRegistry::new());
        let mut reg = ProcessorRegistry::new();
        reg.install(
            m.layer_catalog().into_iter().map(|l| l.id),
            Box::new(VanillaProcessor),
        );
        assert_eq!(vanilla, run(&mut reg));
    }

    #[test]
    fn misaligned_streams_are_rejected() {
        let m = make_mock_denoiser(5, MockSpec::default()).unwrap();
        let mk = |step| DenoiseStream {
            role: StreamRole::Target,
            latents: Latents {
                step,
                ..m.init_latents(1, 8, 8).unwrap()
            },
            cond: m.encode_text("x").unwrap(),
            uncond: m.encode_text("").unwrap(),
        };
        let mut streams = [mk(0), mk(1)];
        assert!(matches!(
            m.run_steps(&mut streams, 1, 1.0, &mut ProcessorRegistry::new()),
            Err(Error::TimestepMisalignment(_))
        ));
    }

    #[test]
    fn dimensions_must_tile_latent_grid() {
        let m = make_mock_denoiser(5, MockSpec::default()).unwrap();
        assert!(m.check_dimensions(768, 1280).is_ok());
        assert!(m.check_dimensions(20, 16).is_err());
    }

    #[test]
    fn text_encoding_has_bos_and_caps_length() {
        let m = make_mock_denoiser(5, MockSpec::default()).unwrap();
        assert_eq!(m.encode_text("").unwrap().token_count(), 1);
        assert_eq!(m.encode_text("A cat, a dog").unwrap().token_count(), 5);
        let long = "w ".repeat(100);
        assert_eq!(m.encode_text(&long).unwrap().token_count(), 32);
    }
}
