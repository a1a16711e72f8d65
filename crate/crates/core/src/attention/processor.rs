//! Attention processor that applies masked mutual self-attention and masked
//! mutual cross-attention to the target stream of a joint batch.
//!
//! Reference streams always get plain attention, so they follow exactly the
//! trajectory of their anchor portrait. Per-render state (refinement caches,
//! activation records) lives in the processor and must not be shared across
//! renders.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use ndarray::{concatenate, s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::kernels::{
    attention_weights, mmca_fuse, mmca_single, mmsa, Dropout, FusionWeights, ReferenceKv,
};
use crate::backends::{AttentionCall, AttentionProcessor, GuidancePass, StreamRole};
use crate::error::{Error, Result};
use crate::mask::{
    correspondence_matrix, fusion_maps, outer, semantic_map, should_refine, AttentionPair,
    FusionMaps, MaskRefine, UnionMode, DEFAULT_DRIFT_THRESHOLD, DEFAULT_POWERS,
};
use crate::types::{derive_seed, BlockKind, LayerId, LayerInfo};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelect {
    Decoder,
    All,
}

impl LayerSelect {
    pub fn matches(&self, layer: &LayerId) -> bool {
        match self {
            LayerSelect::Decoder => layer.block_kind == BlockKind::Decoder,
            LayerSelect::All => true,
        }
    }
}

impl std::str::FromStr for LayerSelect {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "decoder" => Ok(LayerSelect::Decoder),
            "all" => Ok(LayerSelect::All),
            other => Err(format!("unknown layer selection `{other}` (decoder|all)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsdConfig {
    pub mmsa: bool,
    pub mmsa_layers: LayerSelect,
    pub dropout: f64,
    pub mmca: bool,
    pub mmca_layers: LayerSelect,
    pub lambda: f64,
    pub union_mode: UnionMode,
    pub mask_refine: MaskRefine,
    pub drift_threshold: f64,
    pub powers: usize,
    /// Parent seed of the per-step, per-layer dropout seeds.
    pub seed: u64,
}

impl Default for MsdConfig {
    fn default() -> Self {
        Self {
            mmsa: true,
            mmsa_layers: LayerSelect::Decoder,
            dropout: 0.5,
            mmca: true,
            mmca_layers: LayerSelect::All,
            lambda: 0.9,
            union_mode: UnionMode::Union,
            mask_refine: MaskRefine::Off,
            drift_threshold: DEFAULT_DRIFT_THRESHOLD,
            powers: DEFAULT_POWERS,
            seed: 0,
        }
    }
}

impl MsdConfig {
    pub fn mmsa_active(&self, layer: &LayerId) -> bool {
        self.mmsa && layer.is_self() && self.mmsa_layers.matches(layer)
    }

    pub fn mmca_active(&self, layer: &LayerId) -> bool {
        self.mmca && !layer.is_self() && self.mmca_layers.matches(layer)
    }

    pub fn dropout_seed(&self, timestep: usize, layer: &LayerId) -> u64 {
        derive_seed(self.seed, &format!("dropout/{timestep}/{layer}"))
    }
}

/// Token masks of one subject, for the target image and for its own portrait.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectMasks {
    pub name: String,
    pub target: BTreeMap<LayerId, Vec<bool>>,
    pub reference: BTreeMap<LayerId, Vec<bool>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerActivation {
    pub mmsa: bool,
    pub mmca: bool,
}

/// What the processor did during one render.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MsdReport {
    pub layers: BTreeMap<LayerId, LayerActivation>,
    /// Steps after which attention-derived correspondences were rebuilt.
    pub refined_steps: Vec<usize>,
}

type ColumnPair = (Array1<f64>, Array1<f64>);

#[derive(Default)]
struct StepCache {
    /// Decoder self layer -> target map and one map per reference.
    self_maps: BTreeMap<LayerId, (Array2<f64>, Vec<Array2<f64>>)>,
    /// Decoder cross layer -> per subject (target column, reference column).
    cross_cols: BTreeMap<LayerId, Vec<ColumnPair>>,
}

pub struct MsdProcessor {
    config: MsdConfig,
    weights: FusionWeights,
    subjects: Vec<SubjectMasks>,
    fusion: BTreeMap<LayerId, FusionMaps>,
    /// (subject, token count) -> correspondence from the previous step.
    refined: BTreeMap<(usize, usize), Array2<bool>>,
    cache: StepCache,
    report: Arc<Mutex<MsdReport>>,
}

impl MsdProcessor {
    pub fn new(config: MsdConfig, catalog: &[LayerInfo], subjects: Vec<SubjectMasks>) -> Result<Self> {
        if !(0.0..=1.0).contains(&config.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", config.lambda)));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", config.dropout)));
        }
        if config.powers == 0 {
            return Err(Error::Config("semantic map powers must be at least 1".into()));
        }
        let mut fusion = BTreeMap::new();
        for layer in catalog {
            let n = layer.n_tokens();
            let mut target = Vec::new();
            for s in &subjects {
                for (side, masks) in [("target", &s.target), ("reference", &s.reference)] {
                    let m = masks.get(&layer.id).ok_or_else(|| {
                        Error::shape(format!("no {side} mask for `{}` at {}", s.name, layer.id))
                    })?;
                    if m.len() != n {
                        return Err(Error::shape(format!(
                            "{side} mask for `{}` at {} has {} tokens, layer has {n}",
                            s.name,
                            layer.id,
                            m.len()
                        )));
                    }
                }
                target.push(s.target[&layer.id].as_slice());
            }
            fusion.insert(layer.id, fusion_maps(&target, n, config.union_mode)?);
        }
        Ok(Self {
            weights: FusionWeights {
                lambda: config.lambda,
                ..FusionWeights::default()
            },
            config,
            subjects,
            fusion,
            refined: BTreeMap::new(),
            cache: StepCache::default(),
            report: Arc::new(Mutex::new(MsdReport::default())),
        })
    }

    /// Shared handle to the activation report; stays valid after the
    /// processor is moved into a registry.
    pub fn report_handle(&self) -> Arc<Mutex<MsdReport>> {
        Arc::clone(&self.report)
    }

    /// Layers this processor should be installed on.
    pub fn layers(&self) -> Vec<LayerId> {
        self.fusion
            .keys()
            .filter(|l| self.config.mmsa_active(l) || self.config.mmca_active(l))
            .copied()
            .collect()
    }

    fn record(&self, layer: LayerId, mmsa: bool, mmca: bool) {
        let mut report = self.report.lock().expect("report lock");
        let entry = report.layers.entry(layer).or_default();
        entry.mmsa |= mmsa;
        entry.mmca |= mmca;
    }

    fn check_roles(&self, call: &AttentionCall<'_>) -> Result<usize> {
        let target = call.target_index()?;
        if target != self.subjects.len() {
            return Err(Error::shape(format!(
                "{} reference streams for {} subjects",
                target,
                self.subjects.len()
            )));
        }
        for (i, role) in call.roles[..target].iter().enumerate() {
            if *role != StreamRole::Reference(i) {
                return Err(Error::shape(format!("stream {i} has role {role:?}")));
            }
        }
        Ok(target)
    }

    fn mmsa_masks(&self, layer: &LayerId, tokens: usize) -> Vec<Array2<bool>> {
        self.subjects
            .iter()
            .enumerate()
            .map(|(i, s)| match self.refined.get(&(i, tokens)) {
                Some(m) => m.clone(),
                None => outer(&s.target[layer], &s.reference[layer]),
            })
            .collect()
    }

    fn self_attention(&mut self, call: &AttentionCall<'_>, target: usize) -> Result<Array2<f64>> {
        let layer = call.layer.id;
        let t = &call.streams[target];
        let tokens = t.q.nrows();
        let masks = self.mmsa_masks(&layer, tokens);
        let refs: Vec<ReferenceKv<'_>> = call.streams[..target]
            .iter()
            .zip(&masks)
            .map(|(r, m)| ReferenceKv {
                k: r.k.view(),
                v: r.v.view(),
                mask: m.view(),
            })
            .collect();
        let dropout = (self.config.dropout > 0.0).then(|| Dropout {
            rate: self.config.dropout,
            seed: self.config.dropout_seed(call.timestep, &layer),
        });
        mmsa(t.q.view(), t.k.view(), t.v.view(), &refs, dropout, call.scale)
    }

    fn cross_attention(&self, call: &AttentionCall<'_>, target: usize) -> Result<Array2<f64>> {
        let layer = call.layer.id;
        let t = &call.streams[target];
        let vanilla = call.vanilla(target)?;
        let outputs = self
            .subjects
            .iter()
            .zip(&call.streams[..target])
            .map(|(s, r)| mmca_single(t.q.view(), r.k.view(), r.v.view(), &s.target[&layer], call.scale))
            .collect::<Result<Vec<_>>>()?;
        mmca_fuse(&outputs, vanilla.view(), &self.fusion[&layer], &self.weights)
    }

    fn refining(&self) -> bool {
        self.config.mask_refine != MaskRefine::Off && !self.subjects.is_empty()
    }

    fn cache_maps(&mut self, call: &AttentionCall<'_>, target: usize) -> Result<()> {
        let layer = call.layer.id;
        if call.pass != GuidancePass::Conditional || layer.block_kind != BlockKind::Decoder {
            return Ok(());
        }
        let own = |i: usize| {
            let s = &call.streams[i];
            attention_weights(s.q.view(), s.k.view(), call.scale)
        };
        if layer.is_self() {
            let refs = (0..target).map(own).collect::<Result<Vec<_>>>()?;
            self.cache.self_maps.insert(layer, (own(target)?, refs));
        } else {
            let t = &call.streams[target];
            let mut cols = Vec::new();
            for i in 0..target {
                let r = &call.streams[i];
                // target: share of attention landing on subject i's text when
                // it competes with the scene text
                let keys = concatenate(Axis(0), &[t.k.view(), r.k.view()])
                    .map_err(|e| Error::shape(e.to_string()))?;
                let w = attention_weights(t.q.view(), keys.view(), call.scale)?;
                let tgt_col = w.slice(s![.., t.k.nrows()..]).sum_axis(Axis(1));
                // reference: attention on its own content tokens
                let w = attention_weights(r.q.view(), r.k.view(), call.scale)?;
                let ref_col = if r.k.nrows() > 1 {
                    w.slice(s![.., 1..]).sum_axis(Axis(1))
                } else {
                    w.sum_axis(Axis(1))
                };
                cols.push((tgt_col, ref_col));
            }
            self.cache.cross_cols.insert(layer, cols);
        }
        Ok(())
    }

    fn refine(&mut self, timestep: usize) -> Result<()> {
        let cache = std::mem::take(&mut self.cache);
        // pair each cached self layer with its cross sibling, grouped by size
        let mut groups: BTreeMap<usize, Vec<LayerId>> = BTreeMap::new();
        for layer in cache.self_maps.keys() {
            if cache.cross_cols.contains_key(&layer.sibling()) {
                groups.entry(cache.self_maps[layer].0.nrows()).or_default().push(*layer);
            }
        }
        if groups.is_empty() {
            return Ok(());
        }
        if self.config.mask_refine == MaskRefine::Auto {
            let mut drift = Vec::new();
            for (cross, cols) in &cache.cross_cols {
                for (i, (tgt_col, _)) in cols.iter().enumerate() {
                    let mask = &self.subjects[i].target[cross];
                    drift.push((mask.as_slice(), tgt_col.to_vec()));
                }
            }
            let pairs: Vec<(&[bool], &[f64])> =
                drift.iter().map(|(m, c)| (*m, c.as_slice())).collect();
            if !should_refine(&pairs, self.config.drift_threshold)? {
                return Ok(());
            }
        }
        for (tokens, layers) in groups {
            for (i, subject) in self.subjects.iter().enumerate() {
                let mut tgt_pairs = Vec::new();
                let mut ref_pairs = Vec::new();
                for layer in &layers {
                    let (tgt_map, ref_maps) = &cache.self_maps[layer];
                    let (tgt_col, ref_col) = &cache.cross_cols[&layer.sibling()][i];
                    tgt_pairs.push(AttentionPair {
                        self_attn: tgt_map.view(),
                        cross_col: tgt_col.view(),
                    });
                    ref_pairs.push(AttentionPair {
                        self_attn: ref_maps[i].view(),
                        cross_col: ref_col.view(),
                    });
                }
                let m_tgt = semantic_map(&subject.name, &tgt_pairs, self.config.powers)?;
                let m_ref = semantic_map(&subject.name, &ref_pairs, self.config.powers)?;
                let corr = correspondence_matrix(&m_tgt, &m_ref)?;
                self.refined.insert((i, tokens), corr.values);
            }
        }
        self.report
            .lock()
            .expect("report lock")
            .refined_steps
            .push(timestep);
        Ok(())
    }
}

impl AttentionProcessor for MsdProcessor {
    fn process(&mut self, call: &AttentionCall<'_>) -> Result<Vec<Array2<f64>>> {
        let target = self.check_roles(call)?;
        let layer = call.layer.id;
        if !self.fusion.contains_key(&layer) {
            return Err(Error::shape(format!("layer {layer} is not in the processor catalog")));
        }
        let mut outputs = (0..target)
            .map(|i| call.vanilla(i))
            .collect::<Result<Vec<_>>>()?;
        if self.refining() {
            self.cache_maps(call, target)?;
        }
        let out = if self.config.mmsa_active(&layer) {
            self.record(layer, true, false);
            self.self_attention(call, target)?
        } else if self.config.mmca_active(&layer) {
            self.record(layer, false, true);
            self.cross_attention(call, target)?
        } else {
            call.vanilla(target)?
        };
        outputs.push(out);
        Ok(outputs)
    }

    fn end_step(&mut self, timestep: usize) -> Result<()> {
        if self.refining() {
            self.refine(timestep)?;
        }
        Ok(())
    }
}
