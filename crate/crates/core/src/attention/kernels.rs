use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::FusionMaps;

/// Q/K/V for one attention evaluation. `scale` is normally `1/sqrt(d_k)`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionInputs<'a> {
    pub q: ArrayView2<'a, f64>,
    pub k: ArrayView2<'a, f64>,
    pub v: ArrayView2<'a, f64>,
    pub scale: f64,
}

impl<'a> AttentionInputs<'a> {
    pub fn new(
        q: ArrayView2<'a, f64>,
        k: ArrayView2<'a, f64>,
        v: ArrayView2<'a, f64>,
    ) -> Self {
        let scale = 1.0 / (q.ncols().max(1) as f64).sqrt();
        Self { q, k, v, scale }
    }

    fn check(&self) -> Result<()> {
        if self.q.ncols() != self.k.ncols() {
            return Err(Error::shape(format!(
                "query dim {} != key dim {}",
                self.q.ncols(),
                self.k.ncols()
            )));
        }
        if self.k.nrows() != self.v.nrows() {
            return Err(Error::shape(format!(
                "{} keys but {} values",
                self.k.nrows(),
                self.v.nrows()
            )));
        }
        Ok(())
    }
}

/// Weight and mixing constants of the mask-weighted cross-attention fusion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionWeights {
    pub lambda: f64,
    pub epsilon: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            lambda: 0.9,
            epsilon: 1e-8,
        }
    }
}

/// Reference K/V for mutual self-attention together with its
/// `[target tokens x reference tokens]` mask.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceKv<'a> {
    pub k: ArrayView2<'a, f64>,
    pub v: ArrayView2<'a, f64>,
    pub mask: ArrayView2<'a, bool>,
}

/// Token dropout applied to the reference part of the mutual self-attention mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
}

fn scaled_logits(q: ArrayView2<f64>, k: ArrayView2<f64>, scale: f64) -> Array2<f64> {
    let mut logits = q.dot(&k.t());
    logits.mapv_inplace(|x| x * scale);
    logits
}

fn softmax_rows(logits: &Array2<f64>, mask: Option<ArrayView2<bool>>) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(logits.raw_dim());
    for (r, row) in logits.outer_iter().enumerate() {
        let keep = |c: usize| mask.as_ref().is_none_or(|m| m[[r, c]]);
        let max = row
            .iter()
            .enumerate()
            .filter(|(c, _)| keep(*c))
            .map(|(_, &x)| x)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            // fully masked row stays zero
            continue;
        }
        let mut total = 0.0;
        for (c, &x) in row.iter().enumerate() {
            if keep(c) {
                let e = (x - max).exp();
                out[[r, c]] = e;
                total += e;
            }
        }
        out.row_mut(r).mapv_inplace(|e| e / total);
    }
    out
}

/// Row-wise softmax where masked logits behave as `-inf`.
///
/// Masked entries come out exactly zero and a row with every entry masked is
/// all zeros rather than NaN.
pub fn masked_softmax(logits: ArrayView2<f64>, mask: ArrayView2<bool>) -> Result<Array2<f64>> {
    if logits.dim() != mask.dim() {
        return Err(Error::shape(format!(
            "logits {:?} vs mask {:?}",
            logits.dim(),
            mask.dim()
        )));
    }
    Ok(softmax_rows(&logits.to_owned(), Some(mask)))
}

pub fn softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    softmax_rows(&logits.to_owned(), None)
}

/// `softmax(Q K^T * scale)` as a matrix.
pub fn attention_weights(q: ArrayView2<f64>, k: ArrayView2<f64>, scale: f64) -> Result<Array2<f64>> {
    if q.ncols() != k.ncols() {
        return Err(Error::shape(format!("query dim {} != key dim {}", q.ncols(), k.ncols())));
    }
    Ok(softmax_rows(&scaled_logits(q, k, scale), None))
}

/// Standard attention `softmax(Q K^T * scale) V`.
pub fn vanilla_attention(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    scale: f64,
) -> Result<Array2<f64>> {
    let inputs = AttentionInputs { q, k, v, scale };
    inputs.check()?;
    let weights = softmax_rows(&scaled_logits(q, k, scale), None);
    Ok(weights.dot(&v))
}

/// Zeroes each `true` entry in the first `reference_cols` columns with
/// probability `rate`. Columns at and after `reference_cols` (the target's
/// own block) are never touched.
pub fn token_dropout(
    mask: ArrayView2<bool>,
    reference_cols: usize,
    rate: f64,
    seed: u64,
) -> Result<Array2<bool>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Input(format!("dropout rate {rate} outside [0, 1)")));
    }
    if reference_cols > mask.ncols() {
        return Err(Error::shape(format!(
            "{reference_cols} reference columns in a mask with {} columns",
            mask.ncols()
        )));
    }
    let mut out = mask.to_owned();
    if rate == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for mut row in out.outer_iter_mut() {
        for entry in row.iter_mut().take(reference_cols) {
            if *entry && rng.random::<f64>() < rate {
                *entry = false;
            }
        }
    }
    Ok(out)
}

/// Masked mutual self-attention for the target stream.
///
/// Keys and values are the concatenation of every reference followed by the
/// target itself; the mask is the concatenation of the per-reference masks
/// followed by an all-ones block for the target.
pub fn mmsa(
    q_tgt: ArrayView2<f64>,
    k_tgt: ArrayView2<f64>,
    v_tgt: ArrayView2<f64>,
    refs: &[ReferenceKv<'_>],
    dropout: Option<Dropout>,
    scale: f64,
) -> Result<Array2<f64>> {
    AttentionInputs {
        q: q_tgt,
        k: k_tgt,
        v: v_tgt,
        scale,
    }
    .check()?;
    let p_tgt = q_tgt.nrows();
    for (i, r) in refs.iter().enumerate() {
        if r.k.ncols() != k_tgt.ncols() || r.v.ncols() != v_tgt.ncols() || r.k.nrows() != r.v.nrows()
        {
            return Err(Error::shape(format!("reference {i} K/V shape disagrees with target")));
        }
        if r.mask.dim() != (p_tgt, r.k.nrows()) {
            return Err(Error::shape(format!(
                "reference {i} mask is {:?}, expected ({p_tgt}, {})",
                r.mask.dim(),
                r.k.nrows()
            )));
        }
    }

    let mut ks: Vec<ArrayView2<f64>> = refs.iter().map(|r| r.k).collect();
    let mut vs: Vec<ArrayView2<f64>> = refs.iter().map(|r| r.v).collect();
    let mut ms: Vec<ArrayView2<bool>> = refs.iter().map(|r| r.mask).collect();
    let ones = Array2::from_elem((p_tgt, k_tgt.nrows()), true);
    ks.push(k_tgt);
    vs.push(v_tgt);
    ms.push(ones.view());

    let k_plus = concatenate(Axis(0), &ks).map_err(|e| Error::shape(e.to_string()))?;
    let v_plus = concatenate(Axis(0), &vs).map_err(|e| Error::shape(e.to_string()))?;
    let mut m_plus = concatenate(Axis(1), &ms).map_err(|e| Error::shape(e.to_string()))?;

    let reference_cols = k_plus.nrows() - k_tgt.nrows();
    if let Some(d) = dropout {
        m_plus = token_dropout(m_plus.view(), reference_cols, d.rate, d.seed)?;
    }

    let logits = scaled_logits(q_tgt, k_plus.view(), scale);
    let weights = masked_softmax(logits.view(), m_plus.view())?;
    Ok(weights.dot(&v_plus))
}

/// Cross-attention of the target against one subject's reference text, with
/// target rows outside the subject mask fully masked.
pub fn mmca_single(
    q_tgt: ArrayView2<f64>,
    text_k: ArrayView2<f64>,
    text_v: ArrayView2<f64>,
    target_mask: &[bool],
    scale: f64,
) -> Result<Array2<f64>> {
    AttentionInputs {
        q: q_tgt,
        k: text_k,
        v: text_v,
        scale,
    }
    .check()?;
    if target_mask.len() != q_tgt.nrows() {
        return Err(Error::shape(format!(
            "subject mask has {} entries for {} target tokens",
            target_mask.len(),
            q_tgt.nrows()
        )));
    }
    let mask = Array2::from_shape_fn((q_tgt.nrows(), text_k.nrows()), |(r, _)| target_mask[r]);
    let logits = scaled_logits(q_tgt, text_k, scale);
    let weights = masked_softmax(logits.view(), mask.view())?;
    Ok(weights.dot(&text_v))
}

/// Mask-weighted fusion of the per-subject cross-attention outputs with the
/// vanilla output:
/// `lambda * m_u / (m_s + eps) * sum_i O_i + O_vanilla * (1 - m_u) * (1 - lambda)`.
pub fn mmca_fuse(
    outputs: &[Array2<f64>],
    vanilla: ArrayView2<f64>,
    maps: &FusionMaps,
    weights: &FusionWeights,
) -> Result<Array2<f64>> {
    let tokens = vanilla.nrows();
    if maps.union.len() != tokens || maps.sum.len() != tokens {
        return Err(Error::shape(format!(
            "fusion maps cover {}/{} tokens, output has {tokens}",
            maps.union.len(),
            maps.sum.len()
        )));
    }
    if let Some(o) = outputs.iter().find(|o| o.dim() != vanilla.dim()) {
        return Err(Error::shape(format!(
            "subject output {:?} vs vanilla {:?}",
            o.dim(),
            vanilla.dim()
        )));
    }
    let lambda = weights.lambda;
    let mut fused = Array2::<f64>::zeros(vanilla.raw_dim());
    for t in 0..tokens {
        let m_u = maps.union[t];
        let m_s = maps.sum[t];
        let subject_weight = lambda * m_u / (m_s + weights.epsilon);
        let vanilla_weight = (1.0 - m_u) * (1.0 - lambda);
        let mut row = fused.row_mut(t);
        for o in outputs {
            row.scaled_add(subject_weight, &o.row(t));
        }
        row.scaled_add(vanilla_weight, &vanilla.row(t));
    }
    Ok(fused)
}
