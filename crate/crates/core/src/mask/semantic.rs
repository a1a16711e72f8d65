//! Attention-derived subject maps and cross-image correspondence.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::otsu::otsu_binarize;
use crate::error::{Error, Result};

/// Row-sum tolerance before a self-attention map is reported as non-stochastic.
pub const STOCHASTIC_TOLERANCE: f64 = 1e-4;

/// Default number of self-attention powers.
pub const DEFAULT_POWERS: usize = 4;

/// Non-negative per-token relevance of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticMap {
    pub values: Vec<f64>,
    pub subject_name: String,
    /// Some input self-attention row did not sum to one.
    pub non_stochastic: bool,
}

/// Binary `[target tokens x reference tokens]` matrix linking subject regions.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMatrix {
    pub values: Array2<bool>,
    pub target_subject: String,
    pub reference_subject: String,
}

/// One layer's inputs: a `P x P` self-attention map and the `P`-long
/// cross-attention column of the subject.
#[derive(Debug, Clone, Copy)]
pub struct AttentionPair<'a> {
    pub self_attn: ArrayView2<'a, f64>,
    pub cross_col: ArrayView1<'a, f64>,
}

/// Mean over layers of `sum_{r=1..powers} A_sa^r * a_ca`.
///
/// Powers are applied to the column by repeated matrix-vector products.
pub fn semantic_map(
    subject_name: &str,
    layers: &[AttentionPair<'_>],
    powers: usize,
) -> Result<SemanticMap> {
    if powers == 0 {
        return Err(Error::Input("semantic map needs at least one power".into()));
    }
    let Some(first) = layers.first() else {
        return Err(Error::Input("semantic map needs at least one layer".into()));
    };
    let p = first.cross_col.len();
    let mut acc = Array1::<f64>::zeros(p);
    let mut non_stochastic = false;
    for (l, pair) in layers.iter().enumerate() {
        if pair.self_attn.dim() != (p, p) || pair.cross_col.len() != p {
            return Err(Error::shape(format!(
                "layer {l}: self-attention {:?} with cross column of {}",
                pair.self_attn.dim(),
                pair.cross_col.len()
            )));
        }
        if pair
            .self_attn
            .outer_iter()
            .any(|row| (row.sum() - 1.0).abs() > STOCHASTIC_TOLERANCE)
        {
            non_stochastic = true;
        }
        let mut term = pair.cross_col.to_owned();
        for _ in 0..powers {
            term = pair.self_attn.dot(&term);
            acc += &term;
        }
    }
    if non_stochastic {
        log::warn!("self-attention rows for `{subject_name}` deviate from sum 1");
    }
    acc.mapv_inplace(|v| (v / layers.len() as f64).max(0.0));
    Ok(SemanticMap {
        values: acc.to_vec(),
        subject_name: subject_name.to_string(),
        non_stochastic,
    })
}

/// Outer product of the Otsu-binarised target and reference maps.
pub fn correspondence_matrix(
    target: &SemanticMap,
    reference: &SemanticMap,
) -> Result<CorrespondenceMatrix> {
    if target.values.is_empty() || reference.values.is_empty() {
        return Err(Error::shape("correspondence of an empty semantic map"));
    }
    let bt = binarize_map(&target.values);
    let br = binarize_map(&reference.values);
    Ok(CorrespondenceMatrix {
        values: outer(&bt, &br),
        target_subject: target.subject_name.clone(),
        reference_subject: reference.subject_name.clone(),
    })
}

/// Otsu split of a map; a map without any mass has no foreground.
fn binarize_map(values: &[f64]) -> Vec<bool> {
    if values.iter().all(|&v| v == 0.0) {
        return vec![false; values.len()];
    }
    otsu_binarize(values).binary
}

/// Binary outer product `a^T x b`.
pub fn outer(a: &[bool], b: &[bool]) -> Array2<bool> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] && b[j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array2};

    #[test]
    fn identity_powers_scale_the_column() {
        let eye = Array2::<f64>::eye(4);
        let c = arr1(&[0.1, 0.2, 0.3, 0.4]);
        let m = semantic_map(
            "a",
            &[AttentionPair {
                self_attn: eye.view(),
                cross_col: c.view(),
            }],
            4,
        )
        .unwrap();
        for (got, want) in m.values.iter().zip(c.iter()) {
            assert!((got - 4.0 * want).abs() < 1e-15);
        }
        assert!(!m.non_stochastic);
    }

    #[test]
    fn single_power_is_one_product() {
        let a = ndarray::arr2(&[[0.5, 0.5], [0.25, 0.75]]);
        let c = arr1(&[1.0, 2.0]);
        let m = semantic_map(
            "a",
            &[AttentionPair {
                self_attn: a.view(),
                cross_col: c.view(),
            }],
            1,
        )
        .unwrap();
        assert_eq!(m.values, a.dot(&c).to_vec());
    }

    #[test]
    fn flags_non_stochastic_rows() {
        let a = ndarray::arr2(&[[0.9, 0.5], [0.25, 0.75]]);
        let c = arr1(&[1.0, 2.0]);
        let pair = AttentionPair {
            self_attn: a.view(),
            cross_col: c.view(),
        };
        assert!(semantic_map("a", &[pair], 2).unwrap().non_stochastic);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = Array2::<f64>::eye(3);
        let c = arr1(&[1.0, 2.0]);
        let pair = AttentionPair {
            self_attn: a.view(),
            cross_col: c.view(),
        };
        assert!(matches!(
            semantic_map("a", &[pair], 2),
            Err(Error::ShapeMismatch(_))
        ));
    }

    fn map(values: Vec<f64>) -> SemanticMap {
        SemanticMap {
            values,
            subject_name: "s".into(),
            non_stochastic: false,
        }
    }

    #[test]
    fn correspondence_is_outer_product() {
        let m = correspondence_matrix(&map(vec![0.9, 0.1]), &map(vec![0.1, 0.9])).unwrap();
        assert_eq!(m.values, ndarray::arr2(&[[false, true], [false, false]]));
    }

    #[test]
    fn zero_side_gives_zero_matrix() {
        let m = correspondence_matrix(&map(vec![0.0, 0.0, 0.0]), &map(vec![0.1, 0.9])).unwrap();
        assert_eq!(m.values.dim(), (3, 2));
        assert!(m.values.iter().all(|v| !v));
        let m = correspondence_matrix(&map(vec![0.3, 0.7]), &map(vec![0.0; 4])).unwrap();
        assert!(m.values.iter().all(|v| !v));
    }
}
