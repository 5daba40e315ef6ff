//! Non-uniform transport marginals from data statistics.
//!
//! The patch prior `θ = softmax(g_I · p_i)` pushes transport mass toward
//! salient (foreground) patches. The concept prior `γ` penalizes concepts
//! that co-occur with many others: `γ ∝ 1 − softmax(r)`, where `r_i` sums the
//! conditional co-occurrence row of concept `i` over the class-level label
//! matrix.
//!
//! `1 − softmax(r)` sums to `M − 1`, not 1, so `γ` is renormalized onto the
//! simplex before it reaches the solver; the ordering (high co-occurrence →
//! low mass) is what the prior is about and is preserved exactly.

use ndarray::{Array1, Array2};

use crate::data::EmbeddingBundle;
use crate::error::{Error, Result};

/// Raw and min-max-normalized per-patch saliency of one image.
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    /// `s_i = g_I · p_i` on the raw (pre-adapter) features.
    pub raw: Array1<f64>,
    /// Min-max normalization of `raw` into [0, 1]; a constant map becomes 0.5.
    pub normalized: Array1<f64>,
}

/// Dot product of the global feature with every raw patch feature.
pub fn saliency(bundle: &EmbeddingBundle) -> SaliencyMap {
    let raw = bundle.patches.dot(&bundle.global);
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let normalized = if max - min > 0.0 {
        raw.mapv(|s| (s - min) / (max - min))
    } else {
        Array1::from_elem(raw.len(), 0.5)
    };
    SaliencyMap { raw, normalized }
}

fn softmax(x: &Array1<f64>) -> Array1<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e = x.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e /= sum;
    e
}

/// Patch marginal for the solver: softmax over the raw saliency scores.
pub fn patch_prior(saliency: &SaliencyMap) -> Array1<f64> {
    softmax(&saliency.raw)
}

/// Conditional co-occurrence statistics of the class-level label matrix.
#[derive(Debug, Clone)]
pub struct CoOccurrence {
    /// `C[i][j] = Σ_k L_ki·L_kj / Σ_k L_ki`; rows of never-activated concepts
    /// are all-zero.
    pub matrix: Array2<f64>,
    /// Row sums `r_i = Σ_j C[i][j]`.
    pub scores: Array1<f64>,
    /// Concepts that never appear in any class (their rows were zeroed).
    pub unsupported: Vec<usize>,
}

/// Conditional co-occurrence of each concept pair across class labels.
pub fn cooccurrence(labels: &Array2<f64>) -> CoOccurrence {
    let (k, m) = labels.dim();
    let mut matrix = Array2::zeros((m, m));
    let mut unsupported = Vec::new();
    for i in 0..m {
        let support: f64 = (0..k).map(|c| labels[[c, i]]).sum();
        if support == 0.0 {
            unsupported.push(i);
            continue;
        }
        for j in 0..m {
            let joint: f64 = (0..k).map(|c| labels[[c, i]] * labels[[c, j]]).sum();
            matrix[[i, j]] = joint / support;
        }
    }
    if !unsupported.is_empty() {
        log::warn!(
            "concepts {:?} never activated by any class; their co-occurrence rows are zero",
            unsupported
        );
    }
    let scores = matrix.sum_axis(ndarray::Axis(1));
    CoOccurrence {
        matrix,
        scores,
        unsupported,
    }
}

/// Concept marginal for the solver: `1 − softmax(r)`, renormalized to sum 1.
///
/// `M = 1` is degenerate (the raw prior is identically zero); it falls back
/// to the uniform single-point distribution with a warning.
pub fn concept_prior(co: &CoOccurrence) -> Result<Array1<f64>> {
    let m = co.scores.len();
    if m == 0 {
        return Err(Error::Shape("no concepts".into()));
    }
    if m == 1 {
        log::warn!("single-concept bank: concept prior degenerates to [1]");
        return Ok(Array1::ones(1));
    }
    let raw = 1.0 - &softmax(&co.scores);
    let sum = raw.sum(); // = m - 1 analytically
    Ok(raw / sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn bundle_from(patches: Array2<f64>, global: Array1<f64>) -> EmbeddingBundle {
        let n = patches.nrows();
        EmbeddingBundle::new(patches, global, (n, 1), 14).unwrap()
    }

    #[test]
    fn orthogonal_global_gives_constant_half() {
        let patches = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];
        let global = array![0.0, 0.0];
        let s = saliency(&bundle_from(patches, global));
        assert!(s.raw.iter().all(|&v| v == 0.0));
        assert!(s.normalized.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn self_patch_is_most_salient() {
        let patches = array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let global = array![1.0, 0.0, 0.0];
        let s = saliency(&bundle_from(patches, global));
        let argmax = s
            .raw
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 1);
        assert_eq!(s.normalized[1], 1.0);
    }

    #[test]
    fn normalization_preserves_ordering() {
        let patches = array![[2.0], [0.5], [1.0], [-1.0]];
        let global = array![1.0];
        let s = saliency(&bundle_from(patches, global));
        let mut raw_order: Vec<usize> = (0..4).collect();
        raw_order.sort_by(|&a, &b| s.raw[a].partial_cmp(&s.raw[b]).unwrap());
        let mut norm_order: Vec<usize> = (0..4).collect();
        norm_order.sort_by(|&a, &b| s.normalized[a].partial_cmp(&s.normalized[b]).unwrap());
        assert_eq!(raw_order, norm_order);
    }

    #[test]
    fn patch_prior_hand_values() {
        let s = SaliencyMap {
            raw: array![0.0, 0.0],
            normalized: array![0.5, 0.5],
        };
        let theta = patch_prior(&s);
        assert_relative_eq!(theta[0], 0.5, epsilon = 1e-15);

        let s = SaliencyMap {
            raw: array![1.0, 0.0],
            normalized: array![1.0, 0.0],
        };
        let theta = patch_prior(&s);
        let e = std::f64::consts::E;
        assert_relative_eq!(theta[0], e / (e + 1.0), epsilon = 1e-12);
        assert_relative_eq!(theta[1], 1.0 / (e + 1.0), epsilon = 1e-12);
        assert_relative_eq!(theta[0], 0.7311, max_relative = 1e-4);
    }

    #[test]
    fn patch_prior_shift_invariant() {
        let s = SaliencyMap {
            raw: array![0.3, -0.7, 1.2],
            normalized: array![0.0, 0.0, 0.0],
        };
        let shifted = SaliencyMap {
            raw: s.raw.mapv(|v| v + 13.5),
            normalized: s.normalized.clone(),
        };
        let a = patch_prior(&s);
        let b = patch_prior(&shifted);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn cooccurrence_hand_example() {
        let labels = array![[1.0, 1.0], [1.0, 0.0]];
        let co = cooccurrence(&labels);
        assert_eq!(co.matrix, array![[1.0, 0.5], [1.0, 1.0]]);
        assert_eq!(co.scores, array![1.5, 2.0]);
        assert!(co.unsupported.is_empty());
    }

    #[test]
    fn disjoint_one_hot_concepts_give_identity() {
        let labels = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let co = cooccurrence(&labels);
        assert_eq!(co.matrix, Array2::<f64>::eye(3));
        assert!(co.scores.iter().all(|&r| r == 1.0));
    }

    #[test]
    fn activated_concepts_score_at_least_one() {
        let labels = array![[1.0, 1.0, 0.0], [0.0, 1.0, 1.0], [1.0, 0.0, 1.0]];
        let co = cooccurrence(&labels);
        for (i, &r) in co.scores.iter().enumerate() {
            assert!(r >= 1.0, "concept {i}: r = {r}");
            assert_eq!(co.matrix[[i, i]], 1.0);
        }
    }

    #[test]
    fn zero_column_is_flagged_and_zeroed() {
        let labels = array![[1.0, 0.0], [1.0, 0.0]];
        let co = cooccurrence(&labels);
        assert_eq!(co.unsupported, vec![1]);
        assert!(co.matrix.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concept_prior_hand_example() {
        let labels = array![[1.0, 1.0], [1.0, 0.0]];
        let gamma = concept_prior(&cooccurrence(&labels)).unwrap();
        // softmax([1.5, 2.0]) ≈ [0.3775, 0.6225]; raw prior flips it and the
        // M = 2 case renormalizes by exactly 1.
        assert_relative_eq!(gamma[0], 0.6225, max_relative = 1e-3);
        assert_relative_eq!(gamma[1], 0.3775, max_relative = 1e-3);
        assert_relative_eq!(gamma.sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn equal_scores_give_uniform_prior() {
        let labels = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let gamma = concept_prior(&cooccurrence(&labels)).unwrap();
        for &g in gamma.iter() {
            assert_relative_eq!(g, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn prior_sums_to_one_and_reverses_order() {
        let labels = array![
            [1.0, 1.0, 1.0, 0.0],
            [1.0, 1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 1.0],
            [0.0, 1.0, 1.0, 0.0]
        ];
        let co = cooccurrence(&labels);
        let gamma = concept_prior(&co).unwrap();
        assert_relative_eq!(gamma.sum(), 1.0, epsilon = 1e-12);
        for i in 0..4 {
            for j in 0..4 {
                if co.scores[i] > co.scores[j] {
                    assert!(
                        gamma[i] < gamma[j],
                        "r[{i}]={} > r[{j}]={} but gamma {} >= {}",
                        co.scores[i],
                        co.scores[j],
                        gamma[i],
                        gamma[j]
                    );
                }
            }
        }
    }

    #[test]
    fn single_concept_prior_degenerates_to_unit() {
        let labels = array![[1.0], [1.0]];
        let gamma = concept_prior(&cooccurrence(&labels)).unwrap();
        assert_eq!(gamma, array![1.0]);
    }

    #[test]
    fn duplicating_every_class_row_changes_nothing() {
        let labels = array![[1.0, 1.0, 0.0], [0.0, 1.0, 1.0]];
        let doubled = ndarray::concatenate![ndarray::Axis(0), labels.clone(), labels.clone()];
        let a = cooccurrence(&labels);
        let b = cooccurrence(&doubled);
        assert_eq!(a.matrix, b.matrix);
        assert_eq!(a.scores, b.scores);
    }
}
