//! Stage-1 training objectives and the stage-2 cross-entropy.
//!
//! The orthogonal-projection regularizers aim adapted features at mutual
//! orthogonality: VOP over patch pairs (saliency-weighted), TOP over concept
//! pairs. Both are means over ordered pairs `i != j`; at desk scale the pair
//! sum is evaluated in closed form (`‖Σ w·x̂‖² − Σ w²`), above 128 rows it is
//! estimated from 4096 uniformly sampled pairs.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Pair count past which the orthogonality losses switch to subsampling.
const PAIR_ENUMERATION_LIMIT: usize = 128;
const SUBSAMPLED_PAIRS: usize = 4096;

/// Clamp applied to activation scores before the concept BCE.
pub const BCE_CLAMP: f64 = 1e-7;

/// Weighted components of the stage-1 objective.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub vop: f64,
    pub top: f64,
    pub concept: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

/// Weighted sum of the stage-1 components; the breakdown is kept for logging.
pub fn stage1_total(
    vop: f64,
    top: f64,
    concept: f64,
    lambda1: f64,
    lambda2: f64,
    lambda3: f64,
) -> LossBreakdown {
    LossBreakdown {
        vop,
        top,
        concept,
        total: lambda1 * vop + lambda2 * top + lambda3 * concept,
        lambda1,
        lambda2,
        lambda3,
    }
}

fn normalized_rows(x: &Array2<f64>, side: &'static str) -> Result<(Array2<f64>, Array1<f64>)> {
    let mut unit = x.clone();
    let mut norms = Array1::zeros(x.nrows());
    for (i, mut row) in unit.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroNorm { side, index: i });
        }
        norms[i] = norm;
        row /= norm;
    }
    Ok((unit, norms))
}

/// Mean of `w_i·w_j·cos(x_i, x_j)` over ordered pairs `i != j`, with its
/// gradient with respect to `x`.
///
/// `rng` is consumed only when the pair sum is subsampled (rows > 128).
fn weighted_pair_cosine(
    x: &Array2<f64>,
    weights: &Array1<f64>,
    side: &'static str,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Array2<f64>)> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::Shape(format!("{side} pair loss needs at least 2 rows")));
    }
    if weights.len() != n {
        return Err(Error::Shape(format!(
            "{} weights for {} rows",
            weights.len(),
            n
        )));
    }
    let (unit, norms) = normalized_rows(x, side)?;

    if n <= PAIR_ENUMERATION_LIMIT {
        // Closed form of the full ordered-pair sum:
        //   Σ_{i≠j} w_i w_j x̂_i·x̂_j = ‖Σ_i w_i x̂_i‖² − Σ_i w_i².
        let pairs = (n * (n - 1)) as f64;
        let mut mix = Array1::<f64>::zeros(x.ncols());
        for i in 0..n {
            mix.scaled_add(weights[i], &unit.row(i));
        }
        let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
        let value = (mix.dot(&mix) - sum_sq) / pairs;

        let mut grad = Array2::zeros(x.dim());
        for i in 0..n {
            // d/dx_i of ‖mix‖² through x̂_i, projected off the radial direction.
            let u = unit.row(i);
            let coeff = 2.0 * weights[i] / pairs;
            let radial = u.dot(&mix);
            let mut row = grad.row_mut(i);
            for c in 0..x.ncols() {
                row[c] = coeff * (mix[c] - radial * u[c]) / norms[i];
            }
        }
        Ok((value, grad))
    } else {
        let rng = rng.ok_or_else(|| {
            Error::Config(format!(
                "{side} pair loss needs an RNG to subsample above {PAIR_ENUMERATION_LIMIT} rows"
            ))
        })?;
        let mut value = 0.0;
        let mut grad = Array2::<f64>::zeros(x.dim());
        let scale = 1.0 / SUBSAMPLED_PAIRS as f64;
        for _ in 0..SUBSAMPLED_PAIRS {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            let (ui, uj) = (unit.row(i), unit.row(j));
            let cos = ui.dot(&uj);
            let w = weights[i] * weights[j];
            value += w * cos * scale;
            for c in 0..x.ncols() {
                grad[[i, c]] += w * scale * (uj[c] - cos * ui[c]) / norms[i];
                grad[[j, c]] += w * scale * (ui[c] - cos * uj[c]) / norms[j];
            }
        }
        Ok((value, grad))
    }
}

/// Visual orthogonal projection: saliency-weighted pairwise cosine of the
/// adapted patches. Weights are the min-max-normalized saliency.
pub fn vop_loss(
    adapted_patches: &Array2<f64>,
    saliency_norm: &Array1<f64>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Array2<f64>)> {
    weighted_pair_cosine(adapted_patches, saliency_norm, "patch", rng)
}

/// Textual orthogonal projection: unweighted pairwise cosine of the adapted
/// concepts.
pub fn top_loss(
    adapted_concepts: &Array2<f64>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Array2<f64>)> {
    let ones = Array1::ones(adapted_concepts.nrows());
    weighted_pair_cosine(adapted_concepts, &ones, "concept", rng)
}

/// Binary cross-entropy over concepts with its gradient in the activation.
///
/// Scores are clamped to `[1e-7, 1 − 1e-7]`; the number of clamped entries is
/// returned as a diagnostic.
pub fn concept_bce(a_hat: &Array1<f64>, a: &Array1<f64>) -> Result<(f64, Array1<f64>, usize)> {
    let m = a_hat.len();
    if a.len() != m || m == 0 {
        return Err(Error::Shape(format!(
            "activation length {} vs label length {}",
            m,
            a.len()
        )));
    }
    let mut value = 0.0;
    let mut grad = Array1::zeros(m);
    let mut clamped = 0usize;
    for j in 0..m {
        let mut p = a_hat[j];
        if p < BCE_CLAMP || p > 1.0 - BCE_CLAMP {
            p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            clamped += 1;
        }
        let target = a[j];
        value -= (target * p.ln() + (1.0 - target) * (1.0 - p).ln()) / m as f64;
        grad[j] = (p - target) / (p * (1.0 - p)) / m as f64;
    }
    Ok((value, grad, clamped))
}

/// `−log softmax(logits)[y]` with its gradient `softmax(logits) − onehot(y)`.
pub fn cross_entropy(logits: &Array1<f64>, y: usize) -> Result<(f64, Array1<f64>)> {
    let k = logits.len();
    if y >= k {
        return Err(Error::Shape(format!("class {y} out of range for {k} logits")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    let value = log_z - logits[y];
    let mut grad = logits.mapv(|l| (l - log_z).exp());
    grad[y] -= 1.0;
    Ok((value, grad))
}
