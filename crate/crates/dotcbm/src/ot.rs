//! Entropic optimal transport between patch features and concept features.
//!
//! The solver minimizes `Σ q_ij d_ij − ε·H(Q)` over nonnegative matrices with
//! row sums `θ` and column sums `γ` (entropy convention `H(Q) = −Σ q log q`).
//! Scaling updates run entirely in the log domain, so small `ε` and costs in
//! `[0, 2]` never under- or overflow. Zero marginal entries are honored by
//! forcing the corresponding row or column of the plan to zero.
//!
//! Downstream, the plan is read in both directions: per-concept activation
//! scores from the minimum transport-weighted cost, and per-concept inversion
//! masks from the plan's columns.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

/// Tolerance baked into marginal validation of `theta`/`gamma`.
const SIMPLEX_TOL: f64 = 1e-8;

/// Numerically stable sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logsumexp(values: impl Iterator<Item = f64>) -> f64 {
    let collected: Vec<f64> = values.collect();
    let max = collected.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = collected.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Cosine-distance cost matrix: `d_ij = 1 − cos(p_i, t_j)`.
///
/// Rows with zero norm are reported by index and side; they indicate a
/// collapsed adapter output, not a recoverable condition.
pub fn cost_matrix(patches: &Array2<f64>, concepts: &Array2<f64>) -> Result<Array2<f64>> {
    if patches.ncols() != concepts.ncols() {
        return Err(Error::Shape(format!(
            "patch dim {} != concept dim {}",
            patches.ncols(),
            concepts.ncols()
        )));
    }
    let normalize = |m: &Array2<f64>, side: &'static str| -> Result<Array2<f64>> {
        let mut out = m.clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::ZeroNorm { side, index: i });
            }
            row /= norm;
        }
        Ok(out)
    };
    let p_hat = normalize(patches, "patch")?;
    let t_hat = normalize(concepts, "concept")?;
    Ok(1.0 - p_hat.dot(&t_hat.t()))
}

/// Gradient of a scalar loss through [`cost_matrix`].
///
/// Given `dL/dD`, returns `(dL/dpatches, dL/dconcepts)`.
pub fn cost_matrix_backward(
    patches: &Array2<f64>,
    concepts: &Array2<f64>,
    d_cost: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (n, m) = d_cost.dim();
    if patches.nrows() != n || concepts.nrows() != m || patches.ncols() != concepts.ncols() {
        return Err(Error::Shape("cost gradient shape mismatch".into()));
    }
    let mut p_hat = patches.clone();
    let mut p_norm = Array1::zeros(n);
    for (i, mut row) in p_hat.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNorm { side: "patch", index: i });
        }
        p_norm[i] = norm;
        row /= norm;
    }
    let mut t_hat = concepts.clone();
    let mut t_norm = Array1::zeros(m);
    for (j, mut row) in t_hat.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNorm { side: "concept", index: j });
        }
        t_norm[j] = norm;
        row /= norm;
    }
    let cos = p_hat.dot(&t_hat.t());

    // d cos_ij / d p_i = (t̂_j − cos_ij · p̂_i) / ‖p_i‖ and d_ij = 1 − cos_ij.
    let weighted_cos_rows = (d_cost * &cos).sum_axis(Axis(1));
    let mut d_patches = d_cost.dot(&t_hat);
    for i in 0..n {
        let mut row = d_patches.row_mut(i);
        row.zip_mut_with(&p_hat.row(i), |g, &ph| {
            *g = (-*g + weighted_cos_rows[i] * ph) / p_norm[i];
        });
    }
    let weighted_cos_cols = (d_cost * &cos).sum_axis(Axis(0));
    let mut d_concepts = d_cost.t().dot(&p_hat);
    for j in 0..m {
        let mut row = d_concepts.row_mut(j);
        row.zip_mut_with(&t_hat.row(j), |g, &th| {
            *g = (-*g + weighted_cos_cols[j] * th) / t_norm[j];
        });
    }
    Ok((d_patches, d_concepts))
}

/// Converged (or iteration-capped) entropic transport plan.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub q: Array2<f64>,
    pub theta: Array1<f64>,
    pub gamma: Array1<f64>,
    pub epsilon: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `‖Q·1 − θ‖₁ + ‖Qᵀ·1 − γ‖₁` of the returned plan.
    pub marginal_err: f64,
}

impl TransportPlan {
    pub fn num_patches(&self) -> usize {
        self.q.nrows()
    }

    pub fn num_concepts(&self) -> usize {
        self.q.ncols()
    }
}

fn validate_marginal(name: &str, w: &Array1<f64>) -> Result<()> {
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::OtInput(format!("{name} has negative or non-finite entries")));
    }
    let sum = w.sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::OtInput(format!("{name} sums to {sum}, expected 1")));
    }
    Ok(())
}

/// Log-domain Sinkhorn scaling for `min Σ q·d − ε H(Q)` under marginals
/// `(theta, gamma)`.
///
/// Stops when the L1 marginal error drops to `tol` or after `max_iter`
/// iterations; the returned plan reports which happened.
pub fn sinkhorn(
    cost: &Array2<f64>,
    theta: &Array1<f64>,
    gamma: &Array1<f64>,
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> Result<TransportPlan> {
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return Err(Error::Shape("cost matrix must be nonempty".into()));
    }
    if theta.len() != n || gamma.len() != m {
        return Err(Error::Shape(format!(
            "marginals ({}, {}) do not match cost {:?}",
            theta.len(),
            gamma.len(),
            (n, m)
        )));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::OtInput("cost matrix contains NaN or infinity".into()));
    }
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::OtInput(format!("epsilon must be positive, got {epsilon}")));
    }
    validate_marginal("theta", theta)?;
    validate_marginal("gamma", gamma)?;

    let log_kernel = cost.mapv(|d| -d / epsilon);
    let log_theta: Vec<f64> = theta.iter().map(|&v| v.ln()).collect(); // ln 0 = -inf
    let log_gamma: Vec<f64> = gamma.iter().map(|&v| v.ln()).collect();

    let mut f = vec![0.0f64; n];
    let mut g = vec![0.0f64; m];
    let row_lse = |g: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| logsumexp((0..m).map(|j| g[j] + log_kernel[[i, j]])))
            .collect()
    };

    let mut lse = row_lse(&g);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        for i in 0..n {
            f[i] = log_theta[i] - lse[i];
        }
        for j in 0..m {
            let col = logsumexp((0..n).map(|i| f[i] + log_kernel[[i, j]]));
            g[j] = log_gamma[j] - col;
        }
        // Column sums are exact after the g-update; the residual lives in rows.
        lse = row_lse(&g);
        let row_err: f64 = (0..n).map(|i| ((f[i] + lse[i]).exp() - theta[i]).abs()).sum();
        if row_err <= tol {
            converged = true;
            break;
        }
    }

    let q = Array2::from_shape_fn((n, m), |(i, j)| (f[i] + g[j] + log_kernel[[i, j]]).exp());
    let row_err: f64 = (q.sum_axis(Axis(1)) - theta).iter().map(|v| v.abs()).sum();
    let col_err: f64 = (q.sum_axis(Axis(0)) - gamma).iter().map(|v| v.abs()).sum();
    let marginal_err = row_err + col_err;

    Ok(TransportPlan {
        q,
        theta: theta.clone(),
        gamma: gamma.clone(),
        epsilon,
        iterations,
        converged: converged && marginal_err <= tol,
        marginal_err,
    })
}

/// Transport cost `⟨Q, D⟩ = Σ q_ij d_ij` of a plan against a cost matrix.
pub fn ot_distance(plan: &TransportPlan, cost: &Array2<f64>) -> f64 {
    debug_assert_eq!(plan.q.dim(), cost.dim());
    (&plan.q * cost).sum()
}

/// Per-concept activation scores derived from the plan.
#[derive(Debug, Clone)]
pub struct ConceptActivations {
    /// `σ(κ·(1 − d_ot))` per concept; always in (0, 1).
    pub a_hat: Array1<f64>,
    /// `min_i q_ij·d_ij` per concept.
    pub d_ot: Array1<f64>,
    /// Row index attaining the minimum, lowest index on ties.
    pub argmin_patch: Vec<usize>,
}

/// Activation per concept from the minimum transport-weighted cost.
///
/// `kappa` scales the sigmoid argument; 1 is the plain formula. Since plan
/// entries are `O(1/(N·M))`, scores occupy a narrow band near `σ(κ)` — they
/// are ranking scores, not calibrated probabilities.
pub fn concept_activations(
    plan: &TransportPlan,
    cost: &Array2<f64>,
    kappa: f64,
) -> Result<ConceptActivations> {
    if plan.q.dim() != cost.dim() {
        return Err(Error::Shape(format!(
            "plan {:?} vs cost {:?}",
            plan.q.dim(),
            cost.dim()
        )));
    }
    let (n, m) = plan.q.dim();
    let mut d_ot = Array1::zeros(m);
    let mut argmin_patch = vec![0usize; m];
    for j in 0..m {
        let mut best = f64::INFINITY;
        let mut best_i = 0usize;
        for i in 0..n {
            let w = plan.q[[i, j]] * cost[[i, j]];
            if w < best {
                best = w;
                best_i = i;
            }
        }
        d_ot[j] = best;
        argmin_patch[j] = best_i;
    }
    let a_hat = d_ot.mapv(|d| sigmoid(kappa * (1.0 - d)));
    Ok(ConceptActivations {
        a_hat,
        d_ot,
        argmin_patch,
    })
}

/// Gradient of a scalar loss through [`concept_activations`], back to the
/// cost matrix.
///
/// The plan is a constant here: gradients reach `D` only through the
/// argmin-selected entry of each concept column, `d_ot_j = q[i*,j]·d[i*,j]`.
pub fn activation_backward(
    plan: &TransportPlan,
    acts: &ConceptActivations,
    d_a_hat: &Array1<f64>,
    kappa: f64,
) -> Array2<f64> {
    let (n, m) = plan.q.dim();
    let mut d_cost = Array2::zeros((n, m));
    for j in 0..m {
        let i = acts.argmin_patch[j];
        let a = acts.a_hat[j];
        d_cost[[i, j]] = d_a_hat[j] * (-kappa) * a * (1.0 - a) * plan.q[[i, j]];
    }
    d_cost
}

/// Column `j` of the plan, arranged on the patch grid: where concept `j`'s
/// mass lands in the image.
#[derive(Debug, Clone)]
pub struct InversionMask {
    /// Row-major over the grid, length `N`.
    pub weights: Array1<f64>,
    pub grid: (usize, usize),
    pub concept: usize,
}

impl InversionMask {
    pub fn value_at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.grid.1 + col]
    }
}

pub fn inversion_mask(plan: &TransportPlan, concept: usize, grid: (usize, usize)) -> Result<InversionMask> {
    if concept >= plan.num_concepts() {
        return Err(Error::Shape(format!(
            "concept {} out of range for {} concepts",
            concept,
            plan.num_concepts()
        )));
    }
    if grid.0 * grid.1 != plan.num_patches() {
        return Err(Error::Shape(format!(
            "grid {:?} does not cover {} patches",
            grid,
            plan.num_patches()
        )));
    }
    Ok(InversionMask {
        weights: plan.q.column(concept).to_owned(),
        grid,
        concept,
    })
}
