//! Two-stage independent training and inference.
//!
//! Stage 1 trains the visual and textual adapters against concept labels
//! through the transport solver; the plan is a constant in the backward pass
//! (gradients flow through the cost matrix only). Stage 2 freezes the
//! adapters, caches every sample's activation vector once, and fits the
//! linear concept-to-class head with cross-entropy. Inference runs a single
//! eval-mode pass and returns class probabilities, concept activations, and
//! per-concept inversion masks.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod checkpoint;
pub mod predict;
pub mod train;

pub use checkpoint::{
    adapter_digest, file_digest, load_checkpoint, save_checkpoint, OptimizerSnapshot,
};
pub use predict::{forward_sample, predict, Prediction, SampleForward};
pub use train::{
    fit_classifier, gamma_for, stage1_log_csv, stage1_train, stage2_log_csv, stage2_train,
    LogRecord, Stage1Model, Stage1Output, Stage2Output, TrainAbortInfo, TrainedModel,
};

/// All stage-1/stage-2 hyperparameters. Defaults are the reference training
/// recipe; anything can be overridden by config file or CLI flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Entropic regularization of the transport solver.
    pub epsilon: f64,
    /// Activation sigmoid scale; 1 is the plain formula.
    pub kappa: f64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// When false, the solver sees exactly uniform marginals on both sides.
    pub priors_enabled: bool,
    pub dropout_rate: f64,
    pub sinkhorn_max_iter: usize,
    pub sinkhorn_tol: f64,
    /// When true (default) the transport cost is built from the same
    /// dropout-active features the regularizers see; when false a second
    /// eval-mode forward feeds the transport path.
    pub ot_dropout: bool,
    /// Classifier bias term; off matches the plain linear head.
    pub use_bias: bool,
    /// Start the adapters near the identity map instead of at a random
    /// uniform init. The identity start preserves the alignment the raw
    /// embedding spaces already carry; with a random start the transport
    /// loss must rediscover every patch-concept pairing from scratch, which
    /// does not reliably happen at small scale.
    pub identity_init: bool,
    /// Weight jitter for the near-identity init.
    pub init_jitter: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.15,
            lambda2: 0.2,
            lambda3: 0.8,
            epsilon: 0.1,
            kappa: 1.0,
            base_lr: 1e-4,
            weight_decay: 1e-5,
            batch_size: 128,
            max_epochs: 200,
            seed: 0,
            priors_enabled: true,
            dropout_rate: 0.4,
            sinkhorn_max_iter: 100,
            sinkhorn_tol: 1e-6,
            ot_dropout: true,
            use_bias: false,
            identity_init: true,
            init_jitter: 0.02,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epsilon", self.epsilon),
            ("kappa", self.kappa),
            ("base_lr", self.base_lr),
            ("sinkhorn_tol", self.sinkhorn_tol),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let nonnegative = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in nonnegative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.sinkhorn_max_iter == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs, sinkhorn_max_iter must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Linear concept-to-class head `ŷ = W_F·â` (optional bias).
///
/// Activation scores live in a band a thousandth of their magnitude wide
/// (the transport plan's entries are `O(1/(N·M))`), so the head is trained
/// on per-concept standardized scores; `feat_mean`/`feat_std` hold the
/// training-split statistics and travel with the checkpoint. This is the
/// plain affine head under a reparameterization, not an extra model stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    /// `[K x M]`.
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
    /// Per-concept activation mean from the stage-2 training split.
    pub feat_mean: Array1<f64>,
    /// Per-concept activation deviation from the stage-2 training split.
    pub feat_std: Array1<f64>,
}

impl ClassifierParams {
    /// Zero initialization: uniform logits before training.
    pub fn zeros(num_classes: usize, num_concepts: usize, use_bias: bool) -> Self {
        Self {
            weight: Array2::zeros((num_classes, num_concepts)),
            bias: use_bias.then(|| Array1::zeros(num_classes)),
            feat_mean: Array1::zeros(num_concepts),
            feat_std: Array1::ones(num_concepts),
        }
    }

    pub fn standardize(&self, activations: &Array1<f64>) -> Array1<f64> {
        (activations - &self.feat_mean) / &self.feat_std
    }

    pub fn logits(&self, activations: &Array1<f64>) -> Array1<f64> {
        let mut out = self.weight.dot(&self.standardize(activations));
        if let Some(b) = &self.bias {
            out += b;
        }
        out
    }
}

/// Exactly uniform probability vector (the `priors_enabled = false` marginal).
pub fn uniform_simplex(n: usize) -> Array1<f64> {
    Array1::from_elem(n, 1.0 / n as f64)
}
