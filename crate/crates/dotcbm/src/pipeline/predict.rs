//! Inference: one eval-mode pass from a bundle to class probabilities,
//! concept activations, and inversion masks. Pure given the model.

use ndarray::{Array1, Array2};

use crate::data::EmbeddingBundle;
use crate::error::{Error, Result};
use crate::nn::{adapter_forward, AdapterParams, Mode};
use crate::ot::{
    concept_activations, cost_matrix, inversion_mask, sinkhorn, ConceptActivations, InversionMask,
    TransportPlan,
};
use crate::pipeline::{uniform_simplex, TrainConfig, TrainedModel};
use crate::priors::{patch_prior, saliency};

/// Transport-side outputs for one bundle.
#[derive(Debug, Clone)]
pub struct SampleForward {
    pub cost: Array2<f64>,
    pub plan: TransportPlan,
    pub acts: ConceptActivations,
    pub theta: Array1<f64>,
}

/// Eval-mode forward of one bundle against already-adapted concept features.
pub fn forward_sample(
    visual: &AdapterParams,
    adapted_concepts: &Array2<f64>,
    gamma: &Array1<f64>,
    bundle: &EmbeddingBundle,
    cfg: &TrainConfig,
) -> Result<SampleForward> {
    let (adapted_patches, _) = adapter_forward(visual, &bundle.patches, Mode::Eval, None)?;
    let cost = cost_matrix(&adapted_patches, adapted_concepts)?;
    let theta = if cfg.priors_enabled {
        patch_prior(&saliency(bundle))
    } else {
        uniform_simplex(bundle.num_patches())
    };
    let plan = sinkhorn(
        &cost,
        &theta,
        gamma,
        cfg.epsilon,
        cfg.sinkhorn_max_iter,
        cfg.sinkhorn_tol,
    )?;
    let acts = concept_activations(&plan, &cost, cfg.kappa)?;
    Ok(SampleForward {
        cost,
        plan,
        acts,
        theta,
    })
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// Softmax over the classifier logits; sums to 1.
    pub class_probs: Array1<f64>,
    pub activations: ConceptActivations,
    /// One inversion mask per concept, on the bundle's grid.
    pub masks: Vec<InversionMask>,
}

/// Full inference for one bundle.
pub fn predict(model: &TrainedModel, bundle: &EmbeddingBundle) -> Result<Prediction> {
    bundle.validate()?;
    if bundle.dim() != model.stage1.visual.dim() {
        return Err(Error::Shape(format!(
            "bundle dim {} but model dim {}",
            bundle.dim(),
            model.stage1.visual.dim()
        )));
    }
    let (adapted_concepts, _) =
        adapter_forward(&model.stage1.textual, &model.concepts, Mode::Eval, None)?;
    let forward = forward_sample(
        &model.stage1.visual,
        &adapted_concepts,
        &model.stage1.gamma,
        bundle,
        &model.config,
    )?;
    let logits = model.classifier.logits(&forward.acts.a_hat);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs = logits.mapv(|l| (l - max).exp());
    let z = probs.sum();
    probs /= z;

    let masks = (0..forward.plan.num_concepts())
        .map(|j| inversion_mask(&forward.plan, j, bundle.grid))
        .collect::<Result<Vec<_>>>()?;

    Ok(Prediction {
        class_probs: probs,
        activations: forward.acts,
        masks,
    })
}
