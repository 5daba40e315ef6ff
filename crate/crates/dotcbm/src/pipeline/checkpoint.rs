//! Checkpoint layout: one tensor file per parameter plus a JSON manifest of
//! names, shapes, and optimizer state.
//!
//! ```text
//! ckpt/
//!   checkpoint.json
//!   visual.w1.dott ... visual.b3.dott
//!   textual.w1.dott ... textual.b3.dott
//!   classifier.w.dott [classifier.b.dott]
//!   prior.gamma.dott
//!   bank.concepts.dott
//!   opt.visual.m.w1.dott ...            (present when optimizer state saved)
//! ```
//!
//! Tensor payloads are 32-bit on disk; loading a checkpoint and saving it
//! again reproduces identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::tensor_file::{read_tensor, write_tensor};
use crate::data::{matrix_from_payload, matrix_to_payload, vector_from_payload, vector_to_payload};
use crate::error::{Error, Result};
use crate::nn::AdapterParams;
use crate::pipeline::{ClassifierParams, Stage1Model, TrainConfig, TrainedModel};

pub const CHECKPOINT_VERSION: u32 = 1;
const ADAPTER_TENSORS: [&str; 6] = ["w1", "b1", "w2", "b2", "w3", "b3"];

/// Optimizer moments and step counters for both adapters, for resuming.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub visual_step: u64,
    pub textual_step: u64,
    /// First/second moments per adapter tensor, in [`ADAPTER_TENSORS`] order.
    pub visual_m: Vec<Vec<f64>>,
    pub visual_v: Vec<Vec<f64>>,
    pub textual_m: Vec<Vec<f64>>,
    pub textual_v: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    config: TrainConfig,
    concept_names: Vec<String>,
    /// name -> relative tensor file, sorted for stable serialization.
    tensors: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer_steps: Option<(u64, u64)>,
}

fn tensor_path(name: &str) -> String {
    format!("{name}.dott")
}

fn write_matrix(dir: &Path, name: &str, m: &Array2<f64>) -> Result<String> {
    let file = tensor_path(name);
    let (dims, values) = matrix_to_payload(m);
    write_tensor(dir.join(&file), &dims, &values)?;
    Ok(file)
}

fn write_vector(dir: &Path, name: &str, v: &Array1<f64>) -> Result<String> {
    let file = tensor_path(name);
    let (dims, values) = vector_to_payload(v);
    write_tensor(dir.join(&file), &dims, &values)?;
    Ok(file)
}

fn adapter_entries(prefix: &str, params: &AdapterParams) -> Vec<(String, Vec<u64>, Vec<f32>)> {
    params
        .named_tensors()
        .into_iter()
        .map(|(name, shape, values)| {
            (
                format!("{prefix}.{name}"),
                shape.iter().map(|&s| s as u64).collect(),
                values.iter().map(|&v| v as f32).collect(),
            )
        })
        .collect()
}

/// Serialize a model (and optionally its stage-1 optimizer state) to `dir`.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    model: &TrainedModel,
    optimizer: Option<&OptimizerSnapshot>,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = BTreeMap::new();

    for prefix in ["visual", "textual"] {
        let params = if prefix == "visual" {
            &model.stage1.visual
        } else {
            &model.stage1.textual
        };
        for (name, dims, values) in adapter_entries(prefix, params) {
            let file = tensor_path(&name);
            write_tensor(dir.join(&file), &dims, &values)?;
            tensors.insert(name, file);
        }
    }
    tensors.insert(
        "classifier.w".into(),
        write_matrix(dir, "classifier.w", &model.classifier.weight)?,
    );
    if let Some(bias) = &model.classifier.bias {
        tensors.insert("classifier.b".into(), write_vector(dir, "classifier.b", bias)?);
    }
    tensors.insert(
        "classifier.feat_mean".into(),
        write_vector(dir, "classifier.feat_mean", &model.classifier.feat_mean)?,
    );
    tensors.insert(
        "classifier.feat_std".into(),
        write_vector(dir, "classifier.feat_std", &model.classifier.feat_std)?,
    );
    tensors.insert(
        "prior.gamma".into(),
        write_vector(dir, "prior.gamma", &model.stage1.gamma)?,
    );
    tensors.insert(
        "bank.concepts".into(),
        write_matrix(dir, "bank.concepts", &model.concepts)?,
    );

    let mut optimizer_steps = None;
    if let Some(opt) = optimizer {
        optimizer_steps = Some((opt.visual_step, opt.textual_step));
        for (side, m, v) in [
            ("visual", &opt.visual_m, &opt.visual_v),
            ("textual", &opt.textual_m, &opt.textual_v),
        ] {
            for (kind, moments) in [("m", m), ("v", v)] {
                for (tensor, values) in ADAPTER_TENSORS.iter().zip(moments.iter()) {
                    let name = format!("opt.{side}.{kind}.{tensor}");
                    let file = tensor_path(&name);
                    let dims = vec![values.len() as u64];
                    let payload: Vec<f32> = values.iter().map(|&x| x as f32).collect();
                    write_tensor(dir.join(&file), &dims, &payload)?;
                    tensors.insert(name, file);
                }
            }
        }
    }

    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        concept_names: model.concept_names.clone(),
        tensors,
        optimizer_steps,
    };
    let manifest_path = dir.join("checkpoint.json");
    let tmp = dir.join("checkpoint.json.tmp");
    fs::write(&tmp, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

fn load_matrix(dir: &Path, file: &str) -> Result<Array2<f64>> {
    let (dims, values) = read_tensor(dir.join(file))?;
    matrix_from_payload(&dims, &values)
}

fn load_vector(dir: &Path, file: &str) -> Result<Array1<f64>> {
    let (dims, values) = read_tensor(dir.join(file))?;
    vector_from_payload(&dims, &values)
}

fn load_adapter(
    dir: &Path,
    prefix: &str,
    tensors: &BTreeMap<String, String>,
    dropout_rate: f64,
) -> Result<AdapterParams> {
    let get = |name: &str| -> Result<&String> {
        tensors.get(&format!("{prefix}.{name}")).ok_or_else(|| Error::Manifest {
            path: dir.join("checkpoint.json"),
            msg: format!("missing tensor {prefix}.{name}"),
        })
    };
    Ok(AdapterParams {
        w1: load_matrix(dir, get("w1")?)?,
        b1: load_vector(dir, get("b1")?)?,
        w2: load_matrix(dir, get("w2")?)?,
        b2: load_vector(dir, get("b2")?)?,
        w3: load_matrix(dir, get("w3")?)?,
        b3: load_vector(dir, get("b3")?)?,
        dropout_rate,
    })
}

/// Load a checkpoint from its directory (or the `checkpoint.json` path).
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(TrainedModel, Option<OptimizerSnapshot>)> {
    let path = path.as_ref();
    let (dir, manifest_path) = if path.is_dir() {
        (path.to_path_buf(), path.join("checkpoint.json"))
    } else {
        (
            path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf(),
            path.to_path_buf(),
        )
    };
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::Manifest {
        path: manifest_path.clone(),
        msg: format!("cannot read: {e}"),
    })?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: manifest_path.clone(),
        msg: format!("invalid JSON: {e}"),
    })?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Manifest {
            path: manifest_path.clone(),
            msg: format!("unsupported checkpoint version {}", manifest.version),
        });
    }

    let dropout = manifest.config.dropout_rate;
    let visual = load_adapter(&dir, "visual", &manifest.tensors, dropout)?;
    let textual = load_adapter(&dir, "textual", &manifest.tensors, dropout)?;
    let gamma = load_vector(&dir, manifest.tensors.get("prior.gamma").ok_or_else(|| {
        Error::Manifest {
            path: manifest_path.clone(),
            msg: "missing tensor prior.gamma".into(),
        }
    })?)?;
    let concepts = load_matrix(&dir, manifest.tensors.get("bank.concepts").ok_or_else(|| {
        Error::Manifest {
            path: manifest_path.clone(),
            msg: "missing tensor bank.concepts".into(),
        }
    })?)?;
    let weight = load_matrix(&dir, manifest.tensors.get("classifier.w").ok_or_else(|| {
        Error::Manifest {
            path: manifest_path.clone(),
            msg: "missing tensor classifier.w".into(),
        }
    })?)?;
    let bias = match manifest.tensors.get("classifier.b") {
        Some(file) => Some(load_vector(&dir, file)?),
        None => None,
    };
    let m = concepts.nrows();
    let feat_mean = match manifest.tensors.get("classifier.feat_mean") {
        Some(file) => load_vector(&dir, file)?,
        None => ndarray::Array1::zeros(m),
    };
    let feat_std = match manifest.tensors.get("classifier.feat_std") {
        Some(file) => load_vector(&dir, file)?,
        None => ndarray::Array1::ones(m),
    };

    let optimizer = match manifest.optimizer_steps {
        None => None,
        Some((visual_step, textual_step)) => {
            let load_moments = |side: &str, kind: &str| -> Result<Vec<Vec<f64>>> {
                ADAPTER_TENSORS
                    .iter()
                    .map(|tensor| {
                        let name = format!("opt.{side}.{kind}.{tensor}");
                        let file = manifest.tensors.get(&name).ok_or_else(|| Error::Manifest {
                            path: manifest_path.clone(),
                            msg: format!("missing tensor {name}"),
                        })?;
                        let (_, values) = read_tensor(dir.join(file))?;
                        Ok(values.into_iter().map(|v| v as f64).collect())
                    })
                    .collect()
            };
            Some(OptimizerSnapshot {
                visual_step,
                textual_step,
                visual_m: load_moments("visual", "m")?,
                visual_v: load_moments("visual", "v")?,
                textual_m: load_moments("textual", "m")?,
                textual_v: load_moments("textual", "v")?,
            })
        }
    };

    let model = TrainedModel {
        stage1: Stage1Model {
            visual,
            textual,
            gamma,
        },
        classifier: ClassifierParams {
            weight,
            bias,
            feat_mean,
            feat_std,
        },
        config: manifest.config,
        concepts,
        concept_names: manifest.concept_names,
    };
    Ok((model, optimizer))
}

/// SHA-256 over the adapter tensor files, in fixed name order. Stage 2 must
/// leave this digest unchanged.
pub fn adapter_digest(dir: impl AsRef<Path>) -> Result<String> {
    let dir = dir.as_ref();
    let mut hasher = Sha256::new();
    for prefix in ["visual", "textual"] {
        for tensor in ADAPTER_TENSORS {
            let path = dir.join(format!("{prefix}.{tensor}.dott"));
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            hasher.update(&bytes);
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

/// SHA-256 of one file, for run manifests.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
