//! Dataset manifest: a single JSON file listing the concept bank and every
//! sample, with tensor payloads in `.dott` files referenced by relative path.
//!
//! Layout on disk:
//!
//! ```text
//! dataset/
//!   manifest.json
//!   bank/concepts.dott      [M x d]
//!   bank/labels.dott        [K x M]
//!   samples/<id>.patches.dott   [N x d]
//!   samples/<id>.global.dott    [d]
//! ```
//!
//! `concept_label` may be omitted from a sample, in which case it defaults to
//! the class-level row `labels[class_label]`; an explicit value supports
//! instance-level labels.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::tensor_file::{read_tensor, write_tensor};
use super::{
    matrix_from_payload, matrix_to_payload, vector_from_payload, vector_to_payload, ConceptBank,
    EmbeddingBundle, Sample, Split,
};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFile {
    pub version: u32,
    pub bank: BankEntry,
    pub samples: Vec<SampleEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BankEntry {
    pub concepts: String,
    pub names: Vec<String>,
    pub labels: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    #[serde(default = "default_split")]
    pub split: Split,
    pub patches: String,
    pub global: String,
    pub grid: [usize; 2],
    pub patch_px: usize,
    pub class_label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept_label: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub part_boxes: Vec<PartBoxEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartBoxEntry {
    pub concept: usize,
    /// `[x_min, y_min, x_max, y_max]` in pixels.
    pub box_px: [usize; 4],
}

fn default_split() -> Split {
    Split::Train
}

fn manifest_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Load a dataset from its manifest. Paths inside the manifest are resolved
/// relative to the manifest's directory.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<(ConceptBank, Vec<Sample>)> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| manifest_err(manifest_path, format!("cannot read: {e}")))?;
    let manifest: ManifestFile = serde_json::from_str(&text)
        .map_err(|e| manifest_err(manifest_path, format!("invalid JSON: {e}")))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(manifest_err(
            manifest_path,
            format!("unsupported manifest version {}", manifest.version),
        ));
    }
    let root = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let (cdims, cvals) = read_tensor(root.join(&manifest.bank.concepts))?;
    let concepts = matrix_from_payload(&cdims, &cvals)?;
    let (ldims, lvals) = read_tensor(root.join(&manifest.bank.labels))?;
    let labels = matrix_from_payload(&ldims, &lvals)?;
    let bank = ConceptBank::new(concepts, manifest.bank.names.clone(), labels)?;

    if manifest.samples.is_empty() {
        return Err(manifest_err(manifest_path, "manifest lists no samples"));
    }

    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let (pdims, pvals) = read_tensor(root.join(&entry.patches))?;
        let patches = matrix_from_payload(&pdims, &pvals)?;
        let (gdims, gvals) = read_tensor(root.join(&entry.global))?;
        let global = vector_from_payload(&gdims, &gvals)?;
        let bundle = EmbeddingBundle::new(patches, global, (entry.grid[0], entry.grid[1]), entry.patch_px)?;

        if entry.class_label >= bank.num_classes() {
            return Err(manifest_err(
                manifest_path,
                format!(
                    "sample {} class label {} >= {} classes",
                    entry.id,
                    entry.class_label,
                    bank.num_classes()
                ),
            ));
        }
        let concept_label = match &entry.concept_label {
            Some(bits) => Array1::from_iter(bits.iter().map(|&b| b as f64)),
            None => bank.class_concepts(entry.class_label),
        };
        let sample = Sample {
            id: entry.id.clone(),
            split: entry.split,
            bundle,
            concept_label,
            class_label: entry.class_label,
            part_boxes: entry
                .part_boxes
                .iter()
                .map(|b| (b.concept, (b.box_px[0], b.box_px[1], b.box_px[2], b.box_px[3])))
                .collect(),
        };
        sample.validate(&bank)?;
        samples.push(sample);
    }
    Ok((bank, samples))
}

/// Write a dataset to `dir` in the standard layout, returning the manifest path.
///
/// Serialization is deterministic: identical inputs produce identical bytes.
pub fn save_dataset(dir: impl AsRef<Path>, bank: &ConceptBank, samples: &[Sample]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let bank_dir = dir.join("bank");
    let samples_dir = dir.join("samples");
    fs::create_dir_all(&bank_dir).map_err(|e| Error::io(&bank_dir, e))?;
    fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;

    let (cdims, cvals) = matrix_to_payload(&bank.concepts);
    write_tensor(bank_dir.join("concepts.dott"), &cdims, &cvals)?;
    let (ldims, lvals) = matrix_to_payload(&bank.labels);
    write_tensor(bank_dir.join("labels.dott"), &ldims, &lvals)?;

    let mut entries = Vec::with_capacity(samples.len());
    for sample in samples {
        let patches_rel = format!("samples/{}.patches.dott", sample.id);
        let global_rel = format!("samples/{}.global.dott", sample.id);
        let (pdims, pvals) = matrix_to_payload(&sample.bundle.patches);
        write_tensor(dir.join(&patches_rel), &pdims, &pvals)?;
        let (gdims, gvals) = vector_to_payload(&sample.bundle.global);
        write_tensor(dir.join(&global_rel), &gdims, &gvals)?;

        entries.push(SampleEntry {
            id: sample.id.clone(),
            split: sample.split,
            patches: patches_rel,
            global: global_rel,
            grid: [sample.bundle.grid.0, sample.bundle.grid.1],
            patch_px: sample.bundle.patch_px,
            class_label: sample.class_label,
            concept_label: Some(sample.concept_label.iter().map(|&v| v as u8).collect()),
            part_boxes: sample
                .part_boxes
                .iter()
                .map(|&(concept, (x0, y0, x1, y1))| PartBoxEntry {
                    concept,
                    box_px: [x0, y0, x1, y1],
                })
                .collect(),
        });
    }

    let manifest = ManifestFile {
        version: MANIFEST_VERSION,
        bank: BankEntry {
            concepts: "bank/concepts.dott".into(),
            names: bank.names.clone(),
            labels: "bank/labels.dott".into(),
        },
        samples: entries,
    };
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    // Fixture values are f32-representable so the on-disk round trip is exact.
    fn tiny_bank(d: usize) -> ConceptBank {
        let concepts = Array2::from_shape_fn((3, d), |(i, j)| (i * d + j) as f64 * 0.0625);
        ConceptBank::new(
            concepts,
            vec!["c0".into(), "c1".into(), "c2".into()],
            array![[1.0, 1.0, 0.0], [0.0, 1.0, 1.0]],
        )
        .unwrap()
    }

    fn tiny_sample(id: &str, d: usize, class: usize, bank: &ConceptBank) -> Sample {
        let patches = Array2::from_shape_fn((4, d), |(i, j)| (i + j) as f64 * 0.25);
        let global = Array1::from_elem(d, 0.5);
        Sample {
            id: id.into(),
            split: Split::Train,
            bundle: EmbeddingBundle::new(patches, global, (2, 2), 14).unwrap(),
            concept_label: bank.class_concepts(class),
            class_label: class,
            part_boxes: vec![(0, (0, 0, 14, 14))],
        }
    }

    #[test]
    fn round_trip_two_samples() {
        let bank = tiny_bank(5);
        let samples = vec![tiny_sample("s0", 5, 0, &bank), tiny_sample("s1", 5, 1, &bank)];
        let dir = tempfile::tempdir().unwrap();
        let path = save_dataset(dir.path(), &bank, &samples).unwrap();
        let (bank2, samples2) = load_dataset(&path).unwrap();
        assert_eq!(bank2.labels.shape(), &[2, 3]);
        assert_eq!(samples2.len(), 2);
        assert_eq!(bank, bank2);
        assert_eq!(samples, samples2);
    }

    #[test]
    fn dim_mismatch_is_error() {
        let bank = tiny_bank(5);
        let mut samples = vec![tiny_sample("s0", 5, 0, &bank)];
        // Rebuild the sample with a different feature dim than the bank.
        let patches = Array2::zeros((4, 7));
        let global = Array1::zeros(7);
        samples[0].bundle = EmbeddingBundle::new(patches, global, (2, 2), 14).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = save_dataset(dir.path(), &bank, &samples).unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(format!("{err}").contains("dim"), "got: {err}");
    }

    #[test]
    fn class_label_out_of_range_is_error() {
        let bank = tiny_bank(5);
        let samples = vec![tiny_sample("s0", 5, 0, &bank)];
        let dir = tempfile::tempdir().unwrap();
        let path = save_dataset(dir.path(), &bank, &samples).unwrap();
        let mut manifest: ManifestFile =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        manifest.samples[0].class_label = 9;
        fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
        assert!(load_dataset(&path).is_err());
    }

    #[test]
    fn missing_tensor_file_is_error() {
        let bank = tiny_bank(5);
        let samples = vec![tiny_sample("s0", 5, 0, &bank)];
        let dir = tempfile::tempdir().unwrap();
        let path = save_dataset(dir.path(), &bank, &samples).unwrap();
        fs::remove_file(dir.path().join("samples/s0.patches.dott")).unwrap();
        assert!(load_dataset(&path).is_err());
    }
}
