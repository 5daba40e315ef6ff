//! Embedding ingestion: tensor files, dataset manifests, and the synthetic
//! generator with planted part locations and controllable background bias.
//!
//! Embeddings are always ingested from files, never computed — the encoders
//! that produced them are outside this crate. Files store 32-bit floats;
//! everything in memory is 64-bit.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

pub mod manifest;
pub mod synthetic;
pub mod tensor_file;

pub use manifest::{load_dataset, save_dataset};
pub use synthetic::{generate_synthetic, SynthConfig, SynthDataset};
pub use tensor_file::{read_tensor, write_tensor};

/// One image's patch feature matrix plus its global feature and grid geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    /// Patch features, one row per patch, `[N x d]`.
    pub patches: Array2<f64>,
    /// Global image feature, `[d]`.
    pub global: Array1<f64>,
    /// Patch grid `(rows, cols)` with `rows * cols == N`.
    pub grid: (usize, usize),
    /// Pixel side length of one square patch.
    pub patch_px: usize,
}

impl EmbeddingBundle {
    pub fn new(
        patches: Array2<f64>,
        global: Array1<f64>,
        grid: (usize, usize),
        patch_px: usize,
    ) -> Result<Self> {
        let bundle = Self {
            patches,
            global,
            grid,
            patch_px,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn num_patches(&self) -> usize {
        self.patches.nrows()
    }

    pub fn dim(&self) -> usize {
        self.patches.ncols()
    }

    /// Image extent in pixels, `(height, width)`.
    pub fn image_px(&self) -> (usize, usize) {
        (self.grid.0 * self.patch_px, self.grid.1 * self.patch_px)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.patches.nrows();
        if n == 0 {
            return Err(Error::Shape("bundle has zero patches".into()));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 || self.grid.0 * self.grid.1 != n {
            return Err(Error::Shape(format!(
                "grid {:?} does not cover {} patches",
                self.grid, n
            )));
        }
        if self.global.len() != self.patches.ncols() {
            return Err(Error::Shape(format!(
                "global dim {} != patch dim {}",
                self.global.len(),
                self.patches.ncols()
            )));
        }
        if self.patch_px == 0 {
            return Err(Error::Shape("patch_px must be positive".into()));
        }
        let finite =
            self.patches.iter().all(|v| v.is_finite()) && self.global.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("embedding bundle".into()));
        }
        Ok(())
    }
}

/// Concept feature matrix with names and the class-level concept label matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptBank {
    /// Concept features, one row per concept, `[M x d]`.
    pub concepts: Array2<f64>,
    /// Human-readable concept names, length `M`.
    pub names: Vec<String>,
    /// Class-level binary concept labels, `[K x M]`, entries in {0, 1}.
    pub labels: Array2<f64>,
}

impl ConceptBank {
    pub fn new(concepts: Array2<f64>, names: Vec<String>, labels: Array2<f64>) -> Result<Self> {
        let bank = Self {
            concepts,
            names,
            labels,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn num_concepts(&self) -> usize {
        self.concepts.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.nrows()
    }

    pub fn dim(&self) -> usize {
        self.concepts.ncols()
    }

    /// Class-level concept label row for class `k` as a binary vector.
    pub fn class_concepts(&self, k: usize) -> Array1<f64> {
        self.labels.row(k).to_owned()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.concepts.nrows();
        if m == 0 {
            return Err(Error::Shape("concept bank is empty".into()));
        }
        if self.names.len() != m {
            return Err(Error::Shape(format!(
                "{} names for {} concepts",
                self.names.len(),
                m
            )));
        }
        if self.labels.ncols() != m {
            return Err(Error::Shape(format!(
                "label matrix has {} columns for {} concepts",
                self.labels.ncols(),
                m
            )));
        }
        if !self.concepts.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("concept features".into()));
        }
        for (k, row) in self.labels.rows().into_iter().enumerate() {
            if !row.iter().all(|&v| v == 0.0 || v == 1.0) {
                return Err(Error::Shape(format!("label row {k} has non-binary entries")));
            }
            if row.sum() == 0.0 {
                return Err(Error::Shape(format!("class {k} activates no concepts")));
            }
        }
        Ok(())
    }
}

/// Which split a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestId,
    TestOod,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::TestId => write!(f, "test_id"),
            Split::TestOod => write!(f, "test_ood"),
        }
    }
}

/// Ground-truth localization for one concept: `(concept index, pixel box)`.
///
/// Box is `(x_min, y_min, x_max, y_max)` in pixels, exclusive max edges.
pub type PartBox = (usize, (usize, usize, usize, usize));

/// One labeled example: a bundle plus concept/class labels and optional
/// ground-truth part boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    pub bundle: EmbeddingBundle,
    /// Binary concept activation vector, length `M`.
    pub concept_label: Array1<f64>,
    /// Class index in `[0, K)`.
    pub class_label: usize,
    pub part_boxes: Vec<PartBox>,
}

impl Sample {
    pub fn validate(&self, bank: &ConceptBank) -> Result<()> {
        self.bundle.validate()?;
        if self.bundle.dim() != bank.dim() {
            return Err(Error::Shape(format!(
                "sample {} has dim {} but bank has dim {}",
                self.id,
                self.bundle.dim(),
                bank.dim()
            )));
        }
        if self.concept_label.len() != bank.num_concepts() {
            return Err(Error::Shape(format!(
                "sample {} concept label length {} != M {}",
                self.id,
                self.concept_label.len(),
                bank.num_concepts()
            )));
        }
        if !self.concept_label.iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::Shape(format!(
                "sample {} concept label has non-binary entries",
                self.id
            )));
        }
        if self.class_label >= bank.num_classes() {
            return Err(Error::Shape(format!(
                "sample {} class label {} >= K {}",
                self.id,
                self.class_label,
                bank.num_classes()
            )));
        }
        let (h_px, w_px) = self.bundle.image_px();
        for &(j, (x0, y0, x1, y1)) in &self.part_boxes {
            if j >= bank.num_concepts() {
                return Err(Error::Shape(format!(
                    "sample {} part box names concept {} >= M",
                    self.id, j
                )));
            }
            if x0 >= x1 || y0 >= y1 || x1 > w_px || y1 > h_px {
                return Err(Error::Shape(format!(
                    "sample {} part box {:?} outside image {}x{}",
                    self.id,
                    (x0, y0, x1, y1),
                    w_px,
                    h_px
                )));
            }
        }
        Ok(())
    }
}

/// Convert a rank-2 tensor payload into an `Array2<f64>`.
pub fn matrix_from_payload(dims: &[u64], values: &[f32]) -> Result<Array2<f64>> {
    if dims.len() != 2 {
        return Err(Error::Shape(format!("expected rank-2 tensor, got rank {}", dims.len())));
    }
    let (r, c) = (dims[0] as usize, dims[1] as usize);
    let data: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    Array2::from_shape_vec((r, c), data)
        .map_err(|e| Error::Shape(format!("payload does not fill {r}x{c}: {e}")))
}

/// Convert a rank-1 tensor payload into an `Array1<f64>`.
pub fn vector_from_payload(dims: &[u64], values: &[f32]) -> Result<Array1<f64>> {
    if dims.len() != 1 {
        return Err(Error::Shape(format!("expected rank-1 tensor, got rank {}", dims.len())));
    }
    Ok(Array1::from_iter(values.iter().map(|&v| v as f64)))
}

/// Row-major f32 payload of a matrix, the on-disk representation.
pub fn matrix_to_payload(matrix: &Array2<f64>) -> (Vec<u64>, Vec<f32>) {
    let dims = vec![matrix.nrows() as u64, matrix.ncols() as u64];
    let values = matrix.iter().map(|&v| v as f32).collect();
    (dims, values)
}

/// f32 payload of a vector.
pub fn vector_to_payload(vector: &Array1<f64>) -> (Vec<u64>, Vec<f32>) {
    (vec![vector.len() as u64], vector.iter().map(|&v| v as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bundle_rejects_bad_grid() {
        let patches = Array2::zeros((4, 3));
        let global = Array1::zeros(3);
        assert!(EmbeddingBundle::new(patches.clone(), global.clone(), (2, 2), 14).is_ok());
        assert!(EmbeddingBundle::new(patches, global, (3, 2), 14).is_err());
    }

    #[test]
    fn bank_rejects_empty_class_row() {
        let concepts = Array2::zeros((2, 3));
        let names = vec!["a".into(), "b".into()];
        let labels = array![[1.0, 0.0], [0.0, 0.0]];
        assert!(ConceptBank::new(concepts, names, labels).is_err());
    }

    #[test]
    fn payload_round_trip() {
        let m = array![[1.0, 2.5], [-3.0, 0.125]];
        let (dims, values) = matrix_to_payload(&m);
        let back = matrix_from_payload(&dims, &values).unwrap();
        assert_eq!(m, back);
    }
}
