//! Synthetic embedding generator with planted part locations.
//!
//! Each sample plants one contiguous grid region per active concept whose
//! patches sit at the concept vector plus noise, so ground-truth localization
//! is known by construction. Background patches are plain noise, optionally
//! contaminated by a per-class background direction — the embedding-level
//! analogue of a class-correlated colored background. Generation is a pure
//! function of the config (including the seed).

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ConceptBank, EmbeddingBundle, Sample, Split};
use crate::error::{Error, Result};

/// Pairwise |cos| bound enforced on generated concept vectors.
const CONCEPT_COS_BOUND: f64 = 0.2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Embedding dimension d.
    pub dim: usize,
    /// Number of concepts M.
    pub num_concepts: usize,
    /// Number of classes K.
    pub num_classes: usize,
    /// Patch grid (rows, cols); N = rows * cols.
    pub grid: [usize; 2],
    /// Pixel side length of one patch.
    pub patch_px: usize,
    /// Planted region extent per concept, in grid cells (rows, cols).
    pub parts_per_concept: [usize; 2],
    /// Per-coordinate noise std added to planted patches and the global feature.
    pub noise_std: f64,
    /// Probability that a train / test_id sample's background carries the
    /// class background direction.
    pub bg_bias: f64,
    /// Same probability for test_ood samples.
    pub bg_bias_ood: f64,
    /// Samples generated per class, per split.
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            num_concepts: 6,
            num_classes: 4,
            grid: [6, 6],
            patch_px: 14,
            parts_per_concept: [2, 2],
            noise_std: 0.05,
            bg_bias: 0.0,
            bg_bias_ood: 0.0,
            samples_per_class: 50,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn num_patches(&self) -> usize {
        self.grid[0] * self.grid[1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_concepts == 0 || self.num_classes == 0 {
            return Err(Error::Config("d, M, K must all be positive".into()));
        }
        if self.grid[0] == 0 || self.grid[1] == 0 || self.patch_px == 0 {
            return Err(Error::Config("grid dims and patch_px must be positive".into()));
        }
        if self.parts_per_concept[0] == 0 || self.parts_per_concept[1] == 0 {
            return Err(Error::Config("part extent must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bg_bias) || !(0.0..=1.0).contains(&self.bg_bias_ood) {
            return Err(Error::Config("bg_bias must lie in [0, 1]".into()));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(Error::Config("noise_std must be finite and >= 0".into()));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be positive".into()));
        }
        if self.parts_per_concept[0] > self.grid[0] || self.parts_per_concept[1] > self.grid[1] {
            return Err(Error::Config(format!(
                "part extent {:?} exceeds grid {:?}",
                self.parts_per_concept, self.grid
            )));
        }
        let part_area = self.parts_per_concept[0] * self.parts_per_concept[1];
        if self.num_concepts * part_area > self.num_patches() {
            return Err(Error::Config(format!(
                "planted regions exceed grid capacity: {} concepts x {} cells > {} patches",
                self.num_concepts,
                part_area,
                self.num_patches()
            )));
        }
        if self.num_classes as u128 > (1u128 << self.num_concepts.min(127)) - 1 {
            return Err(Error::Config(format!(
                "{} distinct nonempty concept subsets cannot cover {} classes",
                self.num_concepts, self.num_classes
            )));
        }
        if self.num_concepts as u128 > (1u128 << self.num_classes.min(127)) - 1 {
            return Err(Error::Config(format!(
                "{} classes cannot give {} concepts distinct usage patterns",
                self.num_classes, self.num_concepts
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub bank: ConceptBank,
    pub train: Vec<Sample>,
    pub test_id: Vec<Sample>,
    pub test_ood: Vec<Sample>,
}

impl SynthDataset {
    /// All samples in manifest order: train, test_id, test_ood.
    pub fn all_samples(&self) -> Vec<Sample> {
        let mut all = self.train.clone();
        all.extend(self.test_id.iter().cloned());
        all.extend(self.test_ood.iter().cloned());
        all
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    let mut v = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
    let norm = v.dot(&v).sqrt();
    if norm > 1e-12 {
        v /= norm;
    }
    v
}

fn draw_concepts(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Result<Array2<f64>> {
    let mut rows: Vec<Array1<f64>> = Vec::with_capacity(cfg.num_concepts);
    let mut tries = 0usize;
    while rows.len() < cfg.num_concepts {
        tries += 1;
        if tries > 20_000 {
            return Err(Error::Config(format!(
                "could not draw {} concepts with pairwise |cos| <= {} at d={}",
                cfg.num_concepts, CONCEPT_COS_BOUND, cfg.dim
            )));
        }
        let v = unit_gaussian(rng, cfg.dim);
        if rows.iter().all(|u| u.dot(&v).abs() <= CONCEPT_COS_BOUND) {
            rows.push(v);
        }
    }
    let mut concepts = Array2::zeros((cfg.num_concepts, cfg.dim));
    for (i, row) in rows.iter().enumerate() {
        concepts.row_mut(i).assign(row);
    }
    Ok(concepts)
}

/// Class-level label matrix. Rows (class concept sets) are distinct and
/// nonempty; columns (concept usage patterns) are distinct and nonempty too,
/// so every concept is identifiable from the labels alone — two concepts
/// that co-occur in every class would have interchangeable localizations.
fn draw_labels(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Result<Array2<f64>> {
    let (k, m) = (cfg.num_classes, cfg.num_concepts);
    'outer: for _ in 0..10_000 {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
        for _ in 0..k {
            let mut tries = 0;
            loop {
                tries += 1;
                if tries > 10_000 {
                    continue 'outer;
                }
                let row: Vec<f64> =
                    (0..m).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
                if row.iter().sum::<f64>() == 0.0 || rows.contains(&row) {
                    continue;
                }
                rows.push(row);
                break;
            }
        }
        let distinct_rows = rows.iter().enumerate().all(|(i, r)| rows[..i].iter().all(|p| p != r));
        let column = |j: usize| -> Vec<f64> { rows.iter().map(|r| r[j]).collect() };
        let columns_ok = (0..m).all(|j| {
            let col = column(j);
            col.iter().sum::<f64>() > 0.0 && (0..j).all(|l| column(l) != col)
        });
        let capacity_ok = rows.iter().all(|r| {
            r.iter().sum::<f64>() as usize * cfg.parts_per_concept[0] * cfg.parts_per_concept[1]
                <= cfg.num_patches()
        });
        if distinct_rows && columns_ok && capacity_ok {
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            return Ok(Array2::from_shape_vec((k, m), flat).expect("label shape"));
        }
    }
    Err(Error::Config(
        "could not draw an identifiable, capacity-respecting label matrix".into(),
    ))
}

/// Place one region per active concept without overlaps; returns the
/// concept occupying each grid cell, plus boxes in pixels.
fn place_parts(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    active: &[usize],
) -> Result<(Vec<Option<usize>>, Vec<(usize, (usize, usize, usize, usize))>)> {
    let (h, w) = (cfg.grid[0], cfg.grid[1]);
    let (pr, pc) = (cfg.parts_per_concept[0], cfg.parts_per_concept[1]);
    'attempt: for _ in 0..200 {
        let mut cell: Vec<Option<usize>> = vec![None; h * w];
        let mut boxes = Vec::with_capacity(active.len());
        for &j in active {
            let mut anchors = Vec::new();
            for r in 0..=(h - pr) {
                for c in 0..=(w - pc) {
                    let free = (r..r + pr)
                        .all(|rr| (c..c + pc).all(|cc| cell[rr * w + cc].is_none()));
                    if free {
                        anchors.push((r, c));
                    }
                }
            }
            if anchors.is_empty() {
                continue 'attempt;
            }
            let (r, c) = anchors[rng.random_range(0..anchors.len())];
            for rr in r..r + pr {
                for cc in c..c + pc {
                    cell[rr * w + cc] = Some(j);
                }
            }
            boxes.push((
                j,
                (
                    c * cfg.patch_px,
                    r * cfg.patch_px,
                    (c + pc) * cfg.patch_px,
                    (r + pr) * cfg.patch_px,
                ),
            ));
        }
        return Ok((cell, boxes));
    }
    Err(Error::Config(
        "could not place planted regions without overlap; grid too fragmented".into(),
    ))
}

fn make_sample(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    id: String,
    split: Split,
    class: usize,
    labels: &Array2<f64>,
    concepts: &Array2<f64>,
    bg_dirs: &Array2<f64>,
    bias_prob: f64,
) -> Result<Sample> {
    let d = cfg.dim;
    let n = cfg.num_patches();
    let contaminated = rng.random_bool(bias_prob);
    let active: Vec<usize> = (0..cfg.num_concepts).filter(|&j| labels[[class, j]] == 1.0).collect();
    let (cell, part_boxes) = place_parts(rng, cfg, &active)?;

    let bg_scale = 1.0 / (d as f64).sqrt();
    let mut patches = Array2::zeros((n, d));
    for i in 0..n {
        let mut row = patches.row_mut(i);
        match cell[i] {
            Some(j) => {
                for c in 0..d {
                    let eta: f64 = rng.sample(StandardNormal);
                    row[c] = concepts[[j, c]] + cfg.noise_std * eta;
                }
            }
            None if contaminated => {
                for c in 0..d {
                    let eta: f64 = rng.sample(StandardNormal);
                    row[c] = bg_dirs[[class, c]] + cfg.noise_std * eta;
                }
            }
            None => {
                for c in 0..d {
                    let eta: f64 = rng.sample(StandardNormal);
                    row[c] = bg_scale * eta;
                }
            }
        }
    }

    // Global feature: normalized mean of the planted foreground, plus noise.
    let mut global = Array1::<f64>::zeros(d);
    let mut fg_count = 0usize;
    for i in 0..n {
        if cell[i].is_some() {
            global += &patches.row(i);
            fg_count += 1;
        }
    }
    if fg_count > 0 {
        global /= fg_count as f64;
    }
    let norm = global.dot(&global).sqrt();
    if norm > 1e-12 {
        global /= norm;
    }
    for c in 0..d {
        let eta: f64 = rng.sample(StandardNormal);
        global[c] += cfg.noise_std * eta;
    }

    Ok(Sample {
        id,
        split,
        bundle: EmbeddingBundle::new(patches, global, (cfg.grid[0], cfg.grid[1]), cfg.patch_px)?,
        concept_label: labels.row(class).to_owned(),
        class_label: class,
        part_boxes,
    })
}

/// Generate a full synthetic dataset: bank plus train / test_id / test_ood
/// splits. Deterministic given the config.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let concepts = draw_concepts(&mut rng, cfg)?;
    let bg_dirs = {
        let mut dirs = Array2::zeros((cfg.num_classes, cfg.dim));
        for k in 0..cfg.num_classes {
            dirs.row_mut(k).assign(&unit_gaussian(&mut rng, cfg.dim));
        }
        dirs
    };
    let labels = draw_labels(&mut rng, cfg)?;
    let names: Vec<String> = (0..cfg.num_concepts).map(|j| format!("concept_{j:02}")).collect();
    let bank = ConceptBank::new(concepts.clone(), names, labels.clone())?;

    let mut splits: Vec<Vec<Sample>> = Vec::with_capacity(3);
    for (split, prefix, bias) in [
        (Split::Train, "train", cfg.bg_bias),
        (Split::TestId, "id", cfg.bg_bias),
        (Split::TestOod, "ood", cfg.bg_bias_ood),
    ] {
        let mut samples = Vec::with_capacity(cfg.num_classes * cfg.samples_per_class);
        let mut index = 0usize;
        for class in 0..cfg.num_classes {
            for _ in 0..cfg.samples_per_class {
                let id = format!("{prefix}_{index:04}");
                samples.push(make_sample(
                    &mut rng, cfg, id, split, class, &labels, &concepts, &bg_dirs, bias,
                )?);
                index += 1;
            }
        }
        splits.push(samples);
    }
    let test_ood = splits.pop().unwrap();
    let test_id = splits.pop().unwrap();
    let train = splits.pop().unwrap();

    Ok(SynthDataset {
        bank,
        train,
        test_id,
        test_ood,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            dim: 12,
            num_concepts: 4,
            num_classes: 3,
            grid: [4, 4],
            patch_px: 14,
            parts_per_concept: [2, 2],
            noise_std: 0.05,
            bg_bias: 0.0,
            bg_bias_ood: 0.0,
            samples_per_class: 4,
            seed: 11,
        }
    }

    #[test]
    fn zero_noise_single_concept_plants_exactly() {
        let cfg = SynthConfig {
            dim: 8,
            num_concepts: 1,
            num_classes: 1,
            grid: [3, 3],
            parts_per_concept: [1, 1],
            noise_std: 0.0,
            samples_per_class: 1,
            seed: 3,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let sample = &ds.train[0];
        assert_eq!(sample.part_boxes.len(), 1);
        let (j, (x0, y0, x1, y1)) = sample.part_boxes[0];
        assert_eq!(j, 0);
        assert_eq!((x1 - x0, y1 - y0), (cfg.patch_px, cfg.patch_px));
        let (r, c) = (y0 / cfg.patch_px, x0 / cfg.patch_px);
        let i = r * 3 + c;
        for col in 0..cfg.dim {
            assert_eq!(sample.bundle.patches[[i, col]], ds.bank.concepts[[0, col]]);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SynthConfig {
            seed: 7,
            samples_per_class: 3,
            ..small_cfg()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.bank, b.bank);
        for (sa, sb) in a.all_samples().iter().zip(b.all_samples().iter()) {
            assert_eq!(sa, sb);
        }
    }

    #[test]
    fn concepts_are_near_orthogonal() {
        let ds = generate_synthetic(&small_cfg()).unwrap();
        let c = &ds.bank.concepts;
        for i in 0..c.nrows() {
            let ni = c.row(i).dot(&c.row(i)).sqrt();
            assert!((ni - 1.0).abs() < 1e-12);
            for j in 0..i {
                let cos = c.row(i).dot(&c.row(j));
                assert!(cos.abs() <= CONCEPT_COS_BOUND + 1e-12, "|cos| = {}", cos.abs());
            }
        }
    }

    #[test]
    fn planted_boxes_never_overlap_and_match_labels() {
        let ds = generate_synthetic(&small_cfg()).unwrap();
        for sample in ds.all_samples() {
            let planted: Vec<usize> = sample.part_boxes.iter().map(|&(j, _)| j).collect();
            for j in 0..ds.bank.num_concepts() {
                assert_eq!(
                    sample.concept_label[j] == 1.0,
                    planted.contains(&j),
                    "sample {} concept {}",
                    sample.id,
                    j
                );
            }
            for (a, &(_, ba)) in sample.part_boxes.iter().enumerate() {
                for &(_, bb) in sample.part_boxes.iter().skip(a + 1) {
                    let disjoint = ba.2 <= bb.0 || bb.2 <= ba.0 || ba.3 <= bb.1 || bb.3 <= ba.1;
                    assert!(disjoint, "sample {} boxes overlap: {ba:?} {bb:?}", sample.id);
                }
            }
        }
    }

    #[test]
    fn unbiased_backgrounds_match_across_splits() {
        // bg_bias = 0 on both sides: background patches in train and test_ood
        // come from the same distribution. Two-sample z test on the mean of
        // all background-patch coordinates.
        let cfg = SynthConfig {
            samples_per_class: 8,
            ..small_cfg()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let bg_values = |samples: &[Sample]| -> Vec<f64> {
            let mut out = Vec::new();
            for s in samples {
                let fg_cells: Vec<(usize, usize, usize, usize)> =
                    s.part_boxes.iter().map(|&(_, b)| b).collect();
                let (h, w) = s.bundle.grid;
                for r in 0..h {
                    for c in 0..w {
                        let px = (c * s.bundle.patch_px, r * s.bundle.patch_px);
                        let in_fg = fg_cells
                            .iter()
                            .any(|&(x0, y0, x1, y1)| px.0 >= x0 && px.0 < x1 && px.1 >= y0 && px.1 < y1);
                        if !in_fg {
                            out.extend(s.bundle.patches.row(r * w + c).iter().copied());
                        }
                    }
                }
            }
            out
        };
        let a = bg_values(&ds.train);
        let b = bg_values(&ds.test_ood);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64], m: f64| v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
        let (ma, mb) = (mean(&a), mean(&b));
        let z = (ma - mb).abs() / (var(&a, ma) / a.len() as f64 + var(&b, mb) / b.len() as f64).sqrt();
        assert!(z < 5.0, "two-sample z = {z}");
    }

    #[test]
    fn capacity_overflow_is_config_error() {
        let cfg = SynthConfig {
            num_concepts: 5,
            grid: [3, 3],
            parts_per_concept: [2, 2],
            ..small_cfg()
        };
        match generate_synthetic(&cfg) {
            Err(Error::Config(msg)) => assert!(msg.contains("capacity"), "{msg}"),
            other => panic!("expected config error, got {:?}", other.map(|_| ())),
        }
    }
}
