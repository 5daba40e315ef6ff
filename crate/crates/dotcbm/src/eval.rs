//! Metrics: box extraction from inversion masks, IoU, per-concept average
//! precision, mAP@0.5, classification accuracy, and the prior-ablation report.
//!
//! Box protocol: threshold a mask at 0.6 of its peak, take the tight pixel
//! box over all cells at or above the threshold (optionally only the largest
//! connected component), and score the detection with the concept's
//! activation. One detection per (sample, concept with ground truth).

use std::collections::BTreeMap;

use ndarray::Array1;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{ConceptBank, Sample};
use crate::error::{Error, Result};
use crate::nn::{adapter_forward, Mode};
use crate::ot::{inversion_mask, InversionMask};
use crate::pipeline::{forward_sample, TrainedModel};

/// Axis-aligned pixel rectangle, exclusive max edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PixelBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl PixelBox {
    pub fn area(&self) -> usize {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

/// How above-threshold cells are merged into a box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoxMode {
    /// Tight box over every cell at or above the threshold.
    #[default]
    AllCells,
    /// Tight box over the largest 4-connected component only.
    LargestComponent,
}

/// Threshold a mask at 0.6 of its peak and enclose the selected cells.
///
/// Returns `None` for an all-zero mask (a no-detection).
pub fn mask_to_box(mask: &InversionMask, patch_px: usize, mode: BoxMode) -> Option<PixelBox> {
    let peak = mask.weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if peak <= 0.0 {
        return None;
    }
    let threshold = 0.6 * peak;
    let (rows, cols) = mask.grid;
    let selected: Vec<bool> = mask.weights.iter().map(|&w| w >= threshold).collect();

    let cells: Vec<usize> = match mode {
        BoxMode::AllCells => selected
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
            .collect(),
        BoxMode::LargestComponent => largest_component(&selected, rows, cols),
    };
    if cells.is_empty() {
        return None;
    }
    let mut row_min = usize::MAX;
    let mut row_max = 0;
    let mut col_min = usize::MAX;
    let mut col_max = 0;
    for i in cells {
        let (r, c) = (i / cols, i % cols);
        row_min = row_min.min(r);
        row_max = row_max.max(r);
        col_min = col_min.min(c);
        col_max = col_max.max(c);
    }
    Some(PixelBox {
        x_min: col_min * patch_px,
        y_min: row_min * patch_px,
        x_max: (col_max + 1) * patch_px,
        y_max: (row_max + 1) * patch_px,
    })
}

fn largest_component(selected: &[bool], rows: usize, cols: usize) -> Vec<usize> {
    let mut seen = vec![false; selected.len()];
    let mut best = Vec::new();
    for start in 0..selected.len() {
        if !selected[start] || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        let mut component = Vec::new();
        seen[start] = true;
        while let Some(i) = stack.pop() {
            component.push(i);
            let (r, c) = (i / cols, i % cols);
            let mut push = |rr: usize, cc: usize| {
                let idx = rr * cols + cc;
                if selected[idx] && !seen[idx] {
                    seen[idx] = true;
                    stack.push(idx);
                }
            };
            if r > 0 {
                push(r - 1, c);
            }
            if r + 1 < rows {
                push(r + 1, c);
            }
            if c > 0 {
                push(r, c - 1);
            }
            if c + 1 < cols {
                push(r, c + 1);
            }
        }
        if component.len() > best.len() {
            best = component;
        }
    }
    best
}

/// Intersection over union of two pixel boxes; 0 when disjoint.
pub fn iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let ix = a.x_max.min(b.x_max).saturating_sub(a.x_min.max(b.x_min));
    let iy = a.y_max.min(b.y_max).saturating_sub(a.y_min.max(b.y_min));
    let inter = (ix * iy) as f64;
    let union = (a.area() + b.area()) as f64 - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// One predicted box for a (sample, concept) pair with ground truth present.
#[derive(Debug, Clone)]
pub struct DetectionRecord {
    pub sample_id: String,
    pub concept: usize,
    /// `None` records a no-detection (all-zero mask): an automatic miss.
    pub predicted: Option<PixelBox>,
    /// Activation score of the concept on this sample.
    pub score: f64,
}

/// Ground-truth box for a (sample, concept) pair.
#[derive(Debug, Clone)]
pub struct GroundTruthBox {
    pub sample_id: String,
    pub concept: usize,
    pub box_px: PixelBox,
}

/// Per-concept average precision at IoU >= 0.5 and their mean.
///
/// Detections are ranked by score (descending); a detection is a true
/// positive if it overlaps an unmatched ground-truth box of its sample and
/// concept with IoU >= 0.5. AP integrates precision over recall steps; mAP
/// averages over concepts with at least one ground-truth box.
pub fn map_at_50(
    detections: &[DetectionRecord],
    ground_truth: &[GroundTruthBox],
) -> Result<(BTreeMap<usize, f64>, f64)> {
    if ground_truth.is_empty() {
        return Err(Error::EvalInput("no ground-truth boxes".into()));
    }
    let mut per_concept = BTreeMap::new();
    let concepts: std::collections::BTreeSet<usize> =
        ground_truth.iter().map(|g| g.concept).collect();
    for &concept in &concepts {
        let gts: Vec<&GroundTruthBox> =
            ground_truth.iter().filter(|g| g.concept == concept).collect();
        let mut dets: Vec<&DetectionRecord> =
            detections.iter().filter(|d| d.concept == concept).collect();
        dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));

        let mut matched = vec![false; gts.len()];
        let mut tp = 0usize;
        let mut ap = 0.0;
        let mut last_recall = 0.0;
        for (rank, det) in dets.iter().enumerate() {
            let mut hit = false;
            if let Some(pred) = &det.predicted {
                for (gi, gt) in gts.iter().enumerate() {
                    if matched[gi] || gt.sample_id != det.sample_id {
                        continue;
                    }
                    if iou(pred, &gt.box_px) >= 0.5 {
                        matched[gi] = true;
                        hit = true;
                        break;
                    }
                }
            }
            if hit {
                tp += 1;
                let recall = tp as f64 / gts.len() as f64;
                let precision = tp as f64 / (rank + 1) as f64;
                ap += (recall - last_recall) * precision;
                last_recall = recall;
            }
        }
        per_concept.insert(concept, ap);
    }
    let map = per_concept.values().sum::<f64>() / per_concept.len() as f64;
    Ok((per_concept, map))
}

/// Fraction of predictions whose argmax matches the label (lowest index on
/// ties).
pub fn accuracy(class_probs: &[Array1<f64>], labels: &[usize]) -> Result<f64> {
    if class_probs.is_empty() || class_probs.len() != labels.len() {
        return Err(Error::EvalInput("predictions and labels must align and be nonempty".into()));
    }
    let correct = class_probs
        .iter()
        .zip(labels.iter())
        .filter(|(probs, &y)| {
            let mut best = 0usize;
            for (k, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = k;
                }
            }
            best == y
        })
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Everything the eval subcommand reports for one split.
#[derive(Debug, Clone, Serialize)]
pub struct SplitMetrics {
    pub accuracy: f64,
    pub map50: Option<f64>,
    pub samples: usize,
}

/// Run the model over a sample set and compute accuracy (and mAP@0.5 when
/// ground-truth boxes exist).
pub fn evaluate_split(
    model: &TrainedModel,
    bank: &ConceptBank,
    samples: &[Sample],
    box_mode: BoxMode,
) -> Result<SplitMetrics> {
    if samples.is_empty() {
        return Err(Error::EvalInput("empty evaluation split".into()));
    }
    let (t_eval, _) = adapter_forward(&model.stage1.textual, &bank.concepts, Mode::Eval, None)?;
    let per_sample: Vec<(Array1<f64>, Vec<DetectionRecord>, Vec<GroundTruthBox>)> = samples
        .par_iter()
        .map(|sample| {
            let f = forward_sample(
                &model.stage1.visual,
                &t_eval,
                &model.stage1.gamma,
                &sample.bundle,
                &model.config,
            )?;
            let logits = model.classifier.logits(&f.acts.a_hat);
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut probs = logits.mapv(|l| (l - max).exp());
            let z = probs.sum();
            probs /= z;

            let mut dets = Vec::new();
            let mut gts = Vec::new();
            for &(concept, (x0, y0, x1, y1)) in &sample.part_boxes {
                gts.push(GroundTruthBox {
                    sample_id: sample.id.clone(),
                    concept,
                    box_px: PixelBox {
                        x_min: x0,
                        y_min: y0,
                        x_max: x1,
                        y_max: y1,
                    },
                });
                let mask = inversion_mask(&f.plan, concept, sample.bundle.grid)?;
                dets.push(DetectionRecord {
                    sample_id: sample.id.clone(),
                    concept,
                    predicted: mask_to_box(&mask, sample.bundle.patch_px, box_mode),
                    score: f.acts.a_hat[concept],
                });
            }
            Ok((probs, dets, gts))
        })
        .collect::<Result<_>>()?;

    let probs: Vec<Array1<f64>> = per_sample.iter().map(|(p, _, _)| p.clone()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.class_label).collect();
    let acc = accuracy(&probs, &labels)?;

    let detections: Vec<DetectionRecord> =
        per_sample.iter().flat_map(|(_, d, _)| d.clone()).collect();
    let ground_truth: Vec<GroundTruthBox> =
        per_sample.iter().flat_map(|(_, _, g)| g.clone()).collect();
    let map50 = if ground_truth.is_empty() {
        None
    } else {
        Some(map_at_50(&detections, &ground_truth)?.1)
    };

    Ok(SplitMetrics {
        accuracy: acc,
        map50,
        samples: samples.len(),
    })
}

/// Ablation report: ID/OOD accuracy and OOD localization for a with-priors
/// and a without-priors checkpoint trained on the same data and seed.
#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub config: String,
    pub metric: String,
    pub value: f64,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("config,metric,value\n");
        for row in &self.rows {
            out.push_str(&format!("{},{},{}\n", row.config, row.metric, row.value));
        }
        out
    }

    pub fn value(&self, config: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.config == config && r.metric == metric)
            .map(|r| r.value)
    }

    /// Human-readable table with per-metric deltas (with − without).
    pub fn to_table(&self) -> String {
        let metrics = ["acc_id", "acc_ood", "map50_ood"];
        let mut out = String::from("metric        with_priors  without_priors  delta\n");
        for metric in metrics {
            let with = self.value("with_priors", metric).unwrap_or(f64::NAN);
            let without = self.value("without_priors", metric).unwrap_or(f64::NAN);
            out.push_str(&format!(
                "{metric:<13} {with:>11.4} {without:>15.4} {:>+7.4}\n",
                with - without
            ));
        }
        out
    }
}

/// Evaluate both checkpoints on the ID and OOD splits.
pub fn ablation_report(
    bank: &ConceptBank,
    test_id: &[Sample],
    test_ood: &[Sample],
    with_priors: &TrainedModel,
    without_priors: &TrainedModel,
    box_mode: BoxMode,
) -> Result<AblationReport> {
    for (name, model) in [("with_priors", with_priors), ("without_priors", without_priors)] {
        if model.concepts.nrows() != bank.num_concepts()
            || model.classifier.weight.nrows() != bank.num_classes()
        {
            return Err(Error::EvalInput(format!(
                "{name} checkpoint does not match the dataset (M, K)"
            )));
        }
    }
    let mut rows = Vec::new();
    for (name, model) in [("with_priors", with_priors), ("without_priors", without_priors)] {
        let id_metrics = evaluate_split(model, bank, test_id, box_mode)?;
        let ood_metrics = evaluate_split(model, bank, test_ood, box_mode)?;
        rows.push(AblationRow {
            config: name.into(),
            metric: "acc_id".into(),
            value: id_metrics.accuracy,
        });
        rows.push(AblationRow {
            config: name.into(),
            metric: "acc_ood".into(),
            value: ood_metrics.accuracy,
        });
        rows.push(AblationRow {
            config: name.into(),
            metric: "map50_ood".into(),
            value: ood_metrics.map50.ok_or_else(|| {
                Error::EvalInput("OOD split has no ground-truth boxes for mAP".into())
            })?,
        });
    }
    Ok(AblationReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(values: Vec<f64>, grid: (usize, usize)) -> InversionMask {
        InversionMask {
            weights: Array1::from_vec(values),
            grid,
            concept: 0,
        }
    }

    #[test]
    fn box_from_peak_threshold() {
        // 2x2 grid, peak 0.9 at (row 0, col 1): threshold 0.54 selects only it.
        let m = mask(vec![0.1, 0.9, 0.2, 0.3], (2, 2));
        let b = mask_to_box(&m, 14, BoxMode::AllCells).unwrap();
        assert_eq!(
            b,
            PixelBox {
                x_min: 14,
                y_min: 0,
                x_max: 28,
                y_max: 14
            }
        );
    }

    #[test]
    fn uniform_mask_selects_everything() {
        let m = mask(vec![0.25; 4], (2, 2));
        let b = mask_to_box(&m, 10, BoxMode::AllCells).unwrap();
        assert_eq!(
            b,
            PixelBox {
                x_min: 0,
                y_min: 0,
                x_max: 20,
                y_max: 20
            }
        );
    }

    #[test]
    fn single_cell_mask_gives_its_box() {
        let m = mask(vec![0.0, 0.0, 0.7, 0.0], (2, 2));
        let b = mask_to_box(&m, 14, BoxMode::AllCells).unwrap();
        assert_eq!(
            b,
            PixelBox {
                x_min: 0,
                y_min: 14,
                x_max: 14,
                y_max: 28
            }
        );
    }

    #[test]
    fn zero_mask_is_no_detection() {
        let m = mask(vec![0.0; 4], (2, 2));
        assert!(mask_to_box(&m, 14, BoxMode::AllCells).is_none());
    }

    #[test]
    fn box_is_invariant_to_positive_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values: Vec<f64> = (0..12).map(|_| rng.random::<f64>()).collect();
        let a = mask_to_box(&mask(values.clone(), (3, 4)), 7, BoxMode::AllCells);
        let scaled: Vec<f64> = values.iter().map(|v| v * 37.5).collect();
        let b = mask_to_box(&mask(scaled, (3, 4)), 7, BoxMode::AllCells);
        assert_eq!(a, b);
    }

    #[test]
    fn largest_component_mode_drops_satellites() {
        // Two above-threshold blobs; the 2-cell component wins.
        let m = mask(vec![0.9, 0.0, 0.0, 0.85, 0.0, 0.0, 0.0, 0.8, 0.0], (3, 3));
        let all = mask_to_box(&m, 10, BoxMode::AllCells).unwrap();
        assert_eq!(all.area(), 600);
        let largest = mask_to_box(&m, 10, BoxMode::LargestComponent).unwrap();
        assert_eq!(
            largest,
            PixelBox {
                x_min: 0,
                y_min: 0,
                x_max: 10,
                y_max: 20
            }
        );
    }

    #[test]
    fn iou_fixtures() {
        let a = PixelBox {
            x_min: 0,
            y_min: 0,
            x_max: 2,
            y_max: 2,
        };
        assert_eq!(iou(&a, &a), 1.0);
        let disjoint = PixelBox {
            x_min: 5,
            y_min: 5,
            x_max: 7,
            y_max: 7,
        };
        assert_eq!(iou(&a, &disjoint), 0.0);
        let b = PixelBox {
            x_min: 1,
            y_min: 0,
            x_max: 3,
            y_max: 2,
        };
        assert_relative_eq!(iou(&a, &b), 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(iou(&b, &a), iou(&a, &b), epsilon = 1e-15);
    }

    fn det(sample: &str, concept: usize, score: f64, b: Option<PixelBox>) -> DetectionRecord {
        DetectionRecord {
            sample_id: sample.into(),
            concept,
            predicted: b,
            score,
        }
    }

    fn gt(sample: &str, concept: usize, b: PixelBox) -> GroundTruthBox {
        GroundTruthBox {
            sample_id: sample.into(),
            concept,
            box_px: b,
        }
    }

    fn unit_box(at: usize) -> PixelBox {
        PixelBox {
            x_min: at,
            y_min: 0,
            x_max: at + 10,
            y_max: 10,
        }
    }

    #[test]
    fn ap_perfect_and_zero() {
        let g = vec![gt("s0", 0, unit_box(0)), gt("s1", 0, unit_box(0))];
        let d = vec![
            det("s0", 0, 0.9, Some(unit_box(0))),
            det("s1", 0, 0.8, Some(unit_box(0))),
        ];
        let (_, map) = map_at_50(&d, &g).unwrap();
        assert_eq!(map, 1.0);

        let d = vec![
            det("s0", 0, 0.9, Some(unit_box(100))),
            det("s1", 0, 0.8, Some(unit_box(100))),
        ];
        let (_, map) = map_at_50(&d, &g).unwrap();
        assert_eq!(map, 0.0);
    }

    #[test]
    fn ap_hand_integration() {
        // One concept, 2 GT; ranked detections TP, FP, TP:
        // precision at the TPs is 1 and 2/3, recall steps 0.5 each.
        let g = vec![gt("s0", 0, unit_box(0)), gt("s2", 0, unit_box(0))];
        let d = vec![
            det("s0", 0, 0.9, Some(unit_box(0))),
            det("s1", 0, 0.8, Some(unit_box(0))), // no GT in s1: FP
            det("s2", 0, 0.7, Some(unit_box(0))),
        ];
        let (per_concept, map) = map_at_50(&d, &g).unwrap();
        assert_relative_eq!(per_concept[&0], 0.5 + 0.5 * (2.0 / 3.0), epsilon = 1e-12);
        assert_relative_eq!(map, 0.8333, max_relative = 1e-4);
    }

    #[test]
    fn ap_invariant_to_monotone_score_transforms() {
        let g: Vec<GroundTruthBox> = (0..6).map(|i| gt(&format!("s{i}"), 0, unit_box(0))).collect();
        let d: Vec<DetectionRecord> = (0..6)
            .map(|i| {
                let score = 0.3 + 0.1 * i as f64;
                let hit = i % 2 == 0;
                det(
                    &format!("s{i}"),
                    0,
                    score,
                    Some(unit_box(if hit { 0 } else { 100 })),
                )
            })
            .collect();
        let (_, map_a) = map_at_50(&d, &g).unwrap();
        let d2: Vec<DetectionRecord> = d
            .iter()
            .map(|r| DetectionRecord {
                score: (10.0 * r.score).exp(),
                ..r.clone()
            })
            .collect();
        let (_, map_b) = map_at_50(&d2, &g).unwrap();
        assert_relative_eq!(map_a, map_b, epsilon = 1e-12);
    }

    #[test]
    fn random_scores_concentrate_near_hit_rate_squared() {
        // With random ranking, hit probability p, and recall capped at the
        // hit fraction, expected AP is about p^2 for large n.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = 0.5;
        let n = 4000;
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for i in 0..n {
            let sample = format!("s{i}");
            gts.push(gt(&sample, 0, unit_box(0)));
            let hit = rng.random::<f64>() < p;
            dets.push(det(
                &sample,
                0,
                rng.random::<f64>(),
                Some(unit_box(if hit { 0 } else { 100 })),
            ));
        }
        let (_, map) = map_at_50(&dets, &gts).unwrap();
        assert!((map - p * p).abs() < 0.05, "mAP {map} vs expected {}", p * p);
    }

    #[test]
    fn missing_ground_truth_is_error() {
        let d = vec![det("s0", 0, 0.9, Some(unit_box(0)))];
        assert!(map_at_50(&d, &[]).is_err());
    }

    #[test]
    fn accuracy_counts() {
        let probs = vec![
            array![0.7, 0.3],
            array![0.2, 0.8],
            array![0.6, 0.4],
            array![0.9, 0.1],
        ];
        assert_eq!(accuracy(&probs, &[0, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&probs, &[1, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&probs, &[0, 1, 0, 1]).unwrap(), 0.75);
        // Ties break to the lowest index.
        let tied = vec![array![0.5, 0.5]];
        assert_eq!(accuracy(&tied, &[0]).unwrap(), 1.0);
        assert_eq!(accuracy(&tied, &[1]).unwrap(), 0.0);
    }
}
