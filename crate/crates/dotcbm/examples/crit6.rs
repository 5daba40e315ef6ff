use dotcbm::data::{generate_synthetic, SynthConfig};
use dotcbm::eval::{evaluate_split, BoxMode};
use dotcbm::nn::{adapter_forward, Mode};
use dotcbm::pipeline::*;
use dotcbm::ot::cost_matrix;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1e-2);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(60);
    let eps: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let batch: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(32);
    let l12: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let dropout: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let priors: bool = args.get(7).map(|s| s != "off").unwrap_or(true);

    let scfg = SynthConfig { seed: std::env::var("DSEED").ok().and_then(|v| v.parse().ok()).unwrap_or(42), ..SynthConfig::default() }; // d=16 6x6 M=6 K=4 noise .05 spc=50
    let ds = generate_synthetic(&scfg).unwrap();
    let cfg = TrainConfig {
        base_lr: lr, batch_size: batch, max_epochs: epochs,
        seed: std::env::var("TSEED").ok().and_then(|v| v.parse().ok()).unwrap_or(7),
        dropout_rate: dropout, epsilon: eps,
        lambda1: std::env::var("L1").ok().and_then(|v| v.parse().ok()).unwrap_or(l12),
        lambda2: std::env::var("L2").ok().and_then(|v| v.parse().ok()).unwrap_or(l12),
        lambda3: std::env::var("L3").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0),
        priors_enabled: priors,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let s1 = stage1_train(&ds.bank, &ds.train, &cfg).unwrap();
    assert!(s1.aborted.is_none());
    let t1 = t0.elapsed();
    let s2 = stage2_train(&ds.bank, &ds.train, &s1.model, &cfg).unwrap();
    assert!(s2.aborted.is_none());
    let t2 = t0.elapsed();
    let model = TrainedModel {
        stage1: s1.model, classifier: s2.classifier, config: cfg.clone(),
        concepts: ds.bank.concepts.clone(), concept_names: ds.bank.names.clone(),
    };

    // concept F1 with per-concept thresholds calibrated on train
    let (t_eval, _) = adapter_forward(&model.stage1.textual, &ds.bank.concepts, Mode::Eval, None).unwrap();
    let collect = |samples: &[dotcbm::data::Sample]| -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut scores = vec![Vec::new(); 6];
        let mut labels = vec![Vec::new(); 6];
        for s in samples {
            let f = forward_sample(&model.stage1.visual, &t_eval, &model.stage1.gamma, &s.bundle, &cfg).unwrap();
            for j in 0..6 {
                scores[j].push(f.acts.a_hat[j]);
                labels[j].push(s.concept_label[j]);
            }
        }
        (scores, labels)
    };
    let (tr_s, tr_l) = collect(&ds.train);
    let thresholds: Vec<f64> = (0..6).map(|j| {
        let mut cands: Vec<f64> = tr_s[j].clone();
        cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut best = (f64::NEG_INFINITY, 0.5);
        for w in cands.windows(2) {
            let t = 0.5 * (w[0] + w[1]);
            let (mut tp, mut fp, mut fnn) = (0.0, 0.0, 0.0);
            for (s, l) in tr_s[j].iter().zip(tr_l[j].iter()) {
                let pred = *s >= t;
                if pred && *l == 1.0 { tp += 1.0; }
                if pred && *l == 0.0 { fp += 1.0; }
                if !pred && *l == 1.0 { fnn += 1.0; }
            }
            let f1 = if tp > 0.0 { 2.0 * tp / (2.0 * tp + fp + fnn) } else { 0.0 };
            if f1 > best.0 { best = (f1, t); }
        }
        best.1
    }).collect();
    let (te_s, te_l) = collect(&ds.test_id);
    let (mut tp, mut fp, mut fnn) = (0.0, 0.0, 0.0);
    for j in 0..6 {
        for (s, l) in te_s[j].iter().zip(te_l[j].iter()) {
            let pred = *s >= thresholds[j];
            if pred && *l == 1.0 { tp += 1.0; }
            if pred && *l == 0.0 { fp += 1.0; }
            if !pred && *l == 1.0 { fnn += 1.0; }
        }
    }
    let f1 = 2.0 * tp / (2.0 * tp + fp + fnn);

    // Association diagonality: planted-content x adapted-concept mean cos.
    let mut assoc = vec![vec![(0.0f64, 0usize); 6]; 6];
    for s in ds.train.iter() {
        let (p_ad, _) = adapter_forward(&model.stage1.visual, &s.bundle.patches, Mode::Eval, None).unwrap();
        let d = cost_matrix(&p_ad, &t_eval).unwrap();
        let (h, w) = s.bundle.grid;
        let px = s.bundle.patch_px;
        let mut owner = vec![None::<usize>; h * w];
        for &(j, (x0, y0, x1, y1)) in &s.part_boxes {
            for r in y0 / px..y1 / px { for c in x0 / px..x1 / px { owner[r * w + c] = Some(j); } }
        }
        for i in 0..h * w {
            if let Some(j) = owner[i] {
                for l in 0..6 {
                    assoc[j][l].0 += 1.0 - d[[i, l]];
                    assoc[j][l].1 += 1;
                }
            }
        }
    }
    let mut diag_score = 0.0;
    for j in 0..6 {
        let own = assoc[j][j].0 / assoc[j][j].1.max(1) as f64;
        let best_other = (0..6).filter(|&l| l != j)
            .map(|l| assoc[j][l].0 / assoc[j][l].1.max(1) as f64)
            .fold(f64::NEG_INFINITY, f64::max);
        diag_score += (own - best_other) / 6.0;
    }

    let id = evaluate_split(&model, &ds.bank, &ds.test_id, BoxMode::AllCells).unwrap();
    let t3 = t0.elapsed();
    let _ = t3;
    println!("lr={lr} ep={epochs} eps={eps} b={batch} l12={l12} drop={dropout} priors={priors} | acc={:.3} f1={f1:.3} map50={:.3} diag={diag_score:+.3} | t1={t1:?} t2={:?}",
             id.accuracy, id.map50.unwrap(), t2 - t1);
}
