use dotcbm::data::{generate_synthetic, SynthConfig};
use dotcbm::nn::{adapter_forward, Mode};
use dotcbm::ot::cost_matrix;
use dotcbm::pipeline::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1e-2);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(60);
    let eps: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let l12: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let scfg = SynthConfig { seed: 42, ..SynthConfig::default() };
    let ds = generate_synthetic(&scfg).unwrap();
    let cfg = TrainConfig {
        base_lr: lr, batch_size: 16, max_epochs: epochs, seed: 7,
        dropout_rate: 0.0, epsilon: eps, lambda1: l12, lambda2: l12, lambda3: 1.0,
        priors_enabled: std::env::args().nth(5).map(|s| s != "off").unwrap_or(true),
        ..TrainConfig::default()
    };
    let s1 = stage1_train(&ds.bank, &ds.train, &cfg).unwrap();
    let model = &s1.model;
    let (t_eval, _) = adapter_forward(&model.textual, &ds.bank.concepts, Mode::Eval, None).unwrap();

    // Alignment: cos(adapted planted patch for concept j, adapted concept j)
    // vs cos(bg, concept j) and cross-concept.
    let mut own = (0.0, 0usize);
    let mut cross = (0.0, 0usize);
    let mut bg = (0.0, 0usize);
    for s in ds.train.iter().take(40) {
        let (p_ad, _) = adapter_forward(&model.visual, &s.bundle.patches, Mode::Eval, None).unwrap();
        let d = cost_matrix(&p_ad, &t_eval).unwrap(); // 1 - cos
        let (h, w) = s.bundle.grid;
        let px = s.bundle.patch_px;
        let mut cell_owner = vec![None::<usize>; h * w];
        for &(j, (x0, y0, x1, y1)) in &s.part_boxes {
            for r in y0 / px..y1 / px {
                for c in x0 / px..x1 / px {
                    cell_owner[r * w + c] = Some(j);
                }
            }
        }
        for i in 0..h * w {
            for j in 0..6 {
                let cos = 1.0 - d[[i, j]];
                match cell_owner[i] {
                    Some(owner) if owner == j => { own.0 += cos; own.1 += 1; }
                    Some(_) => { cross.0 += cos; cross.1 += 1; }
                    None => { bg.0 += cos; bg.1 += 1; }
                }
            }
        }
    }
    println!("cos(planted_j, t_j) = {:.3}; cos(planted_l, t_j) = {:.3}; cos(bg, t_j) = {:.3}",
             own.0 / own.1 as f64, cross.0 / cross.1 as f64, bg.0 / bg.1 as f64);

    // Mask peaks vs planted boxes for 5 samples.
    for s in ds.train.iter().take(3) {
        let f = forward_sample(&model.visual, &t_eval, &model.gamma, &s.bundle, &cfg).unwrap();
        let (h, w) = s.bundle.grid;
        let px = s.bundle.patch_px;
        for &(j, (x0, y0, x1, y1)) in &s.part_boxes {
            let col = f.plan.q.column(j);
            let mut peak = 0usize;
            for i in 0..h * w { if col[i] > col[peak] { peak = i; } }
            let (pr, pc) = (peak / w, peak % w);
            let inside = pc * px >= x0 && pc * px < x1 && pr * px >= y0 && pr * px < y1;
            println!("  {} concept {j}: peak cell ({pr},{pc}) inside_gt={inside} peak={:.4} mean={:.4}",
                     s.id, col[peak], col.sum() / (h * w) as f64);
        }
    }

    // Class-mean geometry of cached activations.
    let mut acts = Vec::new();
    for s in &ds.train {
        let f = forward_sample(&model.visual, &t_eval, &model.gamma, &s.bundle, &cfg).unwrap();
        acts.push((f.acts.a_hat, s.class_label));
    }
    let mut means = vec![ndarray::Array1::<f64>::zeros(6); 4];
    let mut counts = vec![0.0; 4];
    for (a, y) in &acts { means[*y] = &means[*y] + a; counts[*y] += 1.0; }
    for k in 0..4 { means[k] /= counts[k]; }
    let mut within = 0.0;
    for (a, y) in &acts { let d = a - &means[*y]; within += d.dot(&d).sqrt(); }
    within /= acts.len() as f64;
    let mut between: f64 = f64::INFINITY;
    for k in 0..4 { for l in 0..k { let d = &means[k] - &means[l]; between = between.min(d.dot(&d).sqrt()); } }
    println!("activation geometry: min between-class mean dist = {between:.2e}, mean within-class dist = {within:.2e}");

    // Nearest-class-mean accuracy (upper bound proxy for the linear head).
    let correct = acts.iter().filter(|(a, y)| {
        let mut best = 0; let mut bd = f64::INFINITY;
        for k in 0..4 { let d = a - &means[k]; let dist = d.dot(&d); if dist < bd { bd = dist; best = k; } }
        best == *y
    }).count();
    println!("nearest-mean train accuracy: {:.3}", correct as f64 / acts.len() as f64);
}
