use dotcbm::data::{generate_synthetic, SynthConfig};
use dotcbm::nn::{adapter_forward, Mode};
use dotcbm::ot::cost_matrix;
use dotcbm::pipeline::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(80);
    let eps: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.7);
    let l12: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.0);

    let scfg = SynthConfig { seed: 42, ..SynthConfig::default() };
    let ds = generate_synthetic(&scfg).unwrap();
    let cfg = TrainConfig {
        base_lr: lr, batch_size: 16, max_epochs: epochs, seed: 7,
        dropout_rate: 0.0, epsilon: eps, lambda1: l12, lambda2: l12, lambda3: 1.0,
        ..TrainConfig::default()
    };
    let s1 = stage1_train(&ds.bank, &ds.train, &cfg).unwrap();
    let model = &s1.model;
    let (t_eval, _) = adapter_forward(&model.textual, &ds.bank.concepts, Mode::Eval, None).unwrap();

    // assoc[j][l] = mean cos(adapted patch planted for concept j, adapted concept l)
    let mut assoc = vec![vec![(0.0, 0usize); 6]; 6];
    let mut bg_row = vec![(0.0, 0usize); 6];
    for s in ds.train.iter() {
        let (p_ad, _) = adapter_forward(&model.visual, &s.bundle.patches, Mode::Eval, None).unwrap();
        let d = cost_matrix(&p_ad, &t_eval).unwrap();
        let (h, w) = s.bundle.grid;
        let px = s.bundle.patch_px;
        let mut owner = vec![None::<usize>; h * w];
        for &(j, (x0, y0, x1, y1)) in &s.part_boxes {
            for r in y0 / px..y1 / px { for c in x0 / px..x1 / px { owner[r * w + c] = Some(j); } }
        }
        for i in 0..h * w {
            for l in 0..6 {
                let cos = 1.0 - d[[i, l]];
                match owner[i] {
                    Some(j) => { assoc[j][l].0 += cos; assoc[j][l].1 += 1; }
                    None => { bg_row[l].0 += cos; bg_row[l].1 += 1; }
                }
            }
        }
    }
    println!("rows: planted content j; cols: adapted concept l; entries mean cos");
    for j in 0..6 {
        let row: Vec<String> = (0..6).map(|l| format!("{:+.2}", assoc[j][l].0 / assoc[j][l].1.max(1) as f64)).collect();
        println!("  content {j}: {}", row.join(" "));
    }
    let row: Vec<String> = (0..6).map(|l| format!("{:+.2}", bg_row[l].0 / bg_row[l].1 as f64)).collect();
    println!("  background: {}", row.join(" "));

    // concept-concept cos of adapted concepts
    println!("adapted concept pairwise cos:");
    for a in 0..6 {
        let ra = t_eval.row(a);
        let na = ra.dot(&ra).sqrt();
        let row: Vec<String> = (0..6).map(|b| {
            let rb = t_eval.row(b);
            format!("{:+.2}", ra.dot(&rb) / (na * rb.dot(&rb).sqrt()))
        }).collect();
        println!("  t{a}: {}", row.join(" "));
    }
}
