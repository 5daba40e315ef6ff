use dotcbm::data::{generate_synthetic, SynthConfig};
use dotcbm::eval::{iou, mask_to_box, BoxMode, PixelBox};
use dotcbm::nn::{adapter_forward, Mode};
use dotcbm::ot::inversion_mask;
use dotcbm::pipeline::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(80);
    let eps: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.7);

    let scfg = SynthConfig { seed: 42, ..SynthConfig::default() };
    let ds = generate_synthetic(&scfg).unwrap();
    let cfg = TrainConfig {
        base_lr: lr, batch_size: 16, max_epochs: epochs, seed: 7,
        dropout_rate: 0.0, epsilon: eps, lambda1: 0.0, lambda2: 0.0, lambda3: 1.0,
        ..TrainConfig::default()
    };
    let s1 = stage1_train(&ds.bank, &ds.train, &cfg).unwrap();
    let model = &s1.model;
    let (t_eval, _) = adapter_forward(&model.textual, &ds.bank.concepts, Mode::Eval, None).unwrap();

    let mut hits = 0; let mut total = 0;
    for (si, s) in ds.test_id.iter().enumerate() {
        let f = forward_sample(&model.visual, &t_eval, &model.gamma, &s.bundle, &cfg).unwrap();
        let px = s.bundle.patch_px;
        for &(j, (x0, y0, x1, y1)) in &s.part_boxes {
            let gt = PixelBox { x_min: x0, y_min: y0, x_max: x1, y_max: y1 };
            let mask = inversion_mask(&f.plan, j, s.bundle.grid).unwrap();
            let pred = mask_to_box(&mask, px, BoxMode::AllCells);
            let overlap = pred.map(|p| iou(&p, &gt)).unwrap_or(0.0);
            total += 1; if overlap >= 0.5 { hits += 1; }
            if si < 2 {
                println!("sample {} concept {j}: IoU {overlap:.2} gt cells rows {}..{} cols {}..{}",
                         s.id, y0 / px, y1 / px, x0 / px, x1 / px);
                let peak = mask.weights.iter().cloned().fold(f64::MIN, f64::max);
                for r in 0..6 {
                    let row: Vec<String> = (0..6).map(|c| {
                        let v = mask.value_at(r, c);
                        let mark = if v >= 0.6 * peak { "*" } else { " " };
                        format!("{:5.3}{mark}", v / peak)
                    }).collect();
                    println!("    {}", row.join(" "));
                }
            }
        }
    }
    println!("hit rate (IoU>=0.5): {}/{} = {:.3}", hits, total, hits as f64 / total as f64);
}
