use dotcbm::data::{generate_synthetic, SynthConfig};
use dotcbm::nn::{adapter_forward, Mode};
use dotcbm::pipeline::{forward_sample, stage1_train, Stage1Model, TrainConfig};

fn separation(ds: &dotcbm::data::SynthDataset, model: &Stage1Model, cfg: &TrainConfig) -> (f64, f64) {
    let (t_eval, _) = adapter_forward(&model.textual, &ds.bank.concepts, Mode::Eval, None).unwrap();
    let mut sep = 0usize; let mut tot = 0usize; let mut gap_sum = 0.0;
    for sample in &ds.train {
        let f = forward_sample(&model.visual, &t_eval, &model.gamma, &sample.bundle, cfg).unwrap();
        let m = sample.concept_label.len();
        let pmin = (0..m).filter(|&j| sample.concept_label[j] == 1.0).map(|j| f.acts.a_hat[j]).fold(f64::INFINITY, f64::min);
        let amax = (0..m).filter(|&j| sample.concept_label[j] == 0.0).map(|j| f.acts.a_hat[j]).fold(f64::NEG_INFINITY, f64::max);
        if pmin.is_finite() && amax.is_finite() {
            tot += 1; if pmin > amax { sep += 1; }
            gap_sum += pmin - amax;
        }
    }
    (sep as f64 / tot as f64, gap_sum / tot as f64)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1e-2);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(40);
    let eps: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let batch: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(64);
    let kappa: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let priors: bool = args.get(6).map(|s| s == "on").unwrap_or(true);
    let l1: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(0.15);
    let l2: f64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(0.2);
    let l3: f64 = args.get(9).and_then(|s| s.parse().ok()).unwrap_or(0.8);

    let scfg = SynthConfig {
        dim: 12, num_concepts: 4, num_classes: 2, grid: [4, 4],
        parts_per_concept: [2, 2], noise_std: 0.0, samples_per_class: 8, seed: 9,
        ..SynthConfig::default()
    };
    let ds = generate_synthetic(&scfg).unwrap();
    let cfg = TrainConfig {
        base_lr: lr, batch_size: batch, max_epochs: epochs, seed: 5,
        dropout_rate: 0.0, epsilon: eps, kappa, priors_enabled: priors,
        lambda1: l1, lambda2: l2, lambda3: l3,
        ..TrainConfig::default()
    };
    // Init-state metrics: train for 0 epochs is not possible, so train 1 step with lr 0.
    let cfg0 = TrainConfig { max_epochs: 1, base_lr: 1e-300, ..cfg.clone() };
    let out0 = stage1_train(&ds.bank, &ds.train, &cfg0).unwrap();
    let (sep0, gap0) = separation(&ds, &out0.model, &cfg);

    let out = stage1_train(&ds.bank, &ds.train, &cfg).unwrap();
    let (sep, gap) = separation(&ds, &out.model, &cfg);
    let first = out.log.first().unwrap();
    let last = out.log.last().unwrap();
    println!("lr={lr} ep={epochs} eps={eps} b={batch} k={kappa} priors={priors} | init sep={sep0:.2} gap={gap0:+.1e} -> sep={sep:.2} gap={gap:+.1e} | bce {:.4}->{:.4}",
             first.concept, last.concept);
}
