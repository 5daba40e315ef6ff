use dotcbm::data::{generate_synthetic, SynthConfig};
use dotcbm::nn::{adapter_forward, Mode};
use dotcbm::pipeline::*;

fn main() {
    for eps in [0.1, 0.3, 0.5] {
        for drop in [0.0, 0.4] {
            let scfg = SynthConfig {
                dim: 16, num_concepts: 4, num_classes: 3, grid: [4, 4],
                parts_per_concept: [1, 2], noise_std: 0.0, samples_per_class: 8, seed: 9,
                ..SynthConfig::default()
            };
            let ds = generate_synthetic(&scfg).unwrap();
            let cfg = TrainConfig {
                base_lr: 1e-3, max_epochs: 40, seed: 5, dropout_rate: drop, epsilon: eps,
                ..TrainConfig::default()
            };
            let out = stage1_train(&ds.bank, &ds.train, &cfg).unwrap();
            let model = &out.model;
            let (t_eval, _) = adapter_forward(&model.textual, &ds.bank.concepts, Mode::Eval, None).unwrap();
            let mut sep = 0; let mut tot = 0;
            for s in &ds.train {
                let f = forward_sample(&model.visual, &t_eval, &model.gamma, &s.bundle, &cfg).unwrap();
                let pmin = (0..4).filter(|&j| s.concept_label[j] == 1.0).map(|j| f.acts.a_hat[j]).fold(f64::INFINITY, f64::min);
                let amax = (0..4).filter(|&j| s.concept_label[j] == 0.0).map(|j| f.acts.a_hat[j]).fold(f64::NEG_INFINITY, f64::max);
                if pmin.is_finite() && amax.is_finite() { tot += 1; if pmin > amax { sep += 1; } }
            }
            println!("eps={eps} drop={drop}: sep {sep}/{tot}  bce {:.4} -> {:.4}",
                     out.log.first().unwrap().concept, out.log.last().unwrap().concept);
        }
    }
}
