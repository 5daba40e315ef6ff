use dotcbm::data::{generate_synthetic, SynthConfig};
use dotcbm::nn::{adapter_forward, Mode};
use dotcbm::pipeline::*;

fn main() {
    let scfg = SynthConfig { seed: 42, ..SynthConfig::default() };
    let ds = generate_synthetic(&scfg).unwrap();
    let cfg = TrainConfig {
        base_lr: 0.05, batch_size: 16, max_epochs: 80, seed: 7,
        dropout_rate: 0.0, epsilon: 0.5, lambda1: 0.0, lambda2: 0.0, lambda3: 1.0,
        priors_enabled: false,
        ..TrainConfig::default()
    };
    let s1 = stage1_train(&ds.bank, &ds.train, &cfg).unwrap();
    let (t_eval, _) = adapter_forward(&s1.model.textual, &ds.bank.concepts, Mode::Eval, None).unwrap();
    let mut acts = Vec::new();
    let mut labels = Vec::new();
    for s in &ds.train {
        let f = forward_sample(&s1.model.visual, &t_eval, &s1.model.gamma, &s.bundle, &cfg).unwrap();
        acts.push(f.acts.a_hat);
        labels.push(s.class_label);
    }
    let amin = acts.iter().flat_map(|a| a.iter()).cloned().fold(f64::INFINITY, f64::min);
    let amax = acts.iter().flat_map(|a| a.iter()).cloned().fold(f64::NEG_INFINITY, f64::max);
    println!("activation range: [{amin:.6}, {amax:.6}] spread {:.2e}", amax - amin);

    for (s2lr, eps, bias) in [(0.05, 80, true), (0.5, 80, true), (2.0, 80, true), (0.5, 200, true), (0.05, 80, false)] {
        let cfg2 = TrainConfig { base_lr: s2lr, max_epochs: eps, use_bias: bias, ..cfg.clone() };
        let out = fit_classifier(&acts, &labels, 4, &cfg2).unwrap();
        let correct = acts.iter().zip(labels.iter()).filter(|(a, &y)| {
            let logits = out.classifier.logits(a);
            let mut best = 0;
            for k in 0..4 { if logits[k] > logits[best] { best = k; } }
            best == y
        }).count();
        let last_ce = out.log.last().unwrap().2;
        println!("stage2 lr={s2lr} epochs={eps} bias={bias}: train acc {:.3} final ce {:.4} |W|max {:.2}",
                 correct as f64 / acts.len() as f64, last_ce,
                 out.classifier.weight.iter().fold(0.0f64, |m, &w| m.max(w.abs())));
    }
}
