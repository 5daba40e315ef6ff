use dotcbm::data::{generate_synthetic, SynthConfig};
use dotcbm::eval::{ablation_report, BoxMode};
use dotcbm::pipeline::*;

fn main() {
    let seeds: Vec<u64> = std::env::args().skip(1).map(|s| s.parse().unwrap()).collect();
    let seeds = if seeds.is_empty() { vec![1, 2, 3] } else { seeds };
    for seed in seeds {
        let scfg = SynthConfig { bg_bias: 0.8, bg_bias_ood: 0.0, seed, ..SynthConfig::default() };
        let ds = generate_synthetic(&scfg).unwrap();
        let base = TrainConfig {
            base_lr: 1e-3, batch_size: 128, max_epochs: 200, seed,
            ..TrainConfig::default()
        };
        let mut models = Vec::new();
        for priors in [true, false] {
            let cfg = TrainConfig { priors_enabled: priors, ..base.clone() };
            let s1 = stage1_train(&ds.bank, &ds.train, &cfg).unwrap();
            assert!(s1.aborted.is_none());
            let s2 = stage2_train(&ds.bank, &ds.train, &s1.model, &cfg).unwrap();
            assert!(s2.aborted.is_none());
            models.push(TrainedModel {
                stage1: s1.model, classifier: s2.classifier, config: cfg,
                concepts: ds.bank.concepts.clone(), concept_names: ds.bank.names.clone(),
            });
        }
        let report = ablation_report(&ds.bank, &ds.test_id, &ds.test_ood, &models[0], &models[1], BoxMode::AllCells).unwrap();
        let get = |c: &str, m: &str| report.value(c, m).unwrap();
        println!("seed {seed}: with: id={:.3} ood={:.3} map={:.3} | without: id={:.3} ood={:.3} map={:.3} | ood_acc_delta={:+.3} ood_map_delta={:+.3}",
            get("with_priors", "acc_id"), get("with_priors", "acc_ood"), get("with_priors", "map50_ood"),
            get("without_priors", "acc_id"), get("without_priors", "acc_ood"), get("without_priors", "map50_ood"),
            get("with_priors", "acc_ood") - get("without_priors", "acc_ood"),
            get("with_priors", "map50_ood") - get("without_priors", "map50_ood"));
    }
}
