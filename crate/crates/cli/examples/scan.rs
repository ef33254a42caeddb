// Scratch: A/B the adaptation objective on a 0.7-skewed stream, reporting
// minority-class recall. Not part of the deliverable surface.

use ttaq_core::data::ImbalanceProfile;
use ttaq_core::harness::{self, ExperimentConfig, MatrixPaths, Toggles};
use ttaq_core::tta::{evaluate_stream, Objective};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut cfg = ExperimentConfig::default();
    cfg.stream.imbalance = ImbalanceProfile::Skewed { major_class: 0, major_weight: 0.7 };
    let out = std::path::PathBuf::from("/tmp/ttaq-scan9");
    std::fs::create_dir_all(out.join("ptq")).unwrap();
    let paths = MatrixPaths { out_dir: out };
    let data = harness::prepare_data(&cfg).unwrap();
    let source = harness::source_model(&cfg, &data, &paths).unwrap();
    let qm =
        harness::ptq_arm(&cfg, &source, &data.calib, Toggles::default(), 2, 4, &paths).unwrap();
    let minority: Vec<usize> = (1..cfg.data.classes).collect();
    for (name, objective, lr, ew) in [
        ("ent-1e2", Objective::Entropy, 1e-2, 0.0),
        ("mix-1e2", Objective::Abl, 1e-2, 1.0),
        ("ent-3e2", Objective::Entropy, 3e-2, 0.0),
        ("mix-3e2", Objective::Abl, 3e-2, 1.0),
        ("mix2-3e2", Objective::Abl, 3e-2, 2.0),
    ] {
        let mut recalls = Vec::new();
        let mut errors = Vec::new();
        let mut per_class = vec![0.0; cfg.data.classes];
        for seed in 0..5u64 {
            let stream = harness::stream_for_seed(&cfg, &data.test, seed).unwrap();
            let mut acfg = cfg.adapt.clone();
            acfg.objective = objective;
            acfg.lr = lr;
            acfg.entropy_weight = ew;
            if lr == 0.0 {
                acfg.adapt_affine = false;
            }
            let (report, _) = evaluate_stream(qm.clone(), &stream, &acfg).unwrap();
            recalls.push(report.recall_over(&minority));
            errors.push(report.mean_error);
            for c in 0..cfg.data.classes {
                if report.per_class_total[c] > 0 {
                    per_class[c] += 100.0 * report.per_class_correct[c] as f64
                        / report.per_class_total[c] as f64
                        / 5.0;
                }
            }
        }
        let mr = recalls.iter().sum::<f64>() / recalls.len() as f64;
        let me = errors.iter().sum::<f64>() / errors.len() as f64;
        println!(
            "{:<8}: minority recall {:.2}% mean error {:.2}% per-class {:?}",
            name,
            mr,
            me,
            per_class.iter().map(|r| r.round()).collect::<Vec<_>>()
        );
    }
}
