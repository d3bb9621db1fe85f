//! Trains three full-size toy models; takes minutes on one core.

use steerkit::harness::eval::run_discriminative_eval;
use steerkit::harness::pipeline::{check_bias_target, eval_questions, train_seed, ExperimentConfig};
use steerkit::EvalReport;

fn baseline(bias_strength: f64) -> EvalReport {
    let mut cfg = ExperimentConfig::default();
    cfg.model.bias_strength = bias_strength;
    let t = train_seed(0, &cfg).unwrap();
    let qs = eval_questions(&t, &cfg, 0).unwrap();
    run_discriminative_eval(&t.model, &t.vocab, &t.eval, &qs, None).unwrap()
}

#[test]
fn bias_strength_controls_the_conflict_gap() {
    let reports: Vec<(f64, EvalReport)> = [0.0, 0.5, 0.9].into_iter().map(|b| (b, baseline(b))).collect();
    for (b, r) in &reports {
        println!(
            "bias_strength {b}: conflict {:.3}, non-conflict {:.3}",
            r.conflict.accuracy, r.non_conflict.accuracy
        );
    }
    let unbiased = &reports[0].1;
    let gap = (unbiased.conflict.accuracy - unbiased.non_conflict.accuracy).abs();
    assert!(gap <= 0.05, "unbiased corpus leaves a {gap:.3} gap");
    for w in reports.windows(2) {
        assert!(
            w[1].1.conflict.accuracy <= w[0].1.conflict.accuracy,
            "conflict accuracy rose from bias {} to {}",
            w[0].0,
            w[1].0
        );
    }
    // The default strength meets the baseline bias target.
    let default = &reports[2].1;
    if let Err(e) = check_bias_target(default) {
        panic!("{e}");
    }
}
