use mimgen::config::RunConfig;
use mimgen::verify::{self, Suite};

fn assert_all_pass(checks: &[verify::Check]) {
    assert!(!checks.is_empty());
    for c in checks {
        assert!(c.passed, "{c}");
    }
}

#[test]
fn gradient_suite_passes() {
    assert_all_pass(&verify::grad_checks().unwrap());
}

#[test]
fn untrained_fixture_suites_pass() {
    let cfg = RunConfig::default();
    let suites = Suite::parse_selector("schedule,rope,sampler,edit,persistence").unwrap();
    assert_all_pass(&verify::run(&suites, &cfg).unwrap());
}

#[test]
fn file_then_override_precedence() {
    let file = serde_json::json!({"train.steps": 7, "train.lr": "0.002", "seed": 5});
    let cfg = RunConfig::merge(Some(&file), &["train.steps=9".into()]).unwrap();
    assert_eq!(cfg.train.steps, 9);
    assert_eq!(cfg.train.lr, 0.002);
    assert_eq!((cfg.seed, cfg.train.seed, cfg.sampler.seed, cfg.tokenizer_train.seed), (5, 5, 5, 5));
    assert_eq!(RunConfig::merge(None, &[]).unwrap().train.steps, RunConfig::default().train.steps);
}

#[test]
fn gradient_checks_hold_across_seeds() {
    for seed in 0..10 {
        for (name, r) in verify::grad_reports_seeded(seed).unwrap() {
            assert!(r.max_rel_error < verify::GRAD_TOL, "seed {seed} {name}: {}", r.max_rel_error);
        }
    }
}
