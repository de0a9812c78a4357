use litv2::gradsuite::{self, Target, LAYER_TOLERANCE, MODEL_TOLERANCE};
use litv2::nn::GradCheckOptions;

fn sweep(target: Target, seeds: std::ops::Range<u64>) {
    let opts = GradCheckOptions::default();
    for seed in seeds {
        let reports = gradsuite::run(target, seed, &opts).unwrap();
        assert!(!reports.is_empty());
        for r in &reports {
            assert!(r.report.entries_checked > 0, "{}", r.name);
        }
        gradsuite::enforce(target, seed, &reports).unwrap();
    }
}

#[test]
fn ops_over_twenty_seeds() {
    sweep(Target::Ops, 0..20);
}

#[test]
fn hilo_over_twenty_seeds() {
    sweep(Target::Hilo, 0..20);
}

#[test]
fn blocks_over_twenty_seeds() {
    sweep(Target::Block, 0..20);
}

#[test]
fn tiny_model_end_to_end() {
    sweep(Target::Model, 0..2);
}

#[test]
fn every_op_is_covered() {
    let names: Vec<String> = gradsuite::check_ops(0, &GradCheckOptions::default())
        .unwrap()
        .into_iter()
        .map(|r| r.name)
        .collect();
    for op in [
        "matmul", "linear", "add", "softmax_rows", "layer_norm", "gelu", "dwconv3x3", "avgpool_window",
        "window_partition", "window_reverse", "space_to_depth", "reshape", "concat_last", "attention",
        "mean_tokens", "cross_entropy",
    ] {
        assert!(names.iter().any(|n| n == op), "{op} missing");
    }
}

#[test]
fn corrupted_gradient_is_caught() {
    let opts = GradCheckOptions { corrupt_analytic: Some(1e-2), ..Default::default() };
    for target in [Target::Ops, Target::Hilo] {
        let reports = gradsuite::run(target, 3, &opts).unwrap();
        assert!(gradsuite::enforce(target, 3, &reports).is_err());
    }
}

#[test]
fn tolerances() {
    assert_eq!(Target::Hilo.tolerance(), LAYER_TOLERANCE);
    assert_eq!(Target::Model.tolerance(), MODEL_TOLERANCE);
    const { assert!(LAYER_TOLERANCE <= 1e-4 && MODEL_TOLERANCE <= 1e-3) };
}
