//! Monte-Carlo estimates against the analytic bounds.
//!
//! Standard-error budget: with 2000 trials of a chi-square-like energy in
//! `dim >= 64` dimensions the relative standard error of every mean below is
//! under 1%, so a 10% tolerance sits more than ten standard errors out.

use toprokit::bounds::{
    simulate_layer_bound, simulate_scale_bound, simulate_token_bound, simulate_total_bound,
    BoundsScenario, LayerResidualModel, ScaleScenario, TokenImportanceModel,
};

const TRIALS: usize = 2000;

#[test]
fn scale_bound_holds_on_increasing_profile() {
    let s = ScaleScenario {
        rho: vec![0.1, 0.3, 0.5, 0.7],
        tau: 0.4,
        ..ScaleScenario::default()
    };
    let r = simulate_scale_bound(&s, 256, TRIALS, 11, 0.0, 1.1).unwrap();
    assert_eq!(r.depth, Some(3));
    assert!((r.bound - 1.2).abs() < 1e-12);
    assert!(r.mean_error <= 1.1 * r.bound);
    assert!((r.mean_error / r.expected_error - 1.0).abs() < 0.1);
    assert!(r.assumptions_satisfied);
    // The profile rises after D, so the premise flag is reported as failing.
    assert!(!r.tail_non_increasing);
}

#[test]
fn layer_predictions() {
    let none = LayerResidualModel {
        scores: vec![1.0, 1.0],
        pruned: vec![],
        ..LayerResidualModel::default()
    };
    let r = simulate_layer_bound(&none, 64, TRIALS, 3, 0.0, 0.1).unwrap();
    assert_eq!((r.mean_error, r.gamma, r.prediction), (0.0, 0.0, 0.0));

    let all = LayerResidualModel {
        scores: vec![0.2, 0.5, 0.3],
        g_s: 2.5,
        pruned: vec![0, 1, 2],
        ..LayerResidualModel::default()
    };
    let r = simulate_layer_bound(&all, 64, TRIALS, 3, 0.0, 0.1).unwrap();
    assert!((r.prediction - 2.5).abs() < 1e-12);
    assert!(r.within_tolerance, "{r:?}");

    let half = LayerResidualModel {
        scores: vec![1.0, 1.0],
        g_s: 4.0,
        pruned: vec![1],
        ..LayerResidualModel::default()
    };
    let r = simulate_layer_bound(&half, 64, TRIALS, 3, 0.0, 0.1).unwrap();
    assert!((r.prediction - 2.0).abs() < 1e-12);
    assert!(r.within_tolerance, "{r:?}");
}

#[test]
fn token_bounds() {
    let zero = TokenImportanceModel {
        weights: vec![0.5, 0.5],
        total_energy: 3.0,
        pruned: vec![],
    };
    let r = simulate_token_bound(&zero, 64, TRIALS, 5, 0.1, 1.1).unwrap();
    assert_eq!((r.mean_error, r.bound), (0.0, 0.0));

    let uniform = TokenImportanceModel {
        weights: vec![0.125; 8],
        total_energy: 2.0,
        pruned: vec![0, 2, 4, 6],
    };
    let r = simulate_token_bound(&uniform, 64, TRIALS, 5, 0.1, 1.1).unwrap();
    assert!((r.bound - 1.0).abs() < 1e-12);
    assert!(r.within_tolerance && r.bound_satisfied, "{r:?}");

    let dominant = TokenImportanceModel {
        weights: vec![0.97, 0.01, 0.01, 0.01],
        total_energy: 1.0,
        pruned: vec![0],
    };
    let r = simulate_token_bound(&dominant, 64, TRIALS, 5, 0.1, 1.1).unwrap();
    assert!((r.bound - 0.97).abs() < 1e-12);
    assert!(r.within_tolerance, "{r:?}");
}

#[test]
fn closed_scenario_is_all_zeros() {
    let r = simulate_total_bound(&BoundsScenario::closed()).unwrap();
    assert_eq!(r.scale.mean_error, 0.0);
    assert!(r.layers.iter().all(|l| l.mean_error == 0.0 && l.prediction == 0.0));
    assert_eq!(r.token.mean_error, 0.0);
    assert_eq!((r.measured_total, r.bound_total), (0.0, 0.0));
    assert!(r.bound_satisfied && r.assumptions_satisfied);
}

#[test]
fn default_scenario_within_slack() {
    let r = simulate_total_bound(&BoundsScenario::default()).unwrap();
    assert!(r.scale.bound_satisfied);
    assert!(r.layers.iter().all(|l| l.within_tolerance));
    assert!(r.token.within_tolerance);
    assert!(r.measured_total <= 1.1 * r.bound_total);
    assert!(r.assumptions_satisfied);
}

#[test]
fn correlated_scenario_flags_violation() {
    let r = simulate_total_bound(&BoundsScenario::correlated()).unwrap();
    assert!(!r.assumptions_satisfied);
    assert!(!r.scale.assumptions_satisfied);
    assert!(!r.scale.bound_satisfied, "{:?}", r.scale);
}

#[test]
fn reports_are_reproducible_across_thread_counts() {
    let sc = BoundsScenario::default();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| simulate_total_bound(&sc).unwrap())
    };
    assert_eq!(run(1), run(4));
}
